//! Model access for concept discovery: batched layer activations and class
//! logit gradients from the builtin network or an external process.
//!
//! External protocol: the engine writes `request.json`
//! `{"op", "layer", "class"?, "input", "output"}` next to an input CTNS
//! tensor of shape `N x H x W x 3` and runs `<command> --request
//! request.json`. The backend writes an `N x D` CTNS tensor to `output` and
//! exits 0. `{"op": "probe"}` answers with [`BackendInfo`] JSON on stdout.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::matrix::Matrix;
use crate::model::{load_bundle, LayerSelector, ModelParams, Prepared, INPUT_CHANNELS, INPUT_SIZE};
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::Matrix32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    /// `[height, width]`
    pub input_size: [usize; 2],
    pub num_classes: usize,
    pub layers: Vec<String>,
}

impl BackendInfo {
    pub fn validate(&self) -> Result<()> {
        if self.input_size.contains(&0) || self.num_classes == 0 || self.layers.is_empty() {
            return Err(Error::Backend(format!(
                "invalid backend description {self:?}"
            )));
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: &str) -> Result<()> {
        if self.layers.iter().any(|l| l == layer) {
            Ok(())
        } else {
            Err(Error::Layer(layer.to_string()))
        }
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class < self.num_classes {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "class {class} out of range for a {}-class model",
                self.num_classes
            )))
        }
    }
}

pub trait ModelBackend: Send + Sync {
    fn info(&self) -> &BackendInfo;

    /// Row `i` is the flattened layer activation of image `i`.
    fn activations(&self, images: &Tensor, layer: &str) -> Result<Matrix32>;

    /// Row `i` is the gradient of logit `class` w.r.t. the layer activations.
    fn logit_gradients(&self, images: &Tensor, layer: &str, class: usize) -> Result<Matrix32>;
}

/// Stacks equally sized images into an `N x H x W x 3` tensor in `[0, 1]`.
pub fn images_to_batch(images: &[RgbImage]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Parameter("cannot build an empty image batch".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Dimension("batch images differ in size".into()));
        }
        data.extend(img.to_unit_f32());
    }
    Tensor::new(vec![images.len(), h, w, 3], data)
}

fn check_batch(info: &BackendInfo, images: &Tensor) -> Result<usize> {
    let [h, w] = info.input_size;
    match images.shape() {
        [n, bh, bw, 3] if *bh == h && *bw == w => Ok(*n),
        s => Err(Error::Dimension(format!(
            "expected an N x {h} x {w} x 3 batch, got {s:?}"
        ))),
    }
}

/// The builtin CNN evaluated in-process.
#[derive(Debug, Clone)]
pub struct BuiltinBackend {
    params: ModelParams,
    info: BackendInfo,
}

impl BuiltinBackend {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let info = BackendInfo {
            input_size: [INPUT_SIZE, INPUT_SIZE],
            num_classes: params.num_classes(),
            layers: LayerSelector::ALL
                .iter()
                .map(|l| l.name().to_string())
                .collect(),
        };
        Ok(Self { params, info })
    }

    pub fn from_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_bundle(dir)?)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn per_image(
        &self,
        images: &Tensor,
        layer: &str,
        f: impl Fn(&Prepared, &[f32], LayerSelector) -> Result<Vec<f32>> + Sync,
    ) -> Result<Matrix32> {
        let n = check_batch(&self.info, images)?;
        let sel: LayerSelector = layer.parse()?;
        let prepared = Prepared::new(&self.params);
        let len = INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS;
        let rows: Vec<Vec<f32>> = images
            .data()
            .par_chunks(len)
            .map(|img| f(&prepared, img, sel))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(n * sel.dim());
        rows.iter().for_each(|r| data.extend_from_slice(r));
        Matrix::new(n, sel.dim(), data)
    }
}

impl ModelBackend for BuiltinBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn activations(&self, images: &Tensor, layer: &str) -> Result<Matrix32> {
        self.per_image(images, layer, |p, img, sel| {
            Ok(p.forward(img)?.activation(sel).to_vec())
        })
    }

    fn logit_gradients(&self, images: &Tensor, layer: &str, class: usize) -> Result<Matrix32> {
        self.info.check_class(class)?;
        self.per_image(images, layer, |p, img, sel| {
            p.logit_gradient(img, class, sel)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Probe,
    Activations,
    Gradients,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// A backend reached through the subprocess protocol. Calls are serialized.
#[derive(Debug)]
pub struct ExternalBackend {
    command: Vec<String>,
    info: BackendInfo,
    lock: Mutex<()>,
}

impl ExternalBackend {
    /// Probes the command to learn its input size, classes and layers.
    pub fn new(command: Vec<String>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Backend("empty backend command".into()));
        }
        let mut backend = Self {
            command,
            info: BackendInfo {
                input_size: [1, 1],
                num_classes: 1,
                layers: vec![],
            },
            lock: Mutex::new(()),
        };
        let stdout = backend.invoke(&Request {
            op: Op::Probe,
            layer: None,
            class: None,
            input: None,
            output: None,
        })?;
        let info: BackendInfo = serde_json::from_str(stdout.trim())
            .map_err(|e| Error::Backend(format!("unparseable probe response {stdout:?}: {e}")))?;
        info.validate()?;
        backend.info = info;
        Ok(backend)
    }

    fn invoke(&self, request: &Request) -> Result<String> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let request_path = dir.path().join("request.json");
        let text = serde_json::to_string(request).map_err(|e| Error::json("request.json", e))?;
        fs::write(&request_path, text).map_err(|e| Error::io(&request_path, e))?;
        let out = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg("--request")
            .arg(&request_path)
            .output()
            .map_err(|e| {
                Error::Backend(format!("cannot start `{}`: {e}", self.command.join(" ")))
            })?;
        if !out.status.success() {
            return Err(Error::Backend(format!(
                "`{}` failed with {}: {}",
                self.command.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    fn tensor_call(&self, images: &Tensor, layer: &str, class: Option<usize>) -> Result<Matrix32> {
        let n = check_batch(&self.info, images)?;
        self.info.check_layer(layer)?;
        if let Some(c) = class {
            self.info.check_class(c)?;
        }
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.ctns");
        let output = dir.path().join("output.ctns");
        write_tensor(images, &input)?;
        self.invoke(&Request {
            op: if class.is_some() {
                Op::Gradients
            } else {
                Op::Activations
            },
            layer: Some(layer.to_string()),
            class,
            input: Some(input),
            output: Some(output.clone()),
        })?;
        let t =
            read_tensor(&output).map_err(|e| Error::Backend(format!("bad backend output: {e}")))?;
        match t.shape() {
            [rows, _] if *rows == n => Matrix::from_tensor(&t),
            s => Err(Error::Backend(format!(
                "backend returned shape {s:?} for a batch of {n}"
            ))),
        }
    }
}

impl ModelBackend for ExternalBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn activations(&self, images: &Tensor, layer: &str) -> Result<Matrix32> {
        self.tensor_call(images, layer, None)
    }

    fn logit_gradients(&self, images: &Tensor, layer: &str, class: usize) -> Result<Matrix32> {
        self.tensor_call(images, layer, Some(class))
    }
}

/// `builtin:<bundle dir>` or `external:<command line>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Builtin(PathBuf),
    External(Vec<String>),
}

impl BackendSpec {
    pub fn open(&self) -> Result<Box<dyn ModelBackend>> {
        Ok(match self {
            BackendSpec::Builtin(dir) => Box::new(BuiltinBackend::from_bundle(dir)?),
            BackendSpec::External(cmd) => Box::new(ExternalBackend::new(cmd.clone())?),
        })
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Builtin(p) => write!(f, "builtin:{}", p.display()),
            BackendSpec::External(cmd) => write!(f, "external:{}", cmd.join(" ")),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("builtin:") {
            if !path.is_empty() {
                return Ok(BackendSpec::Builtin(PathBuf::from(path)));
            }
        } else if let Some(cmd) = s.strip_prefix("external:") {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if !parts.is_empty() {
                return Ok(BackendSpec::External(parts));
            }
        }
        Err(Error::Parameter(format!(
            "backend spec `{s}` must be builtin:<bundle dir> or external:<command>"
        )))
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Server side of the protocol: answers one request with `backend`.
/// Returns the text to print on stdout (only `probe` prints anything).
pub fn serve_request(backend: &dyn ModelBackend, request_path: impl AsRef<Path>) -> Result<String> {
    let path = request_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let req: Request =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if req.op == Op::Probe {
        return serde_json::to_string(backend.info()).map_err(|e| Error::json("probe", e));
    }
    let missing = |field: &str| Error::Backend(format!("request lacks `{field}`"));
    let layer = req.layer.as_deref().ok_or_else(|| missing("layer"))?;
    let input = req.input.as_ref().ok_or_else(|| missing("input"))?;
    let output = req.output.as_ref().ok_or_else(|| missing("output"))?;
    backend.info().check_layer(layer)?;
    let images = read_tensor(input)?;
    let result = match req.op {
        Op::Activations => backend.activations(&images, layer)?,
        Op::Gradients => {
            backend.logit_gradients(&images, layer, req.class.ok_or_else(|| missing("class"))?)?
        }
        Op::Probe => unreachable!(),
    };
    write_tensor(&result.to_tensor()?, output)?;
    Ok(String::new())
}
