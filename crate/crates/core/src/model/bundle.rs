//! Model bundle: a directory holding `arch.json` and one `.ctns` file per
//! parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, INPUT_CHANNELS, INPUT_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescription {
    pub format: String,
    /// `[height, width, channels]`
    pub input_size: [usize; 3],
    pub num_classes: usize,
    pub conv_filters: [usize; 3],
    pub layers: Vec<String>,
    /// Parameter name to CTNS shape.
    pub parameters: Vec<(String, Vec<usize>)>,
}

pub const FORMAT: &str = "ace-tiny-cnn/1";

fn shapes(p: &ModelParams) -> Vec<(String, Vec<usize>)> {
    let conv = |c: &super::ConvLayer| vec![c.cout, 3, 3, c.cin];
    vec![
        ("conv1.w".into(), conv(&p.conv1)),
        ("conv1.b".into(), vec![p.conv1.cout]),
        ("conv2.w".into(), conv(&p.conv2)),
        ("conv2.b".into(), vec![p.conv2.cout]),
        ("conv3.w".into(), conv(&p.conv3)),
        ("conv3.b".into(), vec![p.conv3.cout]),
        ("dense.w".into(), vec![p.dense.outputs, p.dense.inputs]),
        ("dense.b".into(), vec![p.dense.outputs]),
    ]
}

pub fn save_bundle(params: &ModelParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let parameters = shapes(params);
    let arch = ArchDescription {
        format: FORMAT.into(),
        input_size: [INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS],
        num_classes: params.num_classes(),
        conv_filters: [params.conv1.cout, params.conv2.cout, params.conv3.cout],
        layers: super::LayerSelector::ALL
            .iter()
            .map(|l| l.name().to_string())
            .collect(),
        parameters: parameters.clone(),
    };
    let json = serde_json::to_string_pretty(&arch).map_err(|e| Error::json("arch.json", e))?;
    let arch_path = dir.join("arch.json");
    fs::write(&arch_path, json + "\n").map_err(|e| Error::io(arch_path, e))?;
    for ((name, data), (_, shape)) in params.tensors().iter().zip(parameters) {
        write_tensor(
            &Tensor::new(shape, data.to_vec())?,
            dir.join(format!("{name}.ctns")),
        )?;
    }
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let arch_path = dir.join("arch.json");
    let text = fs::read_to_string(&arch_path).map_err(|e| Error::io(&arch_path, e))?;
    let arch: ArchDescription =
        serde_json::from_str(&text).map_err(|e| Error::json(arch_path.display().to_string(), e))?;
    if arch.format != FORMAT {
        return Err(Error::Format(format!(
            "unknown model format {}",
            arch.format
        )));
    }
    if arch.input_size != [INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS] {
        return Err(Error::Format(format!(
            "unsupported input size {:?}",
            arch.input_size
        )));
    }
    let mut params = ModelParams::zeros(arch.num_classes);
    let expected = shapes(&params);
    for (slot, (name, shape)) in params.tensors_mut().into_iter().zip(expected) {
        let t = read_tensor(dir.join(format!("{name}.ctns")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        *slot = t.into_data();
    }
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ModelParams::he_uniform(3, 17);
        save_bundle(&p, dir.path()).unwrap();
        assert!(dir.path().join("dense.w.ctns").exists());
        assert_eq!(load_bundle(dir.path()).unwrap(), p);
    }

    #[test]
    fn mismatched_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&ModelParams::he_uniform(2, 1), dir.path()).unwrap();
        write_tensor(
            &Tensor::new(vec![4], vec![0.0; 4]).unwrap(),
            dir.path().join("conv1.b.ctns"),
        )
        .unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Format(_))));
    }
}
