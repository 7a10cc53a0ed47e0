//! Labelled image collections: a `manifest.json` written by the synthetic
//! generator, or a plain directory with one sub-directory per class.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, RgbImage};
use crate::mask::{Mask, Rle};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub class: usize,
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spot_rle: Option<Rle>,
    #[serde(default)]
    pub shadow: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow_rle: Option<Rle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf_rle: Option<Rle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub classes: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm") | Some("png")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    /// Opens `root/manifest.json` when present, otherwise scans class
    /// sub-directories in name order.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::io(
                &root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = if manifest_path.is_file() {
            let text =
                fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::json(manifest_path.display().to_string(), e))?
        } else {
            Self::scan(&root)?
        };
        let ds = Self { root, manifest };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_manifest(root: impl AsRef<Path>, manifest: DatasetManifest) -> Result<Self> {
        let ds = Self {
            root: root.as_ref().to_path_buf(),
            manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn scan(root: &Path) -> Result<DatasetManifest> {
        let mut classes = Vec::new();
        let mut images = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let name = dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let class = classes.len();
            let files: Vec<PathBuf> = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| is_image_file(p))
                .collect();
            if files.is_empty() {
                continue;
            }
            classes.push(name.clone());
            for f in files {
                images.push(ImageRecord {
                    path: format!(
                        "{name}/{}",
                        f.file_name().unwrap_or_default().to_string_lossy()
                    ),
                    class,
                    class_name: name.clone(),
                    palette_id: None,
                    spot_rle: None,
                    shadow: false,
                    shadow_rle: None,
                    leaf_rle: None,
                });
            }
        }
        Ok(DatasetManifest {
            images,
            classes,
            config: serde_json::Value::Null,
            seed: None,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.manifest.classes.is_empty() || self.manifest.images.is_empty() {
            return Err(Error::Dataset(format!(
                "no labelled images under {}",
                self.root.display()
            )));
        }
        for rec in &self.manifest.images {
            if rec.class >= self.manifest.classes.len() {
                return Err(Error::Dataset(format!(
                    "{} has class {} out of range",
                    rec.path, rec.class
                )));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.manifest.images
    }

    pub fn len(&self) -> usize {
        self.manifest.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.images.iter().map(|r| r.class).collect()
    }

    /// Accepts a class name or a numeric index.
    pub fn class_index(&self, class: &str) -> Result<usize> {
        if let Some(i) = self.manifest.classes.iter().position(|c| c == class) {
            return Ok(i);
        }
        match class.parse::<usize>() {
            Ok(i) if i < self.manifest.classes.len() => Ok(i),
            _ => Err(Error::Dataset(format!(
                "unknown class `{class}` (known: {})",
                self.manifest.classes.join(", ")
            ))),
        }
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.manifest.images[index].path)
    }

    pub fn load(&self, index: usize) -> Result<RgbImage> {
        load_image(self.image_path(index))
    }

    pub fn spot_mask(&self, index: usize) -> Result<Option<Mask>> {
        self.manifest.images[index]
            .spot_rle
            .as_ref()
            .map(Mask::from_rle)
            .transpose()
    }

    pub fn shadow_mask(&self, index: usize) -> Result<Option<Mask>> {
        self.manifest.images[index]
            .shadow_rle
            .as_ref()
            .map(Mask::from_rle)
            .transpose()
    }

    pub fn leaf_mask(&self, index: usize) -> Result<Option<Mask>> {
        self.manifest.images[index]
            .leaf_rle
            .as_ref()
            .map(Mask::from_rle)
            .transpose()
    }
}
