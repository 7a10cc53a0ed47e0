//! The effective configuration of a pipeline run, echoed into every output.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backend::BackendSpec;
use crate::cav::CavConfig;
use crate::discovery::PruneConfig;
use crate::error::{Error, Result};
use crate::kmeans::KMeansConfig;
use crate::slic::SegmentationConfig;
use crate::tcav::SignificanceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub backend: Option<BackendSpec>,
    /// Bottleneck layer; there is deliberately no default.
    pub layer: Option<String>,
    /// Target class name or index; `None` processes every class.
    pub class: Option<String>,
    pub segmentation: SegmentationConfig,
    pub k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_restarts: usize,
    pub prune: PruneConfig,
    /// Discovery images drawn per class from the train+validation pool.
    pub discovery_images: usize,
    /// Evaluation images of the target class, disjoint from discovery.
    pub eval_images: usize,
    pub n_runs: usize,
    pub alpha: f64,
    /// Random counterexamples per CAV run.
    pub random_set_size: usize,
    pub cav: CavConfig,
    pub embed_batch: usize,
    pub seed: u64,
    /// Seed of the train/validation/test split shared with `train`.
    pub split_seed: u64,
    pub montage_examples: usize,
    /// Randomizes montage example selection when set.
    pub sample_seed: Option<u64>,
    pub html: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sig = SignificanceConfig::default();
        let km = KMeansConfig::default();
        Self {
            dataset: PathBuf::from("data"),
            backend: None,
            layer: None,
            class: None,
            segmentation: SegmentationConfig::default(),
            k: km.k,
            kmeans_max_iter: km.max_iter,
            kmeans_restarts: km.restarts,
            prune: PruneConfig::default(),
            discovery_images: 40,
            eval_images: 50,
            n_runs: sig.n_runs,
            alpha: sig.alpha,
            random_set_size: sig.random_set_size,
            cav: sig.cav,
            embed_batch: 64,
            seed: 0,
            split_seed: 0,
            montage_examples: 3,
            sample_seed: None,
            html: false,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("run config", e))
    }

    pub fn backend(&self) -> Result<&BackendSpec> {
        self.backend.as_ref().ok_or_else(|| {
            Error::Parameter("no backend given (builtin:<bundle> or external:<command>)".into())
        })
    }

    pub fn layer(&self) -> Result<&str> {
        self.layer.as_deref().ok_or_else(|| {
            Error::Parameter("no layer given; choose one of the backend's layers explicitly".into())
        })
    }

    pub fn kmeans(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            max_iter: self.kmeans_max_iter,
            restarts: self.kmeans_restarts,
            seed,
        }
    }

    pub fn significance(&self, n_concepts: usize) -> SignificanceConfig {
        SignificanceConfig {
            n_runs: self.n_runs,
            alpha: self.alpha,
            n_concepts: n_concepts.max(1),
            random_set_size: self.random_set_size,
            cav: self.cav,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Parameter(m));
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if self.discovery_images == 0 || self.eval_images == 0 {
            return err("discovery_images and eval_images must be positive".into());
        }
        if self.embed_batch == 0 {
            return err("embed_batch must be at least 1".into());
        }
        if self.montage_examples == 0 {
            return err("montage_examples must be at least 1".into());
        }
        if self.segmentation.levels.is_empty() {
            return err("at least one segmentation level is required".into());
        }
        self.significance(1).validate()
    }
}
