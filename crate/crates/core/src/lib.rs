//! Concept discovery and TCAV scoring for image classifiers.
//!
//! The pipeline segments class images into multi-resolution superpixels,
//! clusters their embeddings at a chosen layer into candidate concepts, and
//! ranks the concepts by how consistently moving the layer activations
//! toward them raises the class logit, with a t-test against random
//! directions.

pub mod backend;
pub mod cav;
pub mod config;
pub mod dataset;
pub mod discovery;
pub mod error;
pub mod imaging;
pub mod kmeans;
pub mod mask;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod slic;
pub mod stats;
pub mod synth;
pub mod tcav;
pub mod tensor;

pub use error::{Error, Result};

/// Single-precision instantiations, the native type of backend outputs.
pub type Matrix32 = matrix::Matrix<f32>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type Cav32 = cav::Cav<f32>;
pub type Cav64 = cav::Cav<f64>;
pub type KMeansResult32 = kmeans::KMeansResult<f32>;
pub type KMeansResult64 = kmeans::KMeansResult<f64>;
