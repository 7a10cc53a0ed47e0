use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::untranspose_weights;
use super::{ModelParams, Prepared, INPUT_SIZE};
use crate::error::{Error, Result};
use crate::imaging::{random_augment, AugmentRanges, RgbImage};
use crate::seed::derive_seed;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            augmentation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Mean cross-entropy over each epoch's samples.
    pub loss_curve: Vec<f64>,
}

/// Mini-batch SGD with classical momentum on the mean cross-entropy.
///
/// Per-sample gradients may be computed in parallel; they are reduced in
/// sample order so results do not depend on the thread count.
pub fn train(data: &[LabeledImage], num_classes: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if num_classes < 2 {
        return Err(Error::Parameter(
            "a classifier needs at least two classes".into(),
        ));
    }
    let mut counts = vec![0usize; num_classes];
    for s in data {
        if s.label >= num_classes {
            return Err(Error::Dataset(format!("label {} out of range", s.label)));
        }
        if (s.image.width(), s.image.height()) != (INPUT_SIZE, INPUT_SIZE) {
            return Err(Error::Dimension(format!(
                "training images must be {INPUT_SIZE}x{INPUT_SIZE}, got {}x{}",
                s.image.width(),
                s.image.height()
            )));
        }
        counts[s.label] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Dataset(format!(
            "class {empty} has no training samples"
        )));
    }

    let mut params = ModelParams::he_uniform(num_classes, cfg.seed);
    let mut velocity: Vec<Vec<f32>> = params
        .tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let ranges = AugmentRanges::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let prepared = Prepared::new(&params);
            let results: Vec<Result<(f64, [Vec<f32>; 8])>> = batch
                .par_iter()
                .map(|&i| {
                    let sample = &data[i];
                    let input = if cfg.augmentation {
                        let seed = derive_seed(cfg.seed, &[2, epoch as u64, i as u64]);
                        random_augment(&sample.image, &ranges, seed).to_unit_f32()
                    } else {
                        sample.image.to_unit_f32()
                    };
                    let fp = prepared.forward(&input)?;
                    let p = f64::from(fp.probabilities[sample.label]).max(1e-30);
                    let mut grad_logits = fp.probabilities.clone();
                    grad_logits[sample.label] -= 1.0;
                    Ok((-p.ln(), prepared.parameter_gradients(&fp, &grad_logits)))
                })
                .collect();
            drop(prepared);

            let scale = 1.0 / batch.len() as f32;
            let mut sum: Option<[Vec<f32>; 8]> = None;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss in epoch {epoch}"
                    )));
                }
                epoch_loss += loss;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            for (idx, conv) in [(0, &params.conv1), (2, &params.conv2), (4, &params.conv3)] {
                grads[idx] = untranspose_weights(&grads[idx], conv.cout, conv.cin);
            }
            let lr = cfg.learning_rate as f32;
            let mu = cfg.momentum as f32;
            for ((param, vel), grad) in params
                .tensors_mut()
                .into_iter()
                .zip(&mut velocity)
                .zip(&grads)
            {
                for ((w, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = mu * *v - lr * g * scale;
                    *w += *v;
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite()
            || params
                .tensors()
                .iter()
                .any(|(_, t)| t.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "training diverged in epoch {epoch}"
            )));
        }
        loss_curve.push(mean);
    }
    Ok(TrainReport { params, loss_curve })
}
