//! Concept activation vectors: linear separators between concept and
//! counterexample embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CavLoss {
    Logistic,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CavConfig {
    pub loss: CavLoss,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Fraction of each side held out for the accuracy estimate.
    pub holdout: f64,
    /// Runs whose held-out accuracy falls below this are flagged.
    pub min_accuracy: f64,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            loss: CavLoss::Logistic,
            learning_rate: 0.01,
            epochs: 100,
            l2: 1e-3,
            holdout: 1.0 / 3.0,
            min_accuracy: 0.55,
        }
    }
}

/// Unit normal of the concept-vs-counterexample boundary, pointing to the
/// concept side.
#[derive(Debug, Clone, PartialEq)]
pub struct Cav<T> {
    pub vector: Vec<T>,
    pub heldout_accuracy: f64,
    pub low_accuracy: bool,
}

pub const MIN_SIDE: usize = 4;

fn split_side(n: usize, frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let held = ((n as f64 * frac).floor() as usize).clamp(1, n - 1);
    let train = idx.split_off(held);
    (train, idx)
}

/// Trains a linear classifier (concept = positive) by seeded SGD and returns
/// its normalized weight vector.
///
/// Features are centred on the training mean and divided by the RMS norm of
/// the centred training rows, so multiplying every embedding by a positive
/// constant leaves the result unchanged up to rounding.
pub fn train_cav<T: Scalar>(
    concept: &Matrix<T>,
    random: &Matrix<T>,
    cfg: &CavConfig,
    seed: u64,
) -> Result<Cav<T>> {
    if concept.rows() < MIN_SIDE || random.rows() < MIN_SIDE {
        return Err(Error::Parameter(format!(
            "CAV training needs at least {MIN_SIDE} examples per side, got {} and {}",
            concept.rows(),
            random.rows()
        )));
    }
    if concept.cols() != random.cols() {
        return Err(Error::Dimension(format!(
            "concept rows have {} columns, random rows {}",
            concept.cols(),
            random.cols()
        )));
    }
    if !(cfg.learning_rate > 0.0 && cfg.l2 >= 0.0 && cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(Error::Parameter("invalid CAV hyper-parameters".into()));
    }
    let dim = concept.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_train, c_held) = split_side(concept.rows(), cfg.holdout, &mut rng);
    let (r_train, r_held) = split_side(random.rows(), cfg.holdout, &mut rng);
    let row = |positive: bool, i: usize| {
        if positive {
            concept.row(i)
        } else {
            random.row(i)
        }
    };

    let train: Vec<(bool, usize)> = c_train
        .iter()
        .map(|&i| (true, i))
        .chain(r_train.iter().map(|&i| (false, i)))
        .collect();
    let mut mean = vec![0.0f64; dim];
    for &(pos, i) in &train {
        for (m, &v) in mean.iter_mut().zip(row(pos, i)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let features = |pos: bool, i: usize| -> Vec<f64> {
        row(pos, i)
            .iter()
            .zip(&mean)
            .map(|(&v, m)| v.as_f64() - m)
            .collect()
    };
    let mut x: Vec<(f64, Vec<f64>)> = train
        .iter()
        .map(|&(pos, i)| (if pos { 1.0 } else { -1.0 }, features(pos, i)))
        .collect();
    let scale = (x
        .iter()
        .map(|(_, f)| f.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / x.len() as f64)
        .sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Training(
            "CAV training data is degenerate (all points identical)".into(),
        ));
    }
    for (_, f) in &mut x {
        f.iter_mut().for_each(|v| *v /= scale);
    }

    let mut w = vec![0.0f64; dim];
    let mut bias = 0.0f64;
    let mut order: Vec<usize> = (0..x.len()).collect();
    let lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &s in &order {
            let (y, f) = &x[s];
            let z = bias + f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            // d(loss)/dz for the label y in {-1, +1}.
            let g = match cfg.loss {
                CavLoss::Logistic => -y / (1.0 + (y * z).exp()),
                CavLoss::Hinge if y * z < 1.0 => -y,
                CavLoss::Hinge => 0.0,
            };
            for (wi, fi) in w.iter_mut().zip(f) {
                *wi -= lr * (g * fi + cfg.l2 * *wi);
            }
            bias -= lr * g;
        }
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Training(
            "CAV weight vector vanished or diverged".into(),
        ));
    }

    let held: Vec<(bool, usize)> = c_held
        .iter()
        .map(|&i| (true, i))
        .chain(r_held.iter().map(|&i| (false, i)))
        .collect();
    let correct = held
        .iter()
        .filter(|&&(pos, i)| {
            let z = bias
                + features(pos, i)
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / scale;
            (z > 0.0) == pos
        })
        .count();
    let heldout_accuracy = correct as f64 / held.len() as f64;
    Ok(Cav {
        vector: w.iter().map(|v| T::of(v / norm)).collect(),
        heldout_accuracy,
        low_accuracy: heldout_accuracy < cfg.min_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Box-Muller standard normal.
    fn normal(rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let v: f64 = rng.gen();
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }

    fn m(rows: &[[f64; 2]]) -> Matrix<f64> {
        Matrix::from_rows(2, rows.iter().map(|r| r.as_slice())).unwrap()
    }

    #[test]
    fn axis_separated_sets() {
        let c = m(&[[1.0, 0.0], [2.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        let r = m(&[[-1.0, 0.0], [-2.0, 0.0], [-1.0, 0.0], [-2.0, 0.0]]);
        let cav = train_cav(&c, &r, &CavConfig::default(), 1).unwrap();
        assert!(cav.vector[0] > 0.99);
        assert!((cav.vector.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let flipped = train_cav(&r, &c, &CavConfig::default(), 1).unwrap();
        assert!(flipped.vector[0] < -0.99);
    }

    #[test]
    fn hinge_loss_also_separates() {
        let c = m(&[[1.0, 0.5], [2.0, -0.5], [1.5, 0.0], [2.5, 0.2]]);
        let r = m(&[[-1.0, 0.3], [-2.0, -0.1], [-1.5, 0.0], [-2.5, 0.4]]);
        let cfg = CavConfig {
            loss: CavLoss::Hinge,
            ..Default::default()
        };
        assert!(train_cav(&c, &r, &cfg, 3).unwrap().vector[0] > 0.9);
    }

    #[test]
    fn separated_gaussian_blobs() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mut blob = |offset: f64| {
                let rows: Vec<Vec<f64>> = (0..30)
                    .map(|_| {
                        (0..10)
                            .map(|d| normal(&mut rng) + if d == 0 { offset } else { 0.0 })
                            .collect()
                    })
                    .collect();
                Matrix::from_rows(10, rows.iter().map(|r| r.as_slice())).unwrap()
            };
            let (c, r) = (blob(3.0), blob(-3.0));
            let cav = train_cav(&c, &r, &CavConfig::default(), seed).unwrap();
            assert!(
                cav.heldout_accuracy >= 0.95,
                "seed {seed}: {}",
                cav.heldout_accuracy
            );
            assert!(!cav.low_accuracy);
        }
    }

    #[test]
    fn degenerate_and_undersized_inputs() {
        let same = m(&[[1.0, 1.0]; 4]);
        assert!(matches!(
            train_cav(&same, &same, &CavConfig::default(), 0),
            Err(Error::Training(_))
        ));
        let small = m(&[[1.0, 1.0]; 3]);
        assert!(matches!(
            train_cav(&small, &same, &CavConfig::default(), 0),
            Err(Error::Parameter(_))
        ));
    }
}
