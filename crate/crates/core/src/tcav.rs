//! Directional derivatives, TCAV scores and the random-baseline
//! significance test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cav::{train_cav, CavConfig, MIN_SIDE};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{dot_f64, Scalar};
use crate::seed::derive_seed;
use crate::stats::welch_ttest;

/// Sensitivity of the class logit to moving the activations along `cav`.
pub fn directional_derivative<T: Scalar>(gradient: &[T], cav: &[T]) -> Result<f64> {
    if gradient.len() != cav.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} values, CAV has {}",
            gradient.len(),
            cav.len()
        )));
    }
    Ok(dot_f64(gradient, cav))
}

/// Fraction of gradient rows with a strictly positive directional derivative.
pub fn tcav_score<T: Scalar>(gradients: &Matrix<T>, cav: &[T]) -> Result<f64> {
    if gradients.rows() == 0 {
        return Err(Error::Parameter(
            "TCAV needs at least one evaluation image".into(),
        ));
    }
    let mut positive = 0usize;
    for g in gradients.iter_rows() {
        if directional_derivative(g, cav)? > 0.0 {
            positive += 1;
        }
    }
    Ok(positive as f64 / gradients.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignificanceConfig {
    pub n_runs: usize,
    pub alpha: f64,
    /// Number of concepts tested for the class (Bonferroni divisor).
    pub n_concepts: usize,
    /// Counterexamples per CAV run.
    pub random_set_size: usize,
    pub cav: CavConfig,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        Self {
            n_runs: 20,
            alpha: 0.05,
            n_concepts: 1,
            random_set_size: 20,
            cav: CavConfig::default(),
        }
    }
}

impl SignificanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 2 {
            return Err(Error::Parameter(format!(
                "n_runs must be at least 2 for the t-test, got {}",
                self.n_runs
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter("alpha must lie in (0, 1)".into()));
        }
        if self.n_concepts == 0 {
            return Err(Error::Parameter("n_concepts must be at least 1".into()));
        }
        if self.random_set_size < MIN_SIDE {
            return Err(Error::Parameter(format!(
                "random_set_size must be at least {MIN_SIDE}"
            )));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.alpha / self.n_concepts as f64
    }
}

/// One CAV training run and the TCAV score it produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub score: f64,
    pub heldout_accuracy: f64,
    pub low_accuracy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    pub concept_id: usize,
    pub class: usize,
    pub scores: Vec<f64>,
    pub cav_accuracies: Vec<f64>,
    /// Runs whose CAV fell below the accuracy floor (kept, not discarded).
    pub low_accuracy_runs: usize,
    pub mean: f64,
    pub std: f64,
    pub random_scores: Vec<f64>,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub threshold: f64,
    pub significant: bool,
}

/// Disjoint counterexample index blocks, one per run.
pub fn counterexample_blocks(
    pool_size: usize,
    cfg: &SignificanceConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let needed = cfg.n_runs * cfg.random_set_size;
    if pool_size < needed {
        return Err(Error::Parameter(format!(
            "random pool has {pool_size} segments; {needed} are required \
             ({} runs x {} counterexamples)",
            cfg.n_runs, cfg.random_set_size
        )));
    }
    let mut idx: Vec<usize> = (0..pool_size).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])));
    Ok(idx
        .chunks(cfg.random_set_size)
        .take(cfg.n_runs)
        .map(<[usize]>::to_vec)
        .collect())
}

fn run_score<T: Scalar>(
    pos: &Matrix<T>,
    neg: &Matrix<T>,
    grads: &Matrix<T>,
    cfg: &CavConfig,
    seed: u64,
) -> Result<RunScore> {
    if pos.cols() != grads.cols() {
        return Err(Error::Dimension(format!(
            "embeddings have {} columns, gradients {}",
            pos.cols(),
            grads.cols()
        )));
    }
    let cav = train_cav(pos, neg, cfg, seed)?;
    Ok(RunScore {
        score: tcav_score(grads, &cav.vector)?,
        heldout_accuracy: cav.heldout_accuracy,
        low_accuracy: cav.low_accuracy,
    })
}

/// Concept-vs-counterexample runs; run `r` uses block `r`.
pub fn concept_runs<T: Scalar>(
    concept: &Matrix<T>,
    random_pool: &Matrix<T>,
    eval_gradients: &Matrix<T>,
    cfg: &SignificanceConfig,
    seed: u64,
) -> Result<Vec<RunScore>> {
    let blocks = counterexample_blocks(random_pool.rows(), cfg, seed)?;
    blocks
        .par_iter()
        .enumerate()
        .map(|(r, block)| {
            let neg = random_pool.select_rows(block);
            run_score(
                concept,
                &neg,
                eval_gradients,
                &cfg.cav,
                derive_seed(seed, &[1, r as u64]),
            )
        })
        .collect()
}

/// Random-vs-random runs: block `r` against `positive_size` other pool rows.
/// Depends on the concept only through its size, so callers may share it.
pub fn baseline_runs<T: Scalar>(
    random_pool: &Matrix<T>,
    eval_gradients: &Matrix<T>,
    positive_size: usize,
    cfg: &SignificanceConfig,
    seed: u64,
) -> Result<Vec<RunScore>> {
    let blocks = counterexample_blocks(random_pool.rows(), cfg, seed)?;
    if random_pool.rows() < positive_size + cfg.random_set_size {
        return Err(Error::Parameter(format!(
            "random pool has {} segments; {} are required for the random baseline",
            random_pool.rows(),
            positive_size + cfg.random_set_size
        )));
    }
    blocks
        .par_iter()
        .enumerate()
        .map(|(r, block)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, positive_size as u64, r as u64]));
            let mut rest: Vec<usize> = (0..random_pool.rows())
                .filter(|i| !block.contains(i))
                .collect();
            rest.shuffle(&mut rng);
            rest.truncate(positive_size);
            let pos = random_pool.select_rows(&rest);
            let neg = random_pool.select_rows(block);
            run_score(
                &pos,
                &neg,
                eval_gradients,
                &cfg.cav,
                derive_seed(seed, &[3, positive_size as u64, r as u64]),
            )
        })
        .collect()
}

/// Combines concept and baseline runs into a Welch-tested result.
pub fn assemble_result(
    concept_id: usize,
    class: usize,
    runs: &[RunScore],
    baseline: &[RunScore],
    cfg: &SignificanceConfig,
) -> Result<TcavResult> {
    let scores: Vec<f64> = runs.iter().map(|r| r.score).collect();
    let random_scores: Vec<f64> = baseline.iter().map(|r| r.score).collect();
    let test = welch_ttest(&scores, &random_scores)?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let threshold = cfg.threshold();
    Ok(TcavResult {
        concept_id,
        class,
        cav_accuracies: runs.iter().map(|r| r.heldout_accuracy).collect(),
        low_accuracy_runs: runs.iter().filter(|r| r.low_accuracy).count(),
        scores,
        mean,
        std,
        random_scores,
        t: test.t,
        df: test.df,
        p_value: test.p,
        threshold,
        significant: test.p < threshold,
    })
}

/// Full significance procedure for one concept against class `class`.
pub fn concept_significance<T: Scalar>(
    concept_id: usize,
    class: usize,
    concept: &Matrix<T>,
    random_pool: &Matrix<T>,
    eval_gradients: &Matrix<T>,
    cfg: &SignificanceConfig,
    seed: u64,
) -> Result<TcavResult> {
    let runs = concept_runs(concept, random_pool, eval_gradients, cfg, seed)?;
    let baseline = baseline_runs(random_pool, eval_gradients, concept.rows(), cfg, seed)?;
    assemble_result(concept_id, class, &runs, &baseline, cfg)
}
