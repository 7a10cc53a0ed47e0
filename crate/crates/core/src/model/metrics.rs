use serde::{Deserialize, Serialize};

use super::{ModelParams, Prepared};
use crate::error::{Error, Result};
use crate::model::LabeledImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub per_class: Vec<PerClassMetrics>,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// Set when some precision, recall or F1 had a zero denominator and was
    /// reported as 0.
    pub zero_denominator: bool,
}

impl ClassMetrics {
    pub fn from_predictions(
        num_classes: usize,
        truth: &[usize],
        predicted: &[usize],
    ) -> Result<Self> {
        if truth.is_empty() || truth.len() != predicted.len() {
            return Err(Error::Parameter(
                "metrics need equally long, non-empty truth and prediction lists".into(),
            ));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Parameter(format!(
                    "class index out of range ({t}, {p})"
                )));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let mut zero_denominator = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                zero_denominator = true;
                0.0
            } else {
                num / den
            }
        };
        let per_class = (0..num_classes)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let support: usize = confusion[c].iter().sum();
                let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
                let precision = ratio(tp, predicted_c as f64);
                let recall = ratio(tp, support as f64);
                let f1 = ratio(2.0 * precision * recall, precision + recall);
                PerClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        Ok(Self {
            accuracy: correct as f64 / truth.len() as f64,
            per_class,
            confusion,
            zero_denominator,
        })
    }
}

/// Argmax predictions over `data`, summarised per class.
pub fn evaluate(params: &ModelParams, data: &[LabeledImage]) -> Result<ClassMetrics> {
    use rayon::prelude::*;
    let prepared = Prepared::new(params);
    let predicted: Vec<usize> = data
        .par_iter()
        .map(|s| {
            prepared
                .forward(&s.image.to_unit_f32())
                .map(|fp| fp.predicted_class())
        })
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = data.iter().map(|s| s.label).collect();
    ClassMetrics::from_predictions(params.num_classes(), &truth, &predicted)
}
