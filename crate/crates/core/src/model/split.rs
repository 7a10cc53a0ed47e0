use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Indices into the labelled item list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    /// Training and validation together, in split order.
    pub fn train_val(&self) -> Vec<usize> {
        self.train.iter().chain(&self.validation).copied().collect()
    }
}

/// Stratified 80/20 (train+val / test) then 80/20 (train / val) split.
///
/// Per class of `n` items: `test = max(1, floor(n/5))`,
/// `val = max(1, floor((n - test)/5))`, the rest is training. Each class is
/// shuffled with its own seeded stream; output lists are ordered by class
/// and then by shuffled position.
pub fn split_indices(labels: &[usize], seed: u64) -> Result<DataSplit> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = DataSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 5 {
            return Err(Error::Split(format!(
                "class {c} has {} items; at least 5 are needed",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64]));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let test = (n / 5).max(1);
        let val = ((n - test) / 5).max(1);
        out.test.extend_from_slice(&idx[..test]);
        out.validation.extend_from_slice(&idx[test..test + val]);
        out.train.extend_from_slice(&idx[test + val..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_items_split_64_16_20() {
        let s = split_indices(&[0; 100], 1).unwrap();
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (64, 16, 20)
        );
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn five_items_split_3_1_1() {
        let s = split_indices(&[0; 5], 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (3, 1, 1));
        assert!(matches!(split_indices(&[0; 4], 1), Err(Error::Split(_))));
    }

    #[test]
    fn stratified_and_deterministic() {
        let labels: Vec<usize> = (0..250).map(|i| i % 2).collect();
        let a = split_indices(&labels, 9).unwrap();
        assert_eq!(a, split_indices(&labels, 9).unwrap());
        assert_ne!(a, split_indices(&labels, 10).unwrap());
        for c in 0..2 {
            assert_eq!(a.test.iter().filter(|&&i| labels[i] == c).count(), 25);
        }
    }
}
