//! Lloyd's k-means with k-means++ seeding and seeded restarts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{squared_distance, Scalar};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 25,
            max_iter: 100,
            restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub assignments: Vec<usize>,
    pub centroids: Matrix<T>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after every assignment step of the winning run.
    pub history: Vec<f64>,
}

fn nearest<T: Scalar>(p: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus<T: Scalar>(points: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let n = points.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, points.row(chosen[0])).as_f64())
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // Every point coincides with a centre; any unused index will do.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter_rows().enumerate() {
            let d = squared_distance(p, points.row(next)).as_f64();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    points.select_rows(&chosen)
}

fn update_centroids<T: Scalar>(
    points: &Matrix<T>,
    assignments: &mut [usize],
    centroids: &mut Matrix<T>,
) {
    let (k, d) = (centroids.rows(), points.cols());
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter_rows().zip(assignments.iter()) {
        counts[a] += 1;
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(p) {
            *s += v.as_f64();
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centroids
                .row_mut(j)
                .iter_mut()
                .zip(&sums[j * d..(j + 1) * d])
            {
                *c = T::of(s * inv);
            }
        }
    }
    // Empty clusters seize the point farthest from its own centroid, taken
    // from a cluster that keeps at least one member.
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, T)> = None;
        for (i, p) in points.iter_rows().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let dist = squared_distance(p, centroids.row(a));
            if best.is_none_or(|(_, bd)| dist > bd) {
                best = Some((i, dist));
            }
        }
        if let Some((i, _)) = best {
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
            centroids.row_mut(j).copy_from_slice(points.row(i));
        }
    }
}

fn inertia<T: Scalar>(points: &Matrix<T>, assignments: &[usize], centroids: &Matrix<T>) -> f64 {
    points
        .iter_rows()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, centroids.row(a)).as_f64())
        .sum()
}

fn check<T: Scalar>(points: &Matrix<T>, k: usize) -> Result<()> {
    if k == 0 || points.rows() < k {
        return Err(Error::Parameter(format!(
            "k-means needs 1 <= k <= N, got k = {k} with N = {}",
            points.rows()
        )));
    }
    Ok(())
}

/// One seeded k-means++ / Lloyd run.
pub fn kmeans_single<T: Scalar>(
    points: &Matrix<T>,
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<KMeansResult<T>> {
    check(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.rows()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, p) in points.iter_rows().enumerate() {
            let (j, _) = nearest(p, &centroids);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        history.push(inertia(points, &assignments, &centroids));
        if !changed {
            break;
        }
        update_centroids(points, &mut assignments, &mut centroids);
    }
    let inertia = inertia(points, &assignments, &centroids);
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        history,
    })
}

/// Seed used by restart `r` of [`kmeans`].
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    derive_seed(seed, &[restart as u64])
}

/// Best of `cfg.restarts` runs by inertia; ties go to the earlier restart.
pub fn kmeans<T: Scalar>(points: &Matrix<T>, cfg: &KMeansConfig) -> Result<KMeansResult<T>> {
    check(points, cfg.k)?;
    let runs: Vec<KMeansResult<T>> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| kmeans_single(points, cfg.k, cfg.max_iter, restart_seed(cfg.seed, r)))
        .collect::<Result<_>>()?;
    let mut best: Option<KMeansResult<T>> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Matrix<f64> {
        Matrix::from_rows(2, rows.iter().map(|r| r.as_slice())).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let m = pts(&[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]]);
        let r = kmeans(
            &m,
            &KMeansConfig {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.centroids.row(0)[0] - 1.0).abs() < 1e-12);
        assert!((r.centroids.row(0)[1] - 1.0).abs() < 1e-12);
        // Total variance times N: (1 + 1 + 0) + (1 + 1 + 4).
        assert!((r.inertia - 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_obvious_groups() {
        let m = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        let r = kmeans(
            &m,
            &KMeansConfig {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        let mut cs: Vec<Vec<f64>> = r.centroids.iter_rows().map(|c| c.to_vec()).collect();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_k_above_n() {
        let m = pts(&[[0.0, 0.0]]);
        assert!(kmeans(
            &m,
            &KMeansConfig {
                k: 2,
                ..Default::default()
            }
        )
        .is_err());
        assert!(kmeans(
            &m,
            &KMeansConfig {
                k: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn no_empty_clusters_with_duplicates() {
        let m = pts(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [5.0, 5.0]]);
        let r = kmeans_single(&m, 3, 100, 3).unwrap();
        for j in 0..3 {
            assert!(r.assignments.contains(&j));
        }
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn f32_and_f64_agree_on_well_separated_data() {
        let rows: Vec<[f64; 2]> = (0..30)
            .map(|i| {
                [
                    (i % 3) as f64 * 20.0 + (i as f64 * 0.37).sin(),
                    (i as f64 * 0.91).cos(),
                ]
            })
            .collect();
        let m64 = pts(&rows);
        let m32 = m64.map(|v| v as f32);
        let cfg = KMeansConfig {
            k: 3,
            seed: 4,
            ..Default::default()
        };
        assert_eq!(
            kmeans(&m64, &cfg).unwrap().assignments,
            kmeans(&m32, &cfg).unwrap().assignments
        );
    }
}
