//! Candidate concepts: segment patches, their embeddings, k-means clusters
//! and pruning.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{images_to_batch, ModelBackend};
use crate::error::{Error, Result};
use crate::imaging::{apply_mask_fill, bilinear_resize, crop, Rgb, RgbImage};
use crate::mask::{BBox, Rle};
use crate::matrix::Matrix;
use crate::scalar::{squared_distance, Scalar};
use crate::slic::SegmentMask;

/// Fill colour used when no dataset statistics are available.
pub const DEFAULT_FILL: Rgb = [117, 117, 117];

/// Crops the segment's bounding box, paints non-segment pixels with `fill`
/// and resizes the crop to `width x height`.
pub fn prepare_patch(
    img: &RgbImage,
    segment: &SegmentMask,
    width: usize,
    height: usize,
    fill: Rgb,
) -> Result<RgbImage> {
    if segment.area() == 0 {
        return Err(Error::Parameter(
            "cannot prepare a patch from an empty mask".into(),
        ));
    }
    let filled = apply_mask_fill(img, segment.mask(), fill)?;
    bilinear_resize(&crop(&filled, &segment.bbox())?, width, height)
}

/// Rounded per-channel mean over `images`, or [`DEFAULT_FILL`] for none.
pub fn mean_color<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Rgb {
    let mut sums = [0u64; 3];
    let mut pixels = 0u64;
    for img in images {
        let s = img.channel_sums();
        (0..3).for_each(|c| sums[c] += s[c]);
        pixels += (img.width() * img.height()) as u64;
    }
    if pixels == 0 {
        return DEFAULT_FILL;
    }
    sums.map(|s| ((s as f64 / pixels as f64).round()) as u8)
}

/// Runs `backend.activations` over `patches` in batches of `batch_size`.
/// An empty list yields a `0 x 0` matrix.
pub fn embed_patches(
    backend: &dyn ModelBackend,
    patches: &[RgbImage],
    layer: &str,
    batch_size: usize,
) -> Result<Matrix<f32>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut out: Option<Matrix<f32>> = None;
    for chunk in patches.chunks(batch_size) {
        let rows = backend.activations(&images_to_batch(chunk)?, layer)?;
        match out.as_mut() {
            None => out = Some(rows),
            Some(m) => m.append(&rows)?,
        }
    }
    Ok(out.unwrap_or_else(|| Matrix::zeros(0, 0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub min_size: usize,
    pub max_keep: usize,
    /// Minimum fraction of discovery images a concept's members must come from.
    pub min_image_frac: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            min_size: 10,
            max_keep: 40,
            min_image_frac: 0.25,
        }
    }
}

/// A surviving cluster: member patch indices ordered by distance to the
/// k-means centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedCluster<T> {
    pub concept_id: usize,
    /// Index of the k-means cluster this concept came from.
    pub cluster: usize,
    pub members: Vec<(usize, f64)>,
    pub centroid: Vec<T>,
    pub image_coverage: f64,
}

/// Keeps the `max_keep` members nearest each centroid, drops clusters that
/// end up smaller than `min_size` or drawn from too few of the
/// `n_images` discovery images, and numbers the rest by descending size.
pub fn prune_clusters<T: Scalar>(
    assignments: &[usize],
    embeddings: &Matrix<T>,
    centroids: &Matrix<T>,
    source_images: &[usize],
    n_images: usize,
    cfg: &PruneConfig,
) -> Result<Vec<PrunedCluster<T>>> {
    if assignments.len() != embeddings.rows() || source_images.len() != embeddings.rows() {
        return Err(Error::Dimension(
            "assignments, embeddings and sources disagree in length".into(),
        ));
    }
    if n_images == 0 {
        return Err(Error::Parameter("no discovery images".into()));
    }
    let mut out = Vec::new();
    for (j, centroid) in centroids.iter_rows().enumerate() {
        let mut members: Vec<(usize, f64)> = assignments
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == j)
            .map(|(i, _)| {
                (
                    i,
                    squared_distance(embeddings.row(i), centroid)
                        .as_f64()
                        .sqrt(),
                )
            })
            .collect();
        members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let assigned = members.len();
        members.truncate(cfg.max_keep);
        if members.len() < cfg.min_size || members.is_empty() {
            continue;
        }
        let images: BTreeSet<usize> = members.iter().map(|&(i, _)| source_images[i]).collect();
        let image_coverage = images.len() as f64 / n_images as f64;
        if image_coverage < cfg.min_image_frac {
            continue;
        }
        out.push((
            assigned,
            PrunedCluster {
                concept_id: 0,
                cluster: j,
                members,
                centroid: centroid.to_vec(),
                image_coverage,
            },
        ));
    }
    // Kept size first; clusters truncated to max_keep are ordered by how many
    // segments k-means assigned them.
    out.sort_by(|(na, a), (nb, b)| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(nb.cmp(na))
            .then(a.cluster.cmp(&b.cluster))
    });
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(id, (_, c))| PrunedCluster {
            concept_id: id,
            ..c
        })
        .collect())
}

/// A segment of a dataset image as stored in discovery outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRef {
    /// Dataset image index.
    pub image: usize,
    pub path: String,
    pub level: usize,
    pub bbox: BBox,
    pub rle: Rle,
}

impl SegmentRef {
    pub fn from_segment(image: usize, path: &str, seg: &SegmentMask) -> Self {
        Self {
            image,
            path: path.to_string(),
            level: seg.level,
            bbox: seg.bbox(),
            rle: seg.mask().to_rle(),
        }
    }

    pub fn to_segment(&self) -> Result<SegmentMask> {
        SegmentMask::new(
            self.path.clone(),
            self.level,
            crate::mask::Mask::from_rle(&self.rle)?,
        )
    }
}

/// Prepares every segment against its (already loaded) source image.
pub fn prepare_patches(
    images: &(dyn Fn(usize) -> Result<RgbImage> + Sync),
    segments: &[SegmentRef],
    size: [usize; 2],
    fill: Rgb,
) -> Result<Vec<RgbImage>> {
    segments
        .par_iter()
        .map(|s| {
            let seg = s.to_segment()?;
            prepare_patch(&images(s.image)?, &seg, size[1], size[0], fill)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BuiltinBackend;
    use crate::mask::Mask;
    use crate::model::ModelParams;

    fn gradient_image() -> RgbImage {
        let mut img = RgbImage::filled(8, 8, [0, 0, 0]).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                img.put(x, y, [(x * 30) as u8, (y * 30) as u8, 77]);
            }
        }
        img
    }

    #[test]
    fn whole_image_mask_is_a_plain_resize() {
        let img = gradient_image();
        let seg = SegmentMask::new("a", 0, Mask::from_fn(8, 8, |_, _| true)).unwrap();
        let p = prepare_patch(&img, &seg, 16, 16, DEFAULT_FILL).unwrap();
        assert_eq!(p, bilinear_resize(&img, 16, 16).unwrap());
    }

    #[test]
    fn single_pixel_mask_becomes_constant() {
        let img = gradient_image();
        let seg = SegmentMask::new("a", 0, Mask::from_fn(8, 8, |x, y| x == 3 && y == 5)).unwrap();
        let p = prepare_patch(&img, &seg, 16, 16, DEFAULT_FILL).unwrap();
        assert!(p.pixels().chunks(3).all(|c| c == [90, 150, 77]));
    }

    #[test]
    fn outside_of_half_mask_is_fill() {
        // Segment: left half of the top rows plus one pixel on the right, so
        // the crop spans the full width.
        let img = gradient_image();
        let seg = SegmentMask::new(
            "a",
            0,
            Mask::from_fn(8, 8, |x, y| x < 4 || (x == 7 && y == 0)),
        )
        .unwrap();
        let p = prepare_patch(&img, &seg, 8, 8, [117, 117, 117]).unwrap();
        for y in 1..8 {
            for x in 4..8 {
                assert_eq!(p.get(x, y), [117, 117, 117]);
            }
        }
    }

    #[test]
    fn mean_color_of_two_images() {
        let a = RgbImage::filled(2, 2, [10, 20, 30]).unwrap();
        let b = RgbImage::filled(2, 2, [20, 40, 61]).unwrap();
        assert_eq!(mean_color([&a, &b]), [15, 30, 46]);
        assert_eq!(mean_color(std::iter::empty()), DEFAULT_FILL);
    }

    #[test]
    fn embedding_is_batch_invariant() {
        let b = BuiltinBackend::new(ModelParams::he_uniform(2, 1)).unwrap();
        let patches: Vec<RgbImage> = (0..5)
            .map(|i| RgbImage::filled(64, 64, [i * 40, 100, 200 - i * 30]).unwrap())
            .collect();
        let one = embed_patches(&b, &patches, "gap", 1).unwrap();
        let many = embed_patches(&b, &patches, "gap", 64).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.rows(), 5);
        assert_eq!(embed_patches(&b, &[], "gap", 64).unwrap().rows(), 0);
    }

    #[test]
    fn pruning_rules() {
        // Cluster 0: 50 points from 40 images; cluster 1: 5 points;
        // cluster 2: 12 points from one image.
        let mut rows = Vec::new();
        let mut assign = Vec::new();
        let mut src = Vec::new();
        for i in 0..50 {
            rows.push(vec![i as f64, 0.0]);
            assign.push(0);
            src.push(i % 40);
        }
        for i in 0..5 {
            rows.push(vec![100.0 + i as f64, 0.0]);
            assign.push(1);
            src.push(i);
        }
        for i in 0..12 {
            rows.push(vec![-100.0 - i as f64, 0.0]);
            assign.push(2);
            src.push(7);
        }
        let emb = Matrix::from_rows(2, rows.iter().map(|r| r.as_slice())).unwrap();
        let centroids = Matrix::new(3, 2, vec![0.0, 0.0, 100.0, 0.0, -100.0, 0.0]).unwrap();
        let out =
            prune_clusters(&assign, &emb, &centroids, &src, 40, &PruneConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        let c = &out[0];
        assert_eq!(c.members.len(), 40);
        assert_eq!(
            c.members.iter().map(|m| m.0).collect::<Vec<_>>(),
            (0..40).collect::<Vec<_>>()
        );
        assert!(c.members.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(c.image_coverage, 1.0);
    }

    #[test]
    fn truncated_clusters_are_numbered_by_assigned_size() {
        // Clusters of 45, 60 and 12 points: the first two both keep 40.
        let mut rows = Vec::new();
        let mut assign = Vec::new();
        for (j, n) in [45usize, 60, 12].into_iter().enumerate() {
            for i in 0..n {
                rows.push(vec![1000.0 * j as f64 + i as f64, 0.0]);
                assign.push(j);
            }
        }
        let src: Vec<usize> = (0..rows.len()).map(|i| i % 10).collect();
        let emb = Matrix::from_rows(2, rows.iter().map(|r| r.as_slice())).unwrap();
        let centroids = Matrix::new(3, 2, vec![0.0, 0.0, 1000.0, 0.0, 2000.0, 0.0]).unwrap();
        let out =
            prune_clusters(&assign, &emb, &centroids, &src, 10, &PruneConfig::default()).unwrap();
        let order: Vec<(usize, usize, usize)> = out
            .iter()
            .map(|c| (c.concept_id, c.cluster, c.members.len()))
            .collect();
        assert_eq!(order, vec![(0, 1, 40), (1, 0, 40), (2, 2, 12)]);
    }
}
