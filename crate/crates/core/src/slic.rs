//! SLIC superpixels and the multi-resolution segment pool.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{rgb_to_lab, RgbImage};
use crate::mask::{BBox, Mask};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelLabeling {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    label_count: usize,
}

impl SuperpixelLabeling {
    /// Validates that labels are dense: every value in `0..label_count`
    /// occurs at least once.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::Dimension(format!(
                "{width}x{height} labeling needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        let label_count = *labels.iter().max().unwrap() as usize + 1;
        let mut seen = vec![false; label_count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Parameter("labels are not dense".into()));
        }
        Ok(Self {
            width,
            height,
            labels,
            label_count,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.label_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn masks(&self) -> Vec<Mask> {
        let mut masks = vec![Mask::empty(self.width, self.height); self.label_count];
        for (i, &l) in self.labels.iter().enumerate() {
            masks[l as usize].set(i % self.width, i / self.width, true);
        }
        masks
    }

    /// Renumbers labels by first appearance in raster order.
    fn from_sparse(width: usize, height: usize, raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&r| {
                let next = map.len() as u32;
                *map.entry(r).or_insert(next)
            })
            .collect();
        Self {
            width,
            height,
            labels,
            label_count: map.len(),
        }
    }
}

/// One superpixel of one image at one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub image_id: String,
    /// Index into the level list; 0 is the coarsest.
    pub level: usize,
    mask: Mask,
    bbox: BBox,
}

impl SegmentMask {
    pub fn new(image_id: impl Into<String>, level: usize, mask: Mask) -> Result<Self> {
        let bbox = mask
            .bbox()
            .ok_or_else(|| Error::Parameter("segment mask has no pixels".into()))?;
        Ok(Self {
            image_id: image_id.into(),
            level,
            mask,
            bbox,
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn area(&self) -> usize {
        self.mask.count()
    }

    fn jaccard(&self, other: &SegmentMask) -> Result<f64> {
        let (a, b) = (self.bbox, other.bbox);
        if a.x1 <= b.x0 || b.x1 <= a.x0 || a.y1 <= b.y0 || b.y1 <= a.y0 {
            return Ok(0.0);
        }
        self.mask.jaccard(&other.mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Superpixel targets, coarse to fine.
    pub levels: Vec<usize>,
    pub compactness: f64,
    pub max_iter: usize,
    /// Masks overlapping a kept mask by more than this Jaccard index are
    /// dropped; anything above 1 disables deduplication.
    pub dedup_threshold: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            levels: vec![15, 50, 80],
            compactness: 10.0,
            max_iter: 10,
            dedup_threshold: 0.5,
        }
    }
}

/// Grid interval `S = floor(sqrt(W*H / k))`, at least 1.
pub fn grid_step(width: usize, height: usize, k_target: usize) -> usize {
    (((width * height) as f64 / k_target as f64).sqrt().floor() as usize).max(1)
}

/// Default connectivity threshold `S^2 / 4`.
pub fn default_min_size(width: usize, height: usize, k_target: usize) -> usize {
    let s = grid_step(width, height, k_target);
    (s * s / 4).max(1)
}

/// Picks an `nx x ny` seed grid whose cell count is closest to `k`,
/// preferring square cells, then more columns.
fn seed_grid(width: usize, height: usize, k: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_cost = (usize::MAX, f64::INFINITY);
    for nx in 1..=k.min(width) {
        let ny = ((k as f64 / nx as f64).round() as usize).clamp(1, height);
        let count_err = (nx * ny).abs_diff(k);
        let aspect = ((width as f64 / nx as f64) / (height as f64 / ny as f64))
            .ln()
            .abs();
        let cost = (count_err, aspect);
        let better =
            cost.0 < best_cost.0 || (cost.0 == best_cost.0 && cost.1 <= best_cost.1 + 1e-12);
        if better {
            best = (nx, ny);
            best_cost = cost;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// Simple linear iterative clustering over (Lab colour, position).
pub fn slic_segment(
    img: &RgbImage,
    k_target: usize,
    compactness: f64,
    max_iter: usize,
) -> Result<SuperpixelLabeling> {
    let (w, h) = (img.width(), img.height());
    if k_target == 0 || k_target > w * h {
        return Err(Error::Parameter(format!(
            "k_target {k_target} outside 1..={}",
            w * h
        )));
    }
    if !(compactness > 0.0) {
        return Err(Error::Parameter(format!(
            "compactness must be positive, got {compactness}"
        )));
    }
    if k_target == 1 {
        return SuperpixelLabeling::new(w, h, vec![0; w * h]);
    }
    let lab = rgb_to_lab(img);
    let px = |x: usize, y: usize| -> [f64; 3] { lab.get(x, y).map(f64::from) };
    let s = grid_step(w, h, k_target);
    let s_f = s as f64;

    let gradient = |x: usize, y: usize| -> f64 {
        let sq = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        sq(px(xr, y), px(xl, y)) + sq(px(x, yd), px(x, yu))
    };

    let (nx, ny) = seed_grid(w, h, k_target);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let gx = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let gy = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let (mut bx, mut by, mut bg) = (gx, gy, gradient(gx, gy));
            for yy in gy.saturating_sub(1)..=(gy + 1).min(h - 1) {
                for xx in gx.saturating_sub(1)..=(gx + 1).min(w - 1) {
                    let g = gradient(xx, yy);
                    if g < bg {
                        (bx, by, bg) = (xx, yy, g);
                    }
                }
            }
            centers.push(Center {
                lab: px(bx, by),
                x: bx as f64,
                y: by as f64,
            });
        }
    }

    let spatial = (compactness / s_f).powi(2);
    let dist2 = |c: &Center, x: usize, y: usize| -> f64 {
        let p = px(x, y);
        let dlab = (0..3).map(|i| (p[i] - c.lab[i]).powi(2)).sum::<f64>();
        let dxy = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
        dlab + dxy * spatial
    };

    let mut labels = vec![usize::MAX; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    for _ in 0..max_iter.max(1) {
        labels.fill(usize::MAX);
        best.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let (cx, cy) = (c.x.round() as isize, c.y.round() as isize);
            let x0 = (cx - s as isize).max(0) as usize;
            let x1 = ((cx + s as isize) as usize).min(w);
            let y0 = (cy - s as isize).max(0) as usize;
            let y1 = ((cy + s as isize) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = dist2(c, x, y);
                    let i = y * w + x;
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = ci;
                    }
                }
            }
        }
        // Pixels outside every search window go to the globally nearest centre.
        for i in 0..w * h {
            if labels[i] == usize::MAX {
                let (x, y) = (i % w, i / w);
                let (ci, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(ci, c)| (ci, dist2(c, x, y)))
                    .fold(
                        (0, f64::INFINITY),
                        |acc, v| if v.1 < acc.1 { v } else { acc },
                    );
                labels[i] = ci;
            }
        }

        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for i in 0..w * h {
            let (x, y) = (i % w, i / w);
            let p = px(x, y);
            let acc = &mut sums[labels[i]];
            acc[0] += p[0];
            acc[1] += p[1];
            acc[2] += p[2];
            acc[3] += x as f64;
            acc[4] += y as f64;
            acc[5] += 1.0;
        }
        let mut moved = 0.0;
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] == 0.0 {
                continue;
            }
            let n = acc[5];
            let (nx_, ny_) = (acc[3] / n, acc[4] / n);
            moved += (nx_ - c.x).abs() + (ny_ - c.y).abs();
            *c = Center {
                lab: [acc[0] / n, acc[1] / n, acc[2] / n],
                x: nx_,
                y: ny_,
            };
        }
        if moved < 1.0 {
            break;
        }
    }
    Ok(SuperpixelLabeling::from_sparse(w, h, &labels))
}

/// Splits every label into 4-connected components and merges components
/// smaller than `min_size` into their largest neighbour. Labels are
/// renumbered densely in raster order.
pub fn enforce_connectivity(labeling: &SuperpixelLabeling, min_size: usize) -> SuperpixelLabeling {
    let (w, h) = (labeling.width, labeling.height);
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let label = labeling.labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labeling.labels[j] == label {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }

    let count = sizes.len();
    let mut adj = vec![BTreeSet::new(); count];
    for i in 0..n {
        let (x, y) = (i % w, i / w);
        if x + 1 < w && comp[i] != comp[i + 1] {
            adj[comp[i]].insert(comp[i + 1]);
            adj[comp[i + 1]].insert(comp[i]);
        }
        if y + 1 < h && comp[i] != comp[i + w] {
            adj[comp[i]].insert(comp[i + w]);
            adj[comp[i + w]].insert(comp[i]);
        }
    }

    // Union-find over components; roots carry group size and adjacency.
    let mut parent: Vec<usize> = (0..count).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    loop {
        let mut changed = false;
        for id in 0..count {
            if parent[id] != id || sizes[id] >= min_size || adj[id].is_empty() {
                continue;
            }
            let target = adj[id]
                .iter()
                .copied()
                .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
                .expect("non-empty adjacency");
            parent[id] = target;
            sizes[target] += sizes[id];
            let moved = std::mem::take(&mut adj[id]);
            for nb in moved {
                adj[nb].remove(&id);
                if nb != target {
                    adj[nb].insert(target);
                    adj[target].insert(nb);
                }
            }
            changed = true;
        }
        if !changed {
            break;
        }
    }
    let roots: Vec<usize> = comp.iter().map(|&c| find(&mut parent, c)).collect();
    SuperpixelLabeling::from_sparse(w, h, &roots)
}

/// SLIC + connectivity at each level; every region becomes one mask.
pub fn multiresolution_segments(
    img: &RgbImage,
    image_id: &str,
    cfg: &SegmentationConfig,
) -> Result<Vec<SegmentMask>> {
    if cfg.levels.is_empty() {
        return Err(Error::Parameter(
            "at least one segmentation level is required".into(),
        ));
    }
    let mut out = Vec::new();
    for (level, &k) in cfg.levels.iter().enumerate() {
        let raw = slic_segment(img, k, cfg.compactness, cfg.max_iter)?;
        let min_size = default_min_size(img.width(), img.height(), k);
        let labeling = enforce_connectivity(&raw, min_size);
        for mask in labeling.masks() {
            out.push(SegmentMask::new(image_id, level, mask)?);
        }
    }
    Ok(out)
}

/// Greedy Jaccard deduplication, scanning from the finest level to the
/// coarsest and, within a level, in input order.
pub fn deduplicate_segments(
    segs: Vec<SegmentMask>,
    jaccard_threshold: f64,
) -> Result<Vec<SegmentMask>> {
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| segs[b].level.cmp(&segs[a].level).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut keep = true;
        for &k in &kept {
            if segs[i].jaccard(&segs[k])? > jaccard_threshold {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(i);
        }
    }
    let mut slots: Vec<Option<SegmentMask>> = segs.into_iter().map(Some).collect();
    Ok(kept.into_iter().map(|i| slots[i].take().unwrap()).collect())
}
