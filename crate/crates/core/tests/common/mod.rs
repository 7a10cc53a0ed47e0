//! Independent reference implementations used only by the tests.
#![allow(dead_code)]
// Reference values are frozen at full printed precision.
#![allow(clippy::excessive_precision)]

use ace_core::dataset::Dataset;
use ace_core::mask::Mask;
use ace_core::model::{ConvLayer, DenseLayer, LayerSelector, ModelParams};
use ace_core::report::MemberRecord;

// ---------------------------------------------------------------------------
// Plain f64 CNN, written from the architecture description rather than from
// the library kernels.

/// 3x3 convolution, zero padding 1, HWC layout, weights `[cout][ky][kx][cin]`.
pub fn conv3x3(input: &[f64], h: usize, w: usize, layer: &ConvLayer) -> Vec<f64> {
    let (cin, cout) = (layer.cin, layer.cout);
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            for o in 0..cout {
                let mut acc = f64::from(layer.bias[o]);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let base = (sy as usize * w + sx as usize) * cin;
                        for c in 0..cin {
                            let wt = layer.weights[((o * 3 + ky) * 3 + kx) * cin + c];
                            acc += f64::from(wt) * input[base + c];
                        }
                    }
                }
                out[(y * w + x) * cout + o] = acc;
            }
        }
    }
    out
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2.
pub fn maxpool(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let v = input[((2 * y + dy) * w + 2 * x + dx) * c + ch];
                    let o = &mut out[(y * ow + x) * c + ch];
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    out
}

pub fn dense(layer: &DenseLayer, x: &[f64]) -> Vec<f64> {
    (0..layer.outputs)
        .map(|k| {
            f64::from(layer.bias[k])
                + (0..layer.inputs)
                    .map(|j| f64::from(layer.weights[k * layer.inputs + j]) * x[j])
                    .sum::<f64>()
        })
        .collect()
}

fn gap(p3: &[f64], c: usize) -> Vec<f64> {
    let cells = p3.len() / c;
    (0..c)
        .map(|ch| (0..cells).map(|i| p3[i * c + ch]).sum::<f64>() / cells as f64)
        .collect()
}

/// Logits as a function of the activation at `layer`.
pub fn logits_from(params: &ModelParams, layer: LayerSelector, act: &[f64]) -> Vec<f64> {
    let g = match layer {
        LayerSelector::Gap => act.to_vec(),
        LayerSelector::Conv3 => gap(&maxpool(act, 16, 16, 32), 32),
        LayerSelector::Conv2 => {
            let p2 = maxpool(act, 32, 32, 16);
            let mut r3 = conv3x3(&p2, 16, 16, &params.conv3);
            relu(&mut r3);
            gap(&maxpool(&r3, 16, 16, 32), 32)
        }
    };
    dense(&params.dense, &g)
}

pub struct NaivePass {
    pub r2: Vec<f64>,
    pub r3: Vec<f64>,
    pub gap: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn naive_forward(params: &ModelParams, img: &[f32]) -> NaivePass {
    let x: Vec<f64> = img.iter().map(|&v| f64::from(v)).collect();
    let mut r1 = conv3x3(&x, 64, 64, &params.conv1);
    relu(&mut r1);
    let p1 = maxpool(&r1, 64, 64, 8);
    let mut r2 = conv3x3(&p1, 32, 32, &params.conv2);
    relu(&mut r2);
    let p2 = maxpool(&r2, 32, 32, 16);
    let mut r3 = conv3x3(&p2, 16, 16, &params.conv3);
    relu(&mut r3);
    let g = gap(&maxpool(&r3, 16, 16, 32), 32);
    let logits = dense(&params.dense, &g);
    NaivePass {
        r2,
        r3,
        gap: g,
        logits,
    }
}

/// Central difference of logit `class` along coordinate `i` of the layer
/// activation, or `None` when the one-sided slopes disagree (a ReLU or
/// max-pool switch lies within `eps`).
pub fn central_difference(
    params: &ModelParams,
    layer: LayerSelector,
    act: &[f64],
    class: usize,
    i: usize,
    eps: f64,
) -> Option<f64> {
    let f = |v: f64| {
        let mut a = act.to_vec();
        a[i] = v;
        logits_from(params, layer, &a)[class]
    };
    let (lo, mid, hi) = (f(act[i] - eps), f(act[i]), f(act[i] + eps));
    let (left, right) = ((mid - lo) / eps, (hi - mid) / eps);
    // Within one linear piece the two slopes agree to rounding (~1e-13).
    if (left - right).abs() > 1e-9 + 1e-6 * left.abs().max(right.abs()) {
        return None;
    }
    Some((hi - lo) / (2.0 * eps))
}

// ---------------------------------------------------------------------------
// Exhaustive k-means.

/// Minimum within-cluster sum of squares over every partition of `points`
/// into exactly `k` non-empty groups.
pub fn optimal_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    fn cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let d = points[0].len();
        let mut total = 0.0;
        for j in 0..k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == j)
                .map(|(p, _)| p)
                .collect();
            let n = members.len() as f64;
            let mean: Vec<f64> = (0..d)
                .map(|c| members.iter().map(|p| p[c]).sum::<f64>() / n)
                .collect();
            total += members
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&mean)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>();
        }
        total
    }
    // Restricted growth strings enumerate each set partition exactly once.
    fn walk(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        if labels.len() == points.len() {
            if used == k {
                *best = best.min(cost(points, labels, k));
            }
            return;
        }
        let remaining = points.len() - labels.len();
        if used + remaining < k {
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels.push(l);
            walk(points, k, labels, used.max(l + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    walk(points, k, &mut Vec::new(), 0, &mut best);
    best
}

// ---------------------------------------------------------------------------
// Superpixel checks.

/// Number of 4-connected components of the pixels carrying `label`.
pub fn components(labels: &[u32], w: usize, h: usize, label: u32) -> usize {
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if labels[start] != label || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut nbrs = Vec::with_capacity(4);
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < w {
                nbrs.push(p + 1);
            }
            if y > 0 {
                nbrs.push(p - w);
            }
            if y + 1 < h {
                nbrs.push(p + w);
            }
            for q in nbrs {
                if labels[q] == label && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}

// ---------------------------------------------------------------------------
// Ground-truth overlap of discovered segments.

#[derive(Debug, Clone, Copy)]
pub struct Overlap {
    pub spot: f64,
    pub background: f64,
    pub shadow: f64,
}

fn fraction(seg: &Mask, truth: Option<&Mask>) -> f64 {
    let Some(t) = truth else { return 0.0 };
    let hits = seg
        .bits()
        .iter()
        .zip(t.bits())
        .filter(|(a, b)| **a && **b)
        .count();
    hits as f64 / seg.count() as f64
}

pub fn overlap(ds: &Dataset, member: &MemberRecord) -> Overlap {
    let seg = Mask::from_rle(&member.segment.rle).expect("member mask");
    let i = member.segment.image;
    let leaf = ds
        .leaf_mask(i)
        .unwrap()
        .expect("synthetic data records the leaf");
    let spots = ds.spot_mask(i).unwrap();
    let shadow = ds.shadow_mask(i).unwrap();
    Overlap {
        spot: fraction(&seg, spots.as_ref()),
        background: 1.0 - fraction(&seg, Some(&leaf)),
        shadow: fraction(&seg, shadow.as_ref()),
    }
}

/// Fraction of `members` satisfying `pred`.
pub fn share(ds: &Dataset, members: &[MemberRecord], pred: impl Fn(Overlap) -> bool) -> f64 {
    members.iter().filter(|m| pred(overlap(ds, m))).count() as f64 / members.len() as f64
}

// ---------------------------------------------------------------------------
// Welch t-test reference values.

/// `(a, b, t, df, p)`.
pub type WelchCase = (&'static [f64], &'static [f64], f64, f64, f64);

/// Reference values from 50-digit arithmetic.
pub const WELCH_CASES: [WelchCase; 20] = [
    (
        &[1.0, 2.0, 3.0, 4.0, 5.0],
        &[2.0, 4.0, 6.0, 8.0, 10.0],
        -1.8973665961010276,
        5.8823529411764706,
        0.10753119493062724,
    ),
    (
        &[0.2, 0.4, 0.1, 0.3],
        &[0.25, 0.45, 0.15, 0.35, 0.3],
        -0.61237243569579452,
        6.047244094488189,
        0.56259505207887926,
    ),
    (
        &[10.0, 10.5, 9.5, 10.2, 9.8, 10.1],
        &[12.0, 11.0, 13.5, 12.2],
        -4.0531138390296917,
        3.45090795567042,
        0.020675201621649024,
    ),
    (
        &[1.0, 1.0, 1.0, 0.0],
        &[0.0, 0.0, 1.0, 0.0, 0.0],
        1.7179113807746667,
        6.1725826193390453,
        0.13523205557263342,
    ),
    (
        &[0.9, 0.95, 1.0, 0.85, 0.9, 1.0, 0.95],
        &[0.4, 0.6, 0.3, 0.5, 0.7, 0.45, 0.55, 0.5],
        9.0515344129798125,
        10.039489843054632,
        3.8229350112164631e-6,
    ),
    (
        &[-2.02, -1.124, 0.373, 1.312, 1.401, 2.238],
        &[
            2.304, 1.698, 1.41, 1.373, 1.525, 1.224, 1.485, 1.552, 1.331, 2.005, 1.438, 1.403,
            1.389, 1.819, 1.637, 1.8, 1.345, 1.438, 1.981, 1.786, 0.98, 1.697, 1.854, 1.891, 1.797,
        ],
        -1.85415245021799,
        5.0765339751896704,
        0.12201257526654397,
    ),
    (
        &[-0.189, 2.035, 2.112, 1.711, -0.487, 0.434],
        &[2.332, 2.031, 2.331, 3.636],
        -2.7720266136246155,
        7.9956904162979328,
        0.024233327744298168,
    ),
    (
        &[-3.027, -1.427, -2.83, -0.791],
        &[
            -2.211, -0.593, 0.908, -2.67, 0.308, 0.658, 0.669, -4.096, -3.392, -1.129, 0.54,
            -2.032, -2.13,
        ],
        -1.1828708574961181,
        8.1320792582902513,
        0.27028690042961756,
    ),
    (
        &[
            2.75, -0.656, -1.629, -2.217, 2.524, 1.302, 1.562, -1.144, -2.91, -0.968, 0.468,
            -1.465, 0.966, -0.198, -2.936, 2.274, 1.704,
        ],
        &[-1.895, -0.284, -2.469, -3.152],
        2.5093102117660445,
        6.8781987390786946,
        0.041015871437180423,
    ),
    (
        &[
            -0.719, 2.162, 0.03, -0.761, -1.414, 2.584, 2.2, 0.118, -1.024, -0.072, -0.372, 3.299,
            -0.546, 0.98, 0.622, 0.838, -2.617, -0.455, 3.262, -0.25, 2.112,
        ],
        &[
            -1.995, -3.568, -3.396, -6.024, -3.894, -4.596, -2.904, -3.322, -3.019, -3.121, -1.988,
            -1.811, -2.935, -4.031, -1.609, -4.046, -4.985, -2.366, -3.432, -2.469,
        ],
        8.7224163021496763,
        35.913486605838393,
        2.1403580472993505e-10,
    ),
    (
        &[
            -0.478, 1.004, 5.123, 1.128, -1.261, 0.011, -1.681, 0.549, 2.306, 1.827, 2.445, 0.014,
            -0.916, -0.413, 0.903, 0.165, 2.225,
        ],
        &[
            -0.117, 4.457, -0.672, 1.363, 0.338, 4.906, 1.695, 2.003, 2.975, 3.932, -1.512, 1.389,
            -0.396, 2.311, -3.273, 0.897, 3.513, -0.145, 3.311, 0.692, 1.159,
        ],
        -1.0090177947792135,
        35.992028358407977,
        0.31970174264940667,
    ),
    (
        &[
            -1.386, 1.328, -2.237, 0.275, 0.441, -1.645, 1.702, -0.609, 0.415, -1.744, 4.249,
            -5.72, -0.552,
        ],
        &[4.522, 4.281, 4.117, 4.262],
        -7.1444485071206032,
        12.383886477296564,
        9.8667172652789139e-6,
    ),
    (
        &[0.18, 0.798, 1.891, -0.547, 0.256, -0.872, 0.226],
        &[
            1.557, 1.487, 3.286, 2.111, 1.753, 1.396, 1.43, 2.447, 1.651, 3.03, 1.599, 2.418,
            2.961, 1.648, 1.33, 2.676, 2.444, 2.101, 2.492, 2.249, 1.75, 1.993, 1.755, 1.889,
        ],
        -4.963663883916983,
        7.3771826991981235,
        0.0013988584548560899,
    ),
    (
        &[
            1.8, -1.037, -2.348, -0.807, -0.633, 0.832, 0.059, 1.07, -3.527, 0.153, -0.38, -0.229,
            -0.593, -0.083, 1.003, 1.118, -0.94, -3.169, -2.514, -0.151, -0.494,
        ],
        &[-0.374, -0.142],
        -0.78848768178141488,
        18.599928750495991,
        0.44034610250091663,
    ),
    (
        &[
            0.725, 1.12, 0.105, 0.62, 0.147, -0.157, 1.227, -0.337, 0.369, 0.899, 0.681,
        ],
        &[
            -1.395, -1.604, -0.164, -0.761, -1.885, -1.355, -2.267, -1.705,
        ],
        6.7306097692438057,
        12.70151948273862,
        1.5785755077957317e-5,
    ),
    (
        &[
            -0.593, -0.351, 0.667, -1.299, -0.393, -0.779, -0.765, -0.796, -0.769, -1.034, -0.856,
            -0.758, -0.442,
        ],
        &[5.708, 4.728, 1.725, 5.58, 1.182, 8.803],
        -4.5280195385608747,
        5.1269281252576614,
        0.0058682145774743179,
    ),
    (
        &[
            -0.793, -2.859, -2.146, -2.204, -0.622, -1.765, 0.539, 2.43, -4.015, 0.088, -1.509,
            -3.303, 1.361, -2.945, -2.035, -5.719, 4.045, -3.295, 2.006, -2.253, -2.15,
        ],
        &[-1.115, -2.235, -0.767, -1.585],
        0.22032384586051342,
        19.329950627491643,
        0.82792922594253719,
    ),
    (
        &[
            1.285, 0.843, -0.005, 1.079, -0.014, 0.389, 1.17, -0.237, 0.656, 0.539, 0.508, 1.804,
            0.627, 0.82, 0.312, -0.416, 0.553, 0.115, 0.013, 0.841, 0.884,
        ],
        &[
            -0.162, 0.912, -2.267, 3.414, 2.183, 1.311, 0.896, -1.572, -0.91, 1.99, -2.838,
        ],
        0.47741092007068734,
        10.788612183504414,
        0.64259462118964432,
    ),
    (
        &[
            1.548, 1.585, 3.373, -0.331, -1.662, 0.154, 0.398, -0.053, 1.001, 4.298, 2.688, 1.576,
            -2.144, 3.046, 0.727, 2.775, 1.864, 2.213, 0.144, 2.299,
        ],
        &[
            -2.85, 1.571, -0.317, -0.467, 0.602, -0.053, -1.809, 1.042, -0.286, -1.267, 1.835,
            -3.428, 0.684, -2.991, -0.556, 2.668, -1.289, -0.609, 0.935, -1.585,
        ],
        3.2310088149319374,
        37.999316222510204,
        0.0025483777181781363,
    ),
    (
        &[
            -1.999, -0.044, 2.533, 2.241, 2.313, 1.26, 3.771, 1.105, 3.73, 4.404, -0.021, -1.401,
            0.129, 1.292, -0.225, -0.353, 1.35, -2.486, 0.251, 1.067, 0.631, 1.28, -0.619, -1.904,
        ],
        &[
            2.09, 4.244, 1.864, 3.13, -0.567, 2.483, 3.072, 2.94, 2.039, 1.125,
        ],
        -2.6613837668432326,
        23.438623525210305,
        0.013817935577256736,
    ),
];
