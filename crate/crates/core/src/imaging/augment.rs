use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{round_half_away, RgbImage};

/// One concrete affine augmentation. Flips are applied first, then shear,
/// rotation and zoom about the image centre, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise as displayed.
    pub rotation_deg: f64,
    pub translate_px: [f64; 2],
    pub zoom: f64,
    pub shear_deg: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            rotation_deg: 0.0,
            translate_px: [0.0, 0.0],
            zoom: 1.0,
            shear_deg: 0.0,
        }
    }
}

/// Sampling ranges for [`random_augment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub flip_probability: f64,
    pub max_rotation_deg: f64,
    /// Fraction of the image side.
    pub max_translate_frac: f64,
    pub zoom_range: [f64; 2],
    pub max_shear_deg: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            max_rotation_deg: 15.0,
            max_translate_frac: 0.1,
            zoom_range: [0.9, 1.1],
            max_shear_deg: 5.0,
        }
    }
}

impl AugmentParams {
    pub fn sample(ranges: &AugmentRanges, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let sym =
            |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let flip_h = rng.gen_bool(ranges.flip_probability);
        let flip_v = rng.gen_bool(ranges.flip_probability);
        let rotation_deg = sym(rng, ranges.max_rotation_deg);
        let tx = sym(rng, ranges.max_translate_frac * width as f64);
        let ty = sym(rng, ranges.max_translate_frac * height as f64);
        let [lo, hi] = ranges.zoom_range;
        let zoom = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let shear_deg = sym(rng, ranges.max_shear_deg);
        Self {
            flip_h,
            flip_v,
            rotation_deg,
            translate_px: [tx, ty],
            zoom,
            shear_deg,
        }
    }

    fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Applies `params` with bilinear sampling; samples falling outside the
/// image take the nearest edge pixel.
pub fn augment(img: &RgbImage, params: &AugmentParams) -> RgbImage {
    assert!(params.zoom > 0.0, "zoom must be positive");
    if params.is_identity() {
        return img.clone();
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let shear = params.shear_deg.to_radians().tan();
    // Forward linear part: zoom * R * Sh, with R = [[c, s], [-s, c]] and
    // Sh = [[1, shear], [0, 1]].
    let a = [
        [params.zoom * cos, params.zoom * (cos * shear + sin)],
        [-params.zoom * sin, params.zoom * (cos - sin * shear)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let qx = x as f64 + 0.5 - cx - params.translate_px[0];
            let qy = y as f64 + 0.5 - cy - params.translate_px[1];
            let mut px = inv[0][0] * qx + inv[0][1] * qy + cx;
            let mut py = inv[1][0] * qx + inv[1][1] * qy + cy;
            if params.flip_h {
                px = w - px;
            }
            if params.flip_v {
                py = h - py;
            }
            out.put(x, y, sample_clamped(img, px - 0.5, py - 0.5));
        }
    }
    out
}

fn sample_clamped(img: &RgbImage, sx: f64, sy: f64) -> [u8; 3] {
    let sx = sx.clamp(0.0, (img.width() - 1) as f64);
    let sy = sy.clamp(0.0, (img.height() - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = (
        (x0 + 1).min(img.width() - 1),
        (y0 + 1).min(img.height() - 1),
    );
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let (p00, p10, p01, p11) = (
        img.get(x0, y0),
        img.get(x1, y0),
        img.get(x0, y1),
        img.get(x1, y1),
    );
    let mut px = [0u8; 3];
    for c in 0..3 {
        let lerp = |a: u8, b: u8, t: f64| f64::from(a) + (f64::from(b) - f64::from(a)) * t;
        let top = lerp(p00[c], p10[c], fx);
        let bottom = lerp(p01[c], p11[c], fx);
        px[c] = round_half_away(top + (bottom - top) * fy);
    }
    px
}

/// Samples parameters from `ranges` with a seeded generator and applies them.
pub fn random_augment(img: &RgbImage, ranges: &AugmentRanges, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(ranges, img.width(), img.height(), &mut rng);
    augment(img, &params)
}
