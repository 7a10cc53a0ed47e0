use super::{Rgb, RgbImage};
use crate::error::{Error, Result};
use crate::mask::{BBox, Mask};

/// Rounds to the nearest integer with halves going away from zero, clamped
/// to the 8-bit range.
pub fn round_half_away(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
        .clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resampling with pixel centres at half-integer coordinates.
pub fn bilinear_resize(img: &RgbImage, out_w: usize, out_h: usize) -> Result<RgbImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimension(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    if (out_w, out_h) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    let cols: Vec<_> = (0..out_w)
        .map(|x| source_coord(x, img.width(), out_w))
        .collect();
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, img.height(), out_h);
        for &(x0, x1, fx) in &cols {
            let p00 = img.get(x0, y0);
            let p10 = img.get(x1, y0);
            let p01 = img.get(x0, y1);
            let p11 = img.get(x1, y1);
            for c in 0..3 {
                let lerp = |a: u8, b: u8, t: f64| f64::from(a) + (f64::from(b) - f64::from(a)) * t;
                let top = lerp(p00[c], p10[c], fx);
                let bottom = lerp(p01[c], p11[c], fx);
                pixels.push(round_half_away(top + (bottom - top) * fy));
            }
        }
    }
    RgbImage::new(out_w, out_h, pixels)
}

/// Replaces every pixel outside `mask` with `fill`.
pub fn apply_mask_fill(img: &RgbImage, mask: &Mask, fill: Rgb) -> Result<RgbImage> {
    if (mask.width(), mask.height()) != (img.width(), img.height()) {
        return Err(Error::Dimension(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width(),
            mask.height(),
            img.width(),
            img.height()
        )));
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !mask.get(x, y) {
                out.put(x, y, fill);
            }
        }
    }
    Ok(out)
}

pub fn crop(img: &RgbImage, bbox: &BBox) -> Result<RgbImage> {
    if bbox.x1 > img.width() || bbox.y1 > img.height() || bbox.is_empty() {
        return Err(Error::Dimension(format!(
            "crop box {bbox:?} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut pixels = Vec::with_capacity(bbox.width() * bbox.height() * 3);
    for y in bbox.y0..bbox.y1 {
        let start = 3 * (y * img.width() + bbox.x0);
        pixels.extend_from_slice(&img.pixels()[start..start + 3 * bbox.width()]);
    }
    RgbImage::new(bbox.width(), bbox.height(), pixels)
}
