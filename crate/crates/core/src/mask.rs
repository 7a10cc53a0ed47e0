//! Boolean pixel masks and their run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

/// Uncompressed run-length encoding in row-major order. `counts` alternates
/// runs of `false` and `true` pixels, starting with a (possibly empty)
/// `false` run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} mask needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box of the set pixels, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let b = bb.get_or_insert(BBox {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    b.x0 = b.x0.min(x);
                    b.x1 = b.x1.max(x + 1);
                    b.y1 = y + 1;
                }
            }
        }
        bb
    }

    fn check_same_size(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Dimension(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.check_same_size(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    /// `|A ∩ B| / |A ∪ B|`; two empty masks have overlap 0.
    pub fn jaccard(&self, other: &Mask) -> Result<f64> {
        let inter = self.intersection_count(other)?;
        let union = self.count() + other.count() - inter;
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_same_size(other)?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn crop(&self, bbox: &BBox) -> Mask {
        Mask::from_fn(bbox.width(), bbox.height(), |x, y| {
            self.get(bbox.x0 + x, bbox.y0 + y)
        })
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    /// Set pixels with at least one 4-neighbour outside the mask or outside
    /// the image.
    pub fn boundary(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            if !self.get(x, y) {
                return false;
            }
            x == 0
                || y == 0
                || x + 1 == self.width
                || y + 1 == self.height
                || !self.get(x - 1, y)
                || !self.get(x + 1, y)
                || !self.get(x, y - 1)
                || !self.get(x, y + 1)
        })
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            width: self.width,
            height: self.height,
            counts,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Mask> {
        let total: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
        if total != (rle.width * rle.height) as u64 {
            return Err(Error::Parse(format!(
                "RLE covers {total} pixels, mask is {}x{}",
                rle.width, rle.height
            )));
        }
        let mut bits = Vec::with_capacity(rle.width * rle.height);
        for (i, &c) in rle.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Mask::new(rle.width, rle.height, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bbox_is_tight() {
        let m = Mask::from_fn(5, 4, |x, y| (1..3).contains(&x) && (2..4).contains(&y));
        assert_eq!(
            m.bbox(),
            Some(BBox {
                x0: 1,
                y0: 2,
                x1: 3,
                y1: 4
            })
        );
        assert_eq!(Mask::empty(3, 3).bbox(), None);
    }

    #[test]
    fn jaccard_of_overlapping_masks() {
        // 100 px and 80 px masks sharing 70 px: 70 / 110.
        let a = Mask::from_fn(20, 20, |x, y| y < 5 && x < 20);
        let b = Mask::from_fn(20, 20, |x, y| (y < 5 && x >= 6) || (y == 5 && x < 10));
        assert_eq!((a.count(), b.count()), (100, 80));
        assert_eq!(a.intersection_count(&b).unwrap(), 70);
        assert!((a.jaccard(&b).unwrap() - 70.0 / 110.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_a_square() {
        let m = Mask::from_fn(5, 5, |x, y| (1..4).contains(&x) && (1..4).contains(&y));
        let b = m.boundary();
        assert_eq!(b.count(), 8);
        assert!(!b.get(2, 2));
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1usize..12, h in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
            let m = Mask::new(w, h, bits[..w * h].to_vec()).unwrap();
            prop_assert_eq!(Mask::from_rle(&m.to_rle()).unwrap(), m);
        }
    }
}
