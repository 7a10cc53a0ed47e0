//! Raster images, codecs, colour conversion and geometric operations.

mod augment;
mod codec;
mod color;
mod geometry;

pub use augment::{augment, random_augment, AugmentParams, AugmentRanges};
pub use codec::{load_image, load_ppm_bytes, save_image, to_png_bytes, to_ppm_bytes};
pub use color::{rgb_to_lab, srgb_to_lab, LabImage};
pub use geometry::{apply_mask_fill, bilinear_resize, crop, round_half_away};

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

/// Row-major interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Result<Self> {
        let pixels = color
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Channel values scaled to `[0, 1]`, interleaved HWC.
    pub fn to_unit_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&v| f32::from(v) / 255.0).collect()
    }

    /// Per-channel sums over all pixels.
    pub fn channel_sums(&self) -> [u64; 3] {
        let mut sums = [0u64; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += u64::from(px[c]);
            }
        }
        sums
    }
}
