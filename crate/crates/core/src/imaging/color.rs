use super::RgbImage;

/// Per-pixel CIELAB triples (D65 white point).
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl LabImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }
}

const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

fn linearize(c: u8) -> f64 {
    let v = f64::from(c) / 255.0;
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB -> linear RGB -> XYZ (D65) -> CIELAB for a single colour.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(linearize);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / WHITE[0]);
    let fy = lab_f(y / WHITE[1]);
    let fz = lab_f(z / WHITE[2]);
    // The matrix rows carry 1e-7 rounding; keep white exactly at L = 100.
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    // 8-bit input has at most 2^24 colours but images are small; a per-call
    // cache keyed on the packed colour avoids recomputing flat regions.
    let mut cache = std::collections::HashMap::new();
    let data = img
        .pixels()
        .chunks_exact(3)
        .map(|px| {
            let key = [px[0], px[1], px[2]];
            *cache
                .entry(key)
                .or_insert_with(|| srgb_to_lab(key).map(|v| v as f32))
        })
        .collect();
    LabImage {
        width: img.width(),
        height: img.height(),
        data,
    }
}
