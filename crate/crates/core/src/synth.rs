//! Planted-concept leaf images: a green ellipse with veins on a palette
//! background, brown spots on diseased classes, and optional biases.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageRecord, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::imaging::{save_image, srgb_to_lab, Rgb, RgbImage};
use crate::mask::Mask;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Every class draws its background uniformly from all palettes.
    Clean,
    /// Class `c` always uses palette `c mod palettes`.
    BgBias,
    /// Clean backgrounds plus a dark drop shadow on designated classes.
    Shadow,
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthMode::Clean => "clean",
            SynthMode::BgBias => "bg_bias",
            SynthMode::Shadow => "shadow",
        })
    }
}

impl FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(SynthMode::Clean),
            "bg_bias" => Ok(SynthMode::BgBias),
            "shadow" => Ok(SynthMode::Shadow),
            other => Err(Error::Parameter(format!(
                "unknown synth mode `{other}` (expected clean, bg_bias or shadow)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub name: String,
    pub background: Rgb,
}

/// Inclusive per-channel colour box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorRange {
    pub min: Rgb,
    pub max: Rgb,
}

impl ColorRange {
    fn sample(&self, rng: &mut impl Rng) -> Rgb {
        std::array::from_fn(|c| rng.gen_range(self.min[c]..=self.max[c]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub images_per_class: usize,
    pub image_size: usize,
    pub mode: SynthMode,
    pub palettes: Vec<Palette>,
    /// Fraction of the image area covered by the leaf ellipse.
    pub leaf_area: [f64; 2],
    pub leaf_color: ColorRange,
    pub vein_count: [usize; 2],
    /// Spots are drawn on every class except class 0.
    pub spot_count: [usize; 2],
    pub spot_radius: [f64; 2],
    pub spot_color: ColorRange,
    /// Minimum CIELAB distance between a spot colour and its leaf colour.
    pub min_spot_delta_e: f64,
    pub shadow_classes: Vec<usize>,
    pub shadow_fraction: f64,
    /// Shadow offset range in pixels, applied down and to the right.
    pub shadow_offset: [usize; 2],
    /// Shadow colour as a fraction of the background colour.
    pub shadow_darkness: f64,
    /// Uniform per-channel pixel noise amplitude.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            class_names: vec!["healthy".into(), "diseased".into()],
            images_per_class: 250,
            image_size: 64,
            mode: SynthMode::Clean,
            // Under bg_bias the darker palette goes to the healthy class, so
            // the light background marks the disease.
            palettes: vec![
                Palette {
                    name: "grey_brown".into(),
                    background: [96, 88, 80],
                },
                Palette {
                    name: "light_purple".into(),
                    background: [200, 184, 218],
                },
            ],
            leaf_area: [0.4, 0.6],
            leaf_color: ColorRange {
                min: [50, 120, 35],
                max: [80, 160, 60],
            },
            vein_count: [3, 6],
            spot_count: [3, 7],
            spot_radius: [3.0, 7.0],
            spot_color: ColorRange {
                min: [105, 58, 20],
                max: [145, 85, 45],
            },
            min_spot_delta_e: 20.0,
            shadow_classes: vec![1],
            shadow_fraction: 1.0,
            shadow_offset: [5, 8],
            shadow_darkness: 0.35,
            noise: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn class_name(&self, c: usize) -> String {
        self.class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class_{c}"))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Parameter(m.into()));
        if self.num_classes < 2 {
            return err("at least two classes are required");
        }
        if self.images_per_class < 10 {
            return err("at least 10 images per class are required");
        }
        if self.image_size < 16 {
            return err("image_size must be at least 16");
        }
        if self.palettes.is_empty() {
            return err("at least one palette is required");
        }
        if !(self.leaf_area[0] > 0.0
            && self.leaf_area[0] <= self.leaf_area[1]
            && self.leaf_area[1] < 1.0)
        {
            return err("leaf_area must satisfy 0 < min <= max < 1");
        }
        if self.vein_count[0] > self.vein_count[1] || self.spot_count[0] > self.spot_count[1] {
            return err("count ranges must satisfy min <= max");
        }
        if !(self.spot_radius[0] > 0.0 && self.spot_radius[0] <= self.spot_radius[1]) {
            return err("spot_radius must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.shadow_fraction)
            || !(0.0..=1.0).contains(&self.shadow_darkness)
        {
            return err("shadow_fraction and shadow_darkness must lie in [0, 1]");
        }
        if self.shadow_offset[0] > self.shadow_offset[1] {
            return err("shadow_offset must satisfy min <= max");
        }
        for range in [&self.leaf_color, &self.spot_color] {
            if (0..3).any(|c| range.min[c] > range.max[c]) {
                return err("colour ranges must satisfy min <= max per channel");
            }
        }
        Ok(())
    }
}

/// One rendered image with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: RgbImage,
    pub palette_id: usize,
    pub leaf: Mask,
    /// Present for spotted classes.
    pub spots: Option<Mask>,
    /// Visible shadow pixels, present when the image has a shadow.
    pub shadow: Option<Mask>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Point at leaf coordinates `(u, v)` along the major / minor axes.
    fn point(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.cx + u * self.cos - v * self.sin,
            self.cy + u * self.sin + v * self.cos,
        )
    }
}

fn delta_e(a: Rgb, b: Rgb) -> f64 {
    let (la, lb) = (srgb_to_lab(a), srgb_to_lab(b));
    (0..3).map(|i| (la[i] - lb[i]).powi(2)).sum::<f64>().sqrt()
}

fn scale(c: Rgb, f: f64) -> Rgb {
    c.map(|v| (f64::from(v) * f).round().clamp(0.0, 255.0) as u8)
}

fn draw_line(
    canvas: &mut [Option<Rgb>],
    size: usize,
    from: (f64, f64),
    to: (f64, f64),
    color: Rgb,
) {
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (from.0 + t * (to.0 - from.0)).round();
        let y = (from.1 + t * (to.1 - from.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < size && (y as usize) < size {
            let slot = &mut canvas[y as usize * size + x as usize];
            if slot.is_some() {
                *slot = Some(color);
            }
        }
    }
}

/// Renders image `index` of `class`; a pure function of the config.
pub fn render_image(cfg: &SynthConfig, class: usize, index: usize) -> Result<SynthImage> {
    let size = cfg.image_size;
    let n = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[class as u64, index as u64]));

    let palette_id = match cfg.mode {
        SynthMode::BgBias => class % cfg.palettes.len(),
        SynthMode::Clean | SynthMode::Shadow => rng.gen_range(0..cfg.palettes.len()),
    };
    let background = cfg.palettes[palette_id].background;

    let area = rng.gen_range(cfg.leaf_area[0]..=cfg.leaf_area[1]) * n * n;
    let aspect = rng.gen_range(1.3..=1.7);
    let b = (area / (std::f64::consts::PI * aspect)).sqrt();
    let angle: f64 = rng.gen_range(-0.6..=0.6);
    let leaf = Ellipse {
        cx: n / 2.0 - 0.5 + rng.gen_range(-2.0..=2.0),
        cy: n / 2.0 - 0.5 + rng.gen_range(-2.0..=2.0),
        a: b * aspect,
        b,
        cos: angle.cos(),
        sin: angle.sin(),
    };
    let leaf_mask = Mask::from_fn(size, size, |x, y| leaf.contains(x as f64, y as f64));
    let leaf_color = cfg.leaf_color.sample(&mut rng);

    let shadowed = cfg.mode == SynthMode::Shadow
        && cfg.shadow_classes.contains(&class)
        && rng.gen_bool(cfg.shadow_fraction);
    let shadow_mask = if shadowed {
        let dx = rng.gen_range(cfg.shadow_offset[0]..=cfg.shadow_offset[1]) as f64;
        let dy = rng.gen_range(cfg.shadow_offset[0]..=cfg.shadow_offset[1]) as f64;
        let cast = Ellipse {
            cx: leaf.cx + dx,
            cy: leaf.cy + dy,
            ..leaf
        };
        Some(Mask::from_fn(size, size, |x, y| {
            !leaf_mask.get(x, y) && cast.contains(x as f64, y as f64)
        }))
    } else {
        None
    };

    // Leaf pixels are `Some`, so veins are clipped to the leaf.
    let mut canvas: Vec<Option<Rgb>> = (0..size * size)
        .map(|i| leaf_mask.get(i % size, i / size).then_some(leaf_color))
        .collect();
    let vein_color = scale(leaf_color, 0.55);
    let veins = rng.gen_range(cfg.vein_count[0]..=cfg.vein_count[1]);
    draw_line(
        &mut canvas,
        size,
        leaf.point(-0.9 * leaf.a, 0.0),
        leaf.point(0.9 * leaf.a, 0.0),
        vein_color,
    );
    for i in 1..veins {
        let u = rng.gen_range(-0.6..=0.6) * leaf.a;
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let reach = rng.gen_range(0.5..=0.8) * leaf.b;
        draw_line(
            &mut canvas,
            size,
            leaf.point(u, 0.0),
            leaf.point(u + 0.6 * reach, side * reach),
            vein_color,
        );
    }

    let spots = if class == 0 {
        None
    } else {
        let mut spot_mask = Mask::empty(size, size);
        let count = rng.gen_range(cfg.spot_count[0]..=cfg.spot_count[1]);
        for _ in 0..count {
            let mut color = cfg.spot_color.sample(&mut rng);
            let mut tries = 0;
            while delta_e(color, leaf_color) < cfg.min_spot_delta_e {
                tries += 1;
                if tries >= 100 {
                    return Err(Error::Generation(
                        "no spot colour far enough from the leaf colour".into(),
                    ));
                }
                color = cfg.spot_color.sample(&mut rng);
            }
            let mut placed = false;
            for _ in 0..100 {
                let r = rng.gen_range(cfg.spot_radius[0]..=cfg.spot_radius[1]);
                let cx = rng.gen_range(0.0..n);
                let cy = rng.gen_range(0.0..n);
                let lo_x = (cx - r).floor();
                let lo_y = (cy - r).floor();
                if lo_x < 0.0 || lo_y < 0.0 || cx + r >= n - 1.0 || cy + r >= n - 1.0 {
                    continue;
                }
                let disk: Vec<(usize, usize)> = (lo_y as usize..=(cy + r).ceil() as usize)
                    .flat_map(|y| (lo_x as usize..=(cx + r).ceil() as usize).map(move |x| (x, y)))
                    .filter(|&(x, y)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
                    .collect();
                if disk.is_empty() || !disk.iter().all(|&(x, y)| leaf_mask.get(x, y)) {
                    continue;
                }
                for (x, y) in disk {
                    spot_mask.set(x, y, true);
                    canvas[y * size + x] = Some(color);
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place a spot inside the leaf of {} image {index} after 100 attempts",
                    cfg.class_name(class)
                )));
            }
        }
        Some(spot_mask)
    };

    let shadow_color = scale(background, cfg.shadow_darkness);
    let noise = i16::from(cfg.noise);
    let mut image = RgbImage::filled(size, size, background)?;
    for y in 0..size {
        for x in 0..size {
            let base = match canvas[y * size + x] {
                Some(c) => c,
                None if shadow_mask.as_ref().is_some_and(|m| m.get(x, y)) => shadow_color,
                None => background,
            };
            let px =
                base.map(|v| (i16::from(v) + rng.gen_range(-noise..=noise)).clamp(0, 255) as u8);
            image.put(x, y, px);
        }
    }

    Ok(SynthImage {
        image,
        palette_id,
        leaf: leaf_mask,
        spots,
        shadow: shadow_mask,
    })
}

/// Renders every image, writes `<out>/<class>/<index>.ppm` and
/// `<out>/manifest.json`, and returns the manifest.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    let jobs: Vec<(usize, usize)> = (0..cfg.num_classes)
        .flat_map(|c| (0..cfg.images_per_class).map(move |i| (c, i)))
        .collect();
    let rendered: Vec<SynthImage> = jobs
        .par_iter()
        .map(|&(c, i)| render_image(cfg, c, i))
        .collect::<Result<_>>()?;

    for c in 0..cfg.num_classes {
        let dir = out.join(cfg.class_name(c));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut images = Vec::with_capacity(jobs.len());
    for (&(class, index), r) in jobs.iter().zip(&rendered) {
        let class_name = cfg.class_name(class);
        let path = format!("{class_name}/{index:04}.ppm");
        save_image(&r.image, out.join(&path))?;
        images.push(ImageRecord {
            path,
            class,
            class_name,
            palette_id: Some(r.palette_id),
            spot_rle: r.spots.as_ref().map(Mask::to_rle),
            shadow: r.shadow.is_some(),
            shadow_rle: r.shadow.as_ref().map(Mask::to_rle),
            leaf_rle: Some(r.leaf.to_rle()),
        });
    }
    let manifest = DatasetManifest {
        images,
        classes: (0..cfg.num_classes).map(|c| cfg.class_name(c)).collect(),
        config: serde_json::to_value(cfg).map_err(|e| Error::json("synth config", e))?,
        seed: Some(cfg.seed),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// `|segment ∩ spots| / |segment|`.
pub fn spot_overlap_fraction(segment: &Mask, truth_spots: &Mask) -> Result<f64> {
    let n = segment.count();
    if n == 0 {
        return Err(Error::Parameter("segment mask is empty".into()));
    }
    Ok(segment.intersection_count(truth_spots)? as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: SynthMode) -> SynthConfig {
        SynthConfig {
            images_per_class: 12,
            mode,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small(SynthMode::Clean);
        let a = render_image(&cfg, 1, 3).unwrap();
        let b = render_image(&cfg, 1, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_ne!(a.image, render_image(&cfg, 1, 4).unwrap().image);
    }

    #[test]
    fn spots_lie_inside_the_leaf_and_only_on_diseased_images() {
        let cfg = small(SynthMode::Clean);
        for i in 0..cfg.images_per_class {
            assert!(render_image(&cfg, 0, i).unwrap().spots.is_none());
            let r = render_image(&cfg, 1, i).unwrap();
            let spots = r.spots.unwrap();
            assert!(spots.count() > 0);
            assert_eq!(spots.intersection_count(&r.leaf).unwrap(), spots.count());
            let frac = r.leaf.count() as f64 / (64.0 * 64.0);
            assert!((0.3..0.7).contains(&frac), "leaf fraction {frac}");
        }
    }

    #[test]
    fn spot_pixels_carry_spot_colours() {
        let cfg = SynthConfig {
            noise: 0,
            ..small(SynthMode::Clean)
        };
        let r = render_image(&cfg, 1, 0).unwrap();
        let spots = r.spots.unwrap();
        let range = cfg.spot_color;
        for y in 0..64 {
            for x in 0..64 {
                let p = r.image.get(x, y);
                let in_range = (0..3).all(|c| range.min[c] <= p[c] && p[c] <= range.max[c]);
                assert_eq!(in_range, spots.get(x, y), "pixel ({x},{y}) = {p:?}");
            }
        }
    }

    #[test]
    fn bias_modes() {
        let cfg = small(SynthMode::BgBias);
        for c in 0..2 {
            for i in 0..cfg.images_per_class {
                assert_eq!(render_image(&cfg, c, i).unwrap().palette_id, c);
            }
        }
        let cfg = small(SynthMode::Shadow);
        for i in 0..cfg.images_per_class {
            assert!(render_image(&cfg, 0, i).unwrap().shadow.is_none());
            let s = render_image(&cfg, 1, i).unwrap().shadow.unwrap();
            assert!(s.count() > 50);
        }
    }

    #[test]
    fn overlap_fraction_counts_pixels() {
        let seg = Mask::from_fn(20, 20, |x, y| y < 5 && x < 20);
        let spots = Mask::from_fn(20, 20, |x, y| y < 2 && x < 20);
        assert!((spot_overlap_fraction(&seg, &spots).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(spot_overlap_fraction(&spots, &seg).unwrap(), 1.0);
        assert_eq!(
            spot_overlap_fraction(&seg, &Mask::empty(20, 20)).unwrap(),
            0.0
        );
        assert!(spot_overlap_fraction(&Mask::empty(20, 20), &seg).is_err());
    }

    #[test]
    fn generated_tree_is_reproducible() {
        let cfg = small(SynthMode::BgBias);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        assert_eq!(m.images.len(), 24);
        assert_eq!(m.images.iter().filter(|r| r.class == 1).count(), 12);
        for rec in &m.images {
            assert_eq!(
                fs::read(a.path().join(&rec.path)).unwrap(),
                fs::read(b.path().join(&rec.path)).unwrap()
            );
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let ds = crate::dataset::Dataset::open(a.path()).unwrap();
        assert_eq!(ds.classes(), ["healthy", "diseased"]);
        assert!(ds.spot_mask(12).unwrap().is_some());
    }
}
