//! JSON artifacts, ranked concept reports and concept montages.

use std::fs;
use std::path::Path;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::discovery::{prepare_patch, SegmentRef};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, save_image, to_png_bytes, Rgb, RgbImage};
use crate::tcav::TcavResult;

pub const REPORT_FILE: &str = "report.json";
pub const SIGNIFICANT_DIGITS: usize = 9;

fn round_significant(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v)
        .parse()
        .unwrap_or(v)
}

fn round_floats(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(r) = n
                .as_f64()
                .map(round_significant)
                .and_then(serde_json::Number::from_f64)
            {
                *n = r;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_floats),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Pretty JSON with sorted keys and floats cut to 9 significant digits.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::json("serialize", e))?;
    round_floats(&mut v);
    Ok(serde_json::to_string_pretty(&v).map_err(|e| Error::json("serialize", e))? + "\n")
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_json_string(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    #[serde(flatten)]
    pub segment: SegmentRef,
    /// Euclidean distance to the concept centroid in embedding space.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConcept {
    pub concept_id: usize,
    pub tcav_mean: f64,
    pub tcav_std: f64,
    pub p_value: f64,
    pub significant: bool,
    pub cav_accuracies: Vec<f64>,
    pub members: Vec<MemberRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub class: usize,
    pub class_name: String,
    pub backend: String,
    pub layer: String,
    /// `[height, width]` of prepared patches.
    pub input_size: [usize; 2],
    pub fill: Rgb,
    pub concepts: Vec<ReportConcept>,
    pub config: RunConfig,
    pub seed: u64,
}

/// Most salient first: TCAV mean descending, then p ascending, then id.
pub fn sort_concepts(concepts: &mut [ReportConcept]) {
    concepts.sort_by(|a, b| {
        b.tcav_mean
            .total_cmp(&a.tcav_mean)
            .then(a.p_value.total_cmp(&b.p_value))
            .then(a.concept_id.cmp(&b.concept_id))
    });
}

impl ReportConcept {
    pub fn new(result: &TcavResult, members: Vec<MemberRecord>) -> Self {
        Self {
            concept_id: result.concept_id,
            tcav_mean: result.mean,
            tcav_std: result.std,
            p_value: result.p_value,
            significant: result.significant,
            cav_accuracies: result.cav_accuracies.clone(),
            members,
        }
    }
}

/// Writes `report.json` (concepts re-sorted) into `out_dir`.
pub fn write_report(report: &ConceptReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let mut sorted = report.clone();
    sort_concepts(&mut sorted.concepts);
    write_json(&sorted, out_dir.as_ref().join(REPORT_FILE))
}

pub const GUTTER: usize = 2;
const GUTTER_COLOR: Rgb = [255, 255, 255];
const OUTLINE_COLOR: Rgb = [255, 0, 0];

/// Montage size for `n` examples of `w x h` cells:
/// `(n*w + (n+1)*GUTTER, 2*h + 3*GUTTER)`.
pub fn montage_size(n: usize, w: usize, h: usize) -> (usize, usize) {
    (n * w + (n + 1) * GUTTER, 2 * h + 3 * GUTTER)
}

fn blit(dst: &mut RgbImage, src: &RgbImage, x0: usize, y0: usize) {
    for y in 0..src.height() {
        for x in 0..src.width() {
            dst.put(x0 + x, y0 + y, src.get(x, y));
        }
    }
}

/// Example members for a montage: the first `n` in stored order, or a
/// seeded sample when `sample_seed` is set.
pub fn select_examples(
    members: &[MemberRecord],
    n: usize,
    sample_seed: Option<u64>,
) -> Vec<&MemberRecord> {
    match sample_seed {
        None => members.iter().take(n).collect(),
        Some(seed) => {
            let mut idx: Vec<usize> = (0..members.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(n);
            idx.sort_unstable();
            idx.into_iter().map(|i| &members[i]).collect()
        }
    }
}

/// Two-row grid: prepared patches on top, source images with the segment
/// boundary outlined in red below.
pub fn render_concept_montage(
    report: &ConceptReport,
    dataset: &Dataset,
    concept_id: usize,
    n_examples: usize,
    sample_seed: Option<u64>,
) -> Result<RgbImage> {
    if n_examples == 0 {
        return Err(Error::Parameter(
            "a montage needs at least one example".into(),
        ));
    }
    let concept = report
        .concepts
        .iter()
        .find(|c| c.concept_id == concept_id)
        .ok_or_else(|| Error::Parameter(format!("no concept {concept_id} in the report")))?;
    let [h, w] = report.input_size;
    let examples = select_examples(&concept.members, n_examples, sample_seed);
    let (mw, mh) = montage_size(examples.len().max(1), w, h);
    let mut canvas = RgbImage::filled(mw, mh, GUTTER_COLOR)?;
    for (i, m) in examples.iter().enumerate() {
        let idx = m.segment.image;
        if idx >= dataset.len() || dataset.images()[idx].path != m.segment.path {
            return Err(Error::Dataset(format!(
                "source image {} is not in the dataset",
                m.segment.path
            )));
        }
        let source = dataset.load(idx)?;
        let seg = m.segment.to_segment()?;
        let patch = prepare_patch(&source, &seg, w, h, report.fill)?;
        let mut bottom = bilinear_resize(&source, w, h)?;
        let outline = seg.mask().resize_nearest(w, h).boundary();
        for y in 0..h {
            for x in 0..w {
                if outline.get(x, y) {
                    bottom.put(x, y, OUTLINE_COLOR);
                }
            }
        }
        let x0 = GUTTER + i * (w + GUTTER);
        blit(&mut canvas, &patch, x0, GUTTER);
        blit(&mut canvas, &bottom, x0, 2 * GUTTER + h);
    }
    Ok(canvas)
}

/// Writes `concept_<id>.ppm` for every concept and, when `html` is set, a
/// self-contained `report.html`.
pub fn write_montages(
    report: &ConceptReport,
    dataset: &Dataset,
    out_dir: impl AsRef<Path>,
    n_examples: usize,
    sample_seed: Option<u64>,
    html: bool,
) -> Result<()> {
    use rayon::prelude::*;
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut sorted = report.clone();
    sort_concepts(&mut sorted.concepts);
    let montages: Vec<RgbImage> = sorted
        .concepts
        .par_iter()
        .map(|c| render_concept_montage(report, dataset, c.concept_id, n_examples, sample_seed))
        .collect::<Result<_>>()?;
    for (c, m) in sorted.concepts.iter().zip(&montages) {
        save_image(m, out.join(format!("concept_{}.ppm", c.concept_id)))?;
    }
    if html {
        let mut page = format!(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Concepts for {name}</title></head><body>\n\
             <h1>Concepts for class {name}</h1>\n<p>backend {backend}, layer {layer}</p>\n",
            name = escape(&report.class_name),
            backend = escape(&report.backend),
            layer = escape(&report.layer),
        );
        for (c, m) in sorted.concepts.iter().zip(&montages) {
            let b64 = base64::engine::general_purpose::STANDARD.encode(to_png_bytes(m)?);
            page += &format!(
                "<h2>Concept {} &mdash; TCAV {:.3} &plusmn; {:.3}, p = {:.3e}{}</h2>\n<img src=\"data:image/png;base64,{b64}\">\n",
                c.concept_id,
                c.tcav_mean,
                c.tcav_std,
                c.p_value,
                if c.significant { " (significant)" } else { "" }
            );
        }
        page += "</body></html>\n";
        let path = out.join("report.html");
        fs::write(&path, page).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(id: usize, mean: f64, p: f64) -> ReportConcept {
        ReportConcept {
            concept_id: id,
            tcav_mean: mean,
            tcav_std: 0.0,
            p_value: p,
            significant: false,
            cav_accuracies: vec![],
            members: vec![],
        }
    }

    #[test]
    fn ties_break_on_p_then_id() {
        let mut cs = vec![
            concept(3, 0.5, 0.2),
            concept(1, 0.9, 0.3),
            concept(0, 0.5, 0.2),
            concept(2, 0.5, 0.01),
        ];
        sort_concepts(&mut cs);
        assert_eq!(
            cs.iter().map(|c| c.concept_id).collect::<Vec<_>>(),
            vec![1, 2, 0, 3]
        );
    }

    #[test]
    fn floats_keep_nine_significant_digits() {
        assert_eq!(round_significant(0.123456789123), 0.123456789);
        assert_eq!(round_significant(-98765.43210987), -98765.4321);
        let s = to_json_string(&serde_json::json!({"b": 1.0 / 3.0, "a": [2.0f64.sqrt()]})).unwrap();
        assert_eq!(
            s,
            "{\n  \"a\": [\n    1.41421356\n  ],\n  \"b\": 0.333333333\n}\n"
        );
    }

    #[test]
    fn montage_layout() {
        assert_eq!(montage_size(1, 64, 64), (68, 134));
        assert_eq!(montage_size(3, 64, 64), (3 * 64 + 8, 134));
    }
}
