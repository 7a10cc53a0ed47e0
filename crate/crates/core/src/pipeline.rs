//! The end-to-end concept pipeline: image selection, discovery, scoring and
//! reporting, with each stage reading and writing JSON artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{images_to_batch, ModelBackend};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::discovery::{embed_patches, mean_color, prepare_patches, prune_clusters, SegmentRef};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, save_image, Rgb, RgbImage};
use crate::kmeans::kmeans;
use crate::matrix::Matrix;
use crate::model::split_indices;
use crate::report::{
    read_json, write_json, write_montages, write_report, ConceptReport, MemberRecord, ReportConcept,
};
use crate::seed::derive_seed;
use crate::slic::{deduplicate_segments, multiresolution_segments, SegmentationConfig};
use crate::tcav::{assemble_result, baseline_runs, concept_runs, RunScore, TcavResult};

pub const CONCEPTS_FILE: &str = "concepts.json";
pub const RESULTS_FILE: &str = "results.json";

/// Per-class discovery and evaluation images, disjoint subsets of the
/// train+validation pool, plus the patch fill colour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSelection {
    pub fill: Rgb,
    pub discovery: Vec<Vec<usize>>,
    pub eval: Vec<Vec<usize>>,
}

pub fn select_images(dataset: &Dataset, cfg: &RunConfig) -> Result<ImageSelection> {
    let labels = dataset.labels();
    let pool = split_indices(&labels, cfg.split_seed)?.train_val();
    let images: Vec<RgbImage> = pool
        .par_iter()
        .map(|&i| dataset.load(i))
        .collect::<Result<_>>()?;
    let fill = mean_color(&images);
    let mut discovery = Vec::new();
    let mut eval = Vec::new();
    for c in 0..dataset.classes().len() {
        let mut idx: Vec<usize> = pool.iter().copied().filter(|&i| labels[i] == c).collect();
        idx.sort_unstable();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[300, c as u64],
        )));
        let needed = cfg.discovery_images + cfg.eval_images;
        if idx.len() < needed {
            return Err(Error::Dataset(format!(
                "class {} has {} train+validation images; {needed} are needed for discovery and evaluation",
                dataset.classes()[c],
                idx.len()
            )));
        }
        let mut d = idx[..cfg.discovery_images].to_vec();
        let mut e = idx[cfg.discovery_images..needed].to_vec();
        d.sort_unstable();
        e.sort_unstable();
        discovery.push(d);
        eval.push(e);
    }
    Ok(ImageSelection {
        fill,
        discovery,
        eval,
    })
}

/// Multi-resolution, deduplicated segments of the given images, in image order.
pub fn segment_images(
    dataset: &Dataset,
    indices: &[usize],
    seg: &SegmentationConfig,
) -> Result<Vec<SegmentRef>> {
    let per_image: Vec<Vec<SegmentRef>> = indices
        .par_iter()
        .map(|&i| {
            let path = &dataset.images()[i].path;
            let img = dataset.load(i)?;
            let segs = deduplicate_segments(
                multiresolution_segments(&img, path, seg)?,
                seg.dedup_threshold,
            )?;
            Ok(segs
                .iter()
                .map(|s| SegmentRef::from_segment(i, path, s))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.concat())
}

fn load_cache(dataset: &Dataset, segments: &[SegmentRef]) -> Result<BTreeMap<usize, RgbImage>> {
    let mut ids: Vec<usize> = segments.iter().map(|s| s.image).collect();
    ids.sort_unstable();
    ids.dedup();
    let loaded: Vec<(usize, RgbImage)> = ids
        .par_iter()
        .map(|&i| Ok((i, dataset.load(i)?)))
        .collect::<Result<_>>()?;
    Ok(loaded.into_iter().collect())
}

/// Prepared patches of `segments`.
pub fn segment_patches(
    dataset: &Dataset,
    segments: &[SegmentRef],
    size: [usize; 2],
    fill: Rgb,
) -> Result<Vec<RgbImage>> {
    let cache = load_cache(dataset, segments)?;
    let get = |i: usize| {
        cache
            .get(&i)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("image {i} not loaded")))
    };
    prepare_patches(&get, segments, size, fill)
}

pub fn embed_segments(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    segments: &[SegmentRef],
    layer: &str,
    fill: Rgb,
    batch: usize,
) -> Result<Matrix<f32>> {
    let patches = segment_patches(dataset, segments, backend.info().input_size, fill)?;
    embed_patches(backend, &patches, layer, batch)
}

/// Logit gradients of `class` at `layer` for the given full images.
pub fn eval_gradients(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    images: &[usize],
    layer: &str,
    class: usize,
    batch: usize,
) -> Result<Matrix<f32>> {
    let [h, w] = backend.info().input_size;
    let mut out: Option<Matrix<f32>> = None;
    for chunk in images.chunks(batch.max(1)) {
        let imgs: Vec<RgbImage> = chunk
            .iter()
            .map(|&i| {
                let img = dataset.load(i)?;
                if (img.width(), img.height()) == (w, h) {
                    Ok(img)
                } else {
                    bilinear_resize(&img, w, h)
                }
            })
            .collect::<Result<_>>()?;
        let rows = backend.logit_gradients(&images_to_batch(&imgs)?, layer, class)?;
        match out.as_mut() {
            None => out = Some(rows),
            Some(m) => m.append(&rows)?,
        }
    }
    out.ok_or_else(|| Error::Parameter("no evaluation images".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept_id: usize,
    pub image_coverage: f64,
    /// Ordered by distance to the centroid.
    pub members: Vec<MemberRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub class: usize,
    pub class_name: String,
    pub backend: String,
    pub layer: String,
    pub input_size: [usize; 2],
    pub fill: Rgb,
    pub discovery_images: Vec<Vec<usize>>,
    pub eval_images: Vec<usize>,
    pub n_segments: usize,
    pub concepts: Vec<ConceptRecord>,
    pub config: RunConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub class: usize,
    pub class_name: String,
    pub backend: String,
    pub layer: String,
    pub results: Vec<TcavResult>,
    pub config: RunConfig,
    pub seed: u64,
}

fn check_layer(backend: &dyn ModelBackend, layer: &str) -> Result<()> {
    backend.info().check_layer(layer)
}

/// Segments the class's discovery images, clusters their embeddings and
/// prunes the clusters into concepts.
pub fn discover_class(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
    selection: &ImageSelection,
    class: usize,
) -> Result<ConceptSet> {
    cfg.validate()?;
    let layer = cfg.layer()?;
    check_layer(backend, layer)?;
    let images = &selection.discovery[class];
    let segments = segment_images(dataset, images, &cfg.segmentation)?;
    let embeddings = embed_segments(
        dataset,
        backend,
        &segments,
        layer,
        selection.fill,
        cfg.embed_batch,
    )?;
    let k = cfg.k.min(segments.len());
    let concepts = if k == 0 {
        Vec::new()
    } else {
        let km = kmeans(
            &embeddings,
            &cfg.kmeans(derive_seed(cfg.seed, &[100, class as u64])),
        )?;
        let sources: Vec<usize> = segments.iter().map(|s| s.image).collect();
        prune_clusters(
            &km.assignments,
            &embeddings,
            &km.centroids,
            &sources,
            images.len(),
            &cfg.prune,
        )?
        .into_iter()
        .map(|c| ConceptRecord {
            concept_id: c.concept_id,
            image_coverage: c.image_coverage,
            members: c
                .members
                .iter()
                .map(|&(i, d)| MemberRecord {
                    segment: segments[i].clone(),
                    distance: d,
                })
                .collect(),
        })
        .collect()
    };
    Ok(ConceptSet {
        class,
        class_name: dataset.classes()[class].clone(),
        backend: cfg
            .backend
            .as_ref()
            .map(|b| b.to_string())
            .unwrap_or_default(),
        layer: layer.to_string(),
        input_size: backend.info().input_size,
        fill: selection.fill,
        discovery_images: selection.discovery.clone(),
        eval_images: selection.eval[class].clone(),
        n_segments: segments.len(),
        concepts,
        config: cfg.clone(),
        seed: cfg.seed,
    })
}

/// Random counterexample pool: segments of the other classes' discovery images.
pub fn random_pool(
    dataset: &Dataset,
    set: &ConceptSet,
    seg: &SegmentationConfig,
) -> Result<Vec<SegmentRef>> {
    let others: Vec<usize> = set
        .discovery_images
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != set.class)
        .flat_map(|(_, imgs)| imgs.iter().copied())
        .collect();
    segment_images(dataset, &others, seg)
}

/// TCAV significance for every concept of `set`.
pub fn score_class(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
    set: &ConceptSet,
) -> Result<ScoreSet> {
    cfg.validate()?;
    let layer = set.layer.as_str();
    check_layer(backend, layer)?;
    let sig = cfg.significance(set.concepts.len());
    let seed = derive_seed(cfg.seed, &[200, set.class as u64]);
    let mut results = Vec::new();
    if !set.concepts.is_empty() {
        let pool_segments = random_pool(dataset, set, &set.config.segmentation)?;
        let pool = embed_segments(
            dataset,
            backend,
            &pool_segments,
            layer,
            set.fill,
            cfg.embed_batch,
        )?;
        let grads = eval_gradients(
            dataset,
            backend,
            &set.eval_images,
            layer,
            set.class,
            cfg.embed_batch,
        )?;
        let mut baselines: BTreeMap<usize, Vec<RunScore>> = BTreeMap::new();
        for concept in &set.concepts {
            let segs: Vec<SegmentRef> = concept.members.iter().map(|m| m.segment.clone()).collect();
            let emb = embed_segments(dataset, backend, &segs, layer, set.fill, cfg.embed_batch)?;
            let runs = concept_runs(&emb, &pool, &grads, &sig, seed)?;
            if let std::collections::btree_map::Entry::Vacant(e) = baselines.entry(emb.rows()) {
                e.insert(baseline_runs(&pool, &grads, emb.rows(), &sig, seed)?);
            }
            results.push(assemble_result(
                concept.concept_id,
                set.class,
                &runs,
                &baselines[&emb.rows()],
                &sig,
            )?);
        }
    }
    Ok(ScoreSet {
        class: set.class,
        class_name: set.class_name.clone(),
        backend: cfg
            .backend
            .as_ref()
            .map(|b| b.to_string())
            .unwrap_or_else(|| set.backend.clone()),
        layer: set.layer.clone(),
        results,
        config: cfg.clone(),
        seed: cfg.seed,
    })
}

pub fn build_report(set: &ConceptSet, scores: &ScoreSet, cfg: &RunConfig) -> Result<ConceptReport> {
    let mut concepts = Vec::new();
    for r in &scores.results {
        let c = set
            .concepts
            .iter()
            .find(|c| c.concept_id == r.concept_id)
            .ok_or_else(|| {
                Error::Parameter(format!("results mention unknown concept {}", r.concept_id))
            })?;
        concepts.push(ReportConcept::new(r, c.members.clone()));
    }
    let mut report = ConceptReport {
        class: set.class,
        class_name: set.class_name.clone(),
        backend: scores.backend.clone(),
        layer: set.layer.clone(),
        input_size: set.input_size,
        fill: set.fill,
        concepts,
        config: cfg.clone(),
        seed: cfg.seed,
    };
    crate::report::sort_concepts(&mut report.concepts);
    Ok(report)
}

/// Classes selected by `cfg.class`, or all of them.
pub fn target_classes(dataset: &Dataset, cfg: &RunConfig) -> Result<Vec<usize>> {
    match &cfg.class {
        Some(c) => Ok(vec![dataset.class_index(c)?]),
        None => Ok((0..dataset.classes().len()).collect()),
    }
}

pub fn class_dir(cfg: &RunConfig, dataset: &Dataset, class: usize) -> PathBuf {
    cfg.out.join(&dataset.classes()[class])
}

/// `discover` stage: writes `<out>/<class>/concepts.json` and audit patches.
pub fn run_discover(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
) -> Result<Vec<ConceptSet>> {
    cfg.validate()?;
    let classes = target_classes(dataset, cfg)?;
    let selection = select_images(dataset, cfg)?;
    let mut out = Vec::new();
    for class in classes {
        let set = discover_class(dataset, backend, cfg, &selection, class)?;
        let dir = class_dir(cfg, dataset, class);
        write_json(&set, dir.join(CONCEPTS_FILE))?;
        let patch_root = dir.join("patches");
        for c in &set.concepts {
            let segs: Vec<SegmentRef> = c.members.iter().map(|m| m.segment.clone()).collect();
            let patches = segment_patches(dataset, &segs, set.input_size, set.fill)?;
            let cdir = patch_root.join(format!("concept_{}", c.concept_id));
            fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
            for (rank, p) in patches.iter().enumerate() {
                save_image(p, cdir.join(format!("{rank:02}.ppm")))?;
            }
        }
        out.push(set);
    }
    Ok(out)
}

/// `score` stage: reads `concepts.json`, writes `results.json`.
pub fn run_score(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
) -> Result<Vec<ScoreSet>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for class in target_classes(dataset, cfg)? {
        let dir = class_dir(cfg, dataset, class);
        let set: ConceptSet = read_json(dir.join(CONCEPTS_FILE))?;
        let scores = score_class(dataset, backend, cfg, &set)?;
        write_json(&scores, dir.join(RESULTS_FILE))?;
        out.push(scores);
    }
    Ok(out)
}

/// `report` stage: combines both artifacts into `report.json` and montages.
pub fn run_report(dataset: &Dataset, cfg: &RunConfig) -> Result<Vec<ConceptReport>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for class in target_classes(dataset, cfg)? {
        let dir = class_dir(cfg, dataset, class);
        let set: ConceptSet = read_json(dir.join(CONCEPTS_FILE))?;
        let scores: ScoreSet = read_json(dir.join(RESULTS_FILE))?;
        let report = build_report(&set, &scores, cfg)?;
        write_report(&report, &dir)?;
        write_montages(
            &report,
            dataset,
            &dir,
            cfg.montage_examples,
            cfg.sample_seed,
            cfg.html,
        )?;
        out.push(report);
    }
    Ok(out)
}

/// All three stages in sequence; equivalent to running them one by one.
pub fn run_all(
    dataset: &Dataset,
    backend: &dyn ModelBackend,
    cfg: &RunConfig,
) -> Result<Vec<ConceptReport>> {
    run_discover(dataset, backend, cfg)?;
    run_score(dataset, backend, cfg)?;
    run_report(dataset, cfg)
}
