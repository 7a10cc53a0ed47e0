use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ace_core::backend::{serve_request, BackendSpec, BuiltinBackend, ModelBackend};
use ace_core::config::RunConfig;
use ace_core::dataset::Dataset;
use ace_core::model::{
    evaluate, save_bundle, split_indices, train, ClassMetrics, LabeledImage, TrainConfig,
};
use ace_core::pipeline;
use ace_core::report::{to_json_string, write_json};
use ace_core::synth::{generate_dataset, SynthConfig, SynthMode};
use ace_core::Error;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "ace-scope",
    version,
    about = "Discover and score visual concepts used by an image classifier"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ACE_SCOPE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic leaf dataset with planted concepts.
    Synth(SynthArgs),
    /// Train the builtin CNN on a dataset and write a model bundle.
    Train(TrainArgs),
    /// Evaluate a model bundle on one split of a dataset.
    Eval(EvalArgs),
    /// Segment, embed and cluster class images into candidate concepts.
    Discover(PipelineArgs),
    /// TCAV-score discovered concepts against random counterexamples.
    Score(PipelineArgs),
    /// Write ranked reports and concept montages.
    Report(PipelineArgs),
    /// discover + score + report.
    Run(PipelineArgs),
    /// Answer one external-backend protocol request with a builtin bundle.
    BackendServe(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// clean, bg_bias or shadow.
    #[arg(long)]
    mode: Option<SynthMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model bundle directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    augment: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Also write the metrics to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// builtin:<bundle dir> or external:<command>
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    layer: Option<String>,
    /// Class name or index (default: every class).
    #[arg(long)]
    class: Option<String>,
    /// Comma-separated superpixel targets, coarse to fine.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    discovery_images: Option<usize>,
    #[arg(long)]
    eval_images: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    random_set_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    html: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    request: PathBuf,
}

/// Exit codes: 2 usage/config, 3 I/O, 4 backend, 5 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => 3,
                Error::Backend(_) => 4,
                Error::Numerical(_) | Error::Training(_) => 5,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let serving = matches!(cli.command, Command::BackendServe(_));
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Protocol servers report every failure as a backend failure.
            ExitCode::from(if serving { 4 } else { exit_code(&e) })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Discover(a) => {
            let (cfg, ds) = pipeline_setup(a)?;
            let backend = open_backend(&cfg)?;
            for set in pipeline::run_discover(&ds, backend.as_ref(), &cfg)? {
                println!(
                    "{}: {} concepts from {} segments",
                    set.class_name,
                    set.concepts.len(),
                    set.n_segments
                );
            }
            Ok(())
        }
        Command::Score(a) => {
            let (cfg, ds) = pipeline_setup(a)?;
            let backend = open_backend(&cfg)?;
            for s in pipeline::run_score(&ds, backend.as_ref(), &cfg)? {
                print_scores(&s.class_name, &s.results);
            }
            Ok(())
        }
        Command::Report(a) => {
            let (cfg, ds) = pipeline_setup(a)?;
            for r in pipeline::run_report(&ds, &cfg)? {
                println!(
                    "{}: report with {} concepts",
                    r.class_name,
                    r.concepts.len()
                );
            }
            Ok(())
        }
        Command::Run(a) => {
            let (cfg, ds) = pipeline_setup(a)?;
            let backend = open_backend(&cfg)?;
            for r in pipeline::run_all(&ds, backend.as_ref(), &cfg)? {
                println!("{}: {} concepts", r.class_name, r.concepts.len());
                for c in &r.concepts {
                    println!(
                        "  concept {:>2}  tcav {:.3} +/- {:.3}  p {:.2e}{}",
                        c.concept_id,
                        c.tcav_mean,
                        c.tcav_std,
                        c.p_value,
                        if c.significant { "  *" } else { "" }
                    );
                }
            }
            Ok(())
        }
        Command::BackendServe(a) => {
            let backend = BuiltinBackend::from_bundle(&a.bundle)?;
            let out = serve_request(&backend, &a.request)?;
            if !out.is_empty() {
                println!("{out}");
            }
            Ok(())
        }
    }
}

fn print_scores(class: &str, results: &[ace_core::tcav::TcavResult]) {
    println!("{class}:");
    for r in results {
        println!(
            "  concept {:>2}  tcav {:.3}  random {:.3}  p {:.2e}{}",
            r.concept_id,
            r.mean,
            r.random_scores.iter().sum::<f64>() / r.random_scores.len() as f64,
            r.p_value,
            if r.significant { "  *" } else { "" }
        );
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.images_per_class {
        cfg.images_per_class = n;
    }
    let manifest = generate_dataset(&cfg, &a.out)?;
    println!(
        "wrote {} images in {} classes to {}",
        manifest.images.len(),
        manifest.classes.len(),
        a.out.display()
    );
    Ok(())
}

fn labeled(ds: &Dataset, indices: &[usize]) -> Result<Vec<LabeledImage>> {
    indices
        .iter()
        .map(|&i| {
            Ok(LabeledImage {
                image: ds.load(i)?,
                label: ds.images()[i].class,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    split_seed: u64,
    dataset: &'a Path,
    loss_curve: &'a [f64],
    train: &'a ClassMetrics,
    validation: &'a ClassMetrics,
    test: &'a ClassMetrics,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let split = split_indices(&ds.labels(), a.split_seed)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        augmentation: a.augment,
    };
    let train_set = labeled(&ds, &split.train)?;
    let report = train(&train_set, ds.classes().len(), &cfg)?;
    save_bundle(&report.params, &a.out)?;
    let train_m = evaluate(&report.params, &train_set)?;
    let val_m = evaluate(&report.params, &labeled(&ds, &split.validation)?)?;
    let test_m = evaluate(&report.params, &labeled(&ds, &split.test)?)?;
    write_json(
        &TrainSummary {
            config: &cfg,
            split_seed: a.split_seed,
            dataset: &a.data,
            loss_curve: &report.loss_curve,
            train: &train_m,
            validation: &val_m,
            test: &test_m,
        },
        a.out.join("train.json"),
    )?;
    if let Some(last) = report.loss_curve.last() {
        println!("final training loss {last:.4}");
    }
    println!(
        "accuracy: train {:.3}  validation {:.3}  test {:.3}",
        train_m.accuracy, val_m.accuracy, test_m.accuracy
    );
    print_class_table(&ds, &test_m);
    Ok(())
}

fn print_class_table(ds: &Dataset, m: &ClassMetrics) {
    println!(
        "{:<16} {:>9} {:>9} {:>9} {:>8}",
        "class", "precision", "recall", "f1", "support"
    );
    for (name, c) in ds.classes().iter().zip(&m.per_class) {
        println!(
            "{name:<16} {:>9.3} {:>9.3} {:>9.3} {:>8}",
            c.precision, c.recall, c.f1, c.support
        );
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let backend = BuiltinBackend::from_bundle(&a.model)?;
    let split = split_indices(&ds.labels(), a.split_seed)?;
    let indices: Vec<usize> = match a.split {
        SplitName::Train => split.train,
        SplitName::Validation => split.validation,
        SplitName::Test => split.test,
        SplitName::All => (0..ds.len()).collect(),
    };
    let metrics = evaluate(backend.params(), &labeled(&ds, &indices)?)?;
    let text = to_json_string(&serde_json::json!({
        "model": a.model,
        "dataset": a.data,
        "split": a.split,
        "split_seed": a.split_seed,
        "classes": ds.classes(),
        "metrics": metrics,
    }))?;
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    print!("{text}");
    Ok(())
}

fn pipeline_setup(a: PipelineArgs) -> Result<(RunConfig, Dataset)> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            RunConfig::from_json(&text).with_context(|| format!("reading {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = a.data {
        cfg.dataset = v;
    }
    if let Some(v) = a.backend {
        cfg.backend = Some(v.parse::<BackendSpec>()?);
    }
    if a.layer.is_some() {
        cfg.layer = a.layer;
    }
    if a.class.is_some() {
        cfg.class = a.class;
    }
    if let Some(v) = a.levels {
        cfg.segmentation.levels = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.discovery_images {
        cfg.discovery_images = v;
    }
    if let Some(v) = a.eval_images {
        cfg.eval_images = v;
    }
    if let Some(v) = a.runs {
        cfg.n_runs = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.random_set_size {
        cfg.random_set_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.split_seed {
        cfg.split_seed = v;
    }
    if let Some(v) = a.examples {
        cfg.montage_examples = v;
    }
    if a.sample_seed.is_some() {
        cfg.sample_seed = a.sample_seed;
    }
    if a.html {
        cfg.html = true;
    }
    if let Some(v) = a.out {
        cfg.out = v;
    }
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    Ok((cfg, ds))
}

fn open_backend(cfg: &RunConfig) -> Result<Box<dyn ModelBackend>> {
    Ok(cfg.backend()?.open()?)
}
