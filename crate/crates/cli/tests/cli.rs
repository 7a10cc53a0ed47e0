use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_ace-scope");

fn ace(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("ACE_SCOPE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ace(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Shared synthetic dataset plus an untrained bundle; built once per test binary.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let model = dir.path().join("model");
        ok(&[
            "synth",
            "--mode",
            "clean",
            "--seed",
            "3",
            "--images-per-class",
            "24",
            "--out",
            s(&data),
        ]);
        ok(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&model),
            "--epochs",
            "0",
        ]);
        Fixture {
            _dir: dir,
            data,
            model,
        }
    })
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn pipeline_args<'a>(f: &'a Fixture, backend: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--data",
        s(&f.data),
        "--backend",
        backend,
        "--layer",
        "gap",
        "--class",
        "diseased",
        "--levels",
        "15",
        "--k",
        "3",
        "--discovery-images",
        "6",
        "--eval-images",
        "6",
        "--runs",
        "3",
        "--random-set-size",
        "5",
        "--examples",
        "2",
        "--out",
        out,
    ]
}

#[test]
fn help_exits_zero() {
    assert!(ace(&["--help"]).status.success());
    assert!(ace(&["run", "--help"]).status.success());
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(ace(&["synth"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ace(&[
        "train",
        "--data",
        s(&dir.path().join("nope")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_run_is_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let backend = format!("builtin:{}", s(&f.model));
    let mut args = vec!["run"];
    args.extend(pipeline_args(f, &backend, s(dir.path())));
    let i = args.iter().position(|a| *a == "--runs").unwrap();
    args[i + 1] = "1";
    assert_eq!(ace(&args).status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        ok(&[
            "synth",
            "--mode",
            "shadow",
            "--seed",
            "11",
            "--images-per-class",
            "10",
            "--out",
            s(p),
        ]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 8);
    assert_eq!(ta, tb);
}

#[test]
fn eval_reports_metrics_json() {
    let f = fixture();
    let out = ok(&[
        "eval",
        "--data",
        s(&f.data),
        "--model",
        s(&f.model),
        "--split",
        "all",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["classes"].as_array().unwrap().len(), 2);
    let acc = v["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn run_matches_chained_stages() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (whole, staged) = (dir.path().join("whole"), dir.path().join("staged"));
    let backend = format!("builtin:{}", s(&f.model));
    let mut run = vec!["run"];
    run.extend(pipeline_args(f, &backend, s(&whole)));
    ok(&run);
    for stage in ["discover", "score", "report"] {
        let mut args = vec![stage];
        args.extend(pipeline_args(f, &backend, s(&staged)));
        ok(&args);
    }
    let mask = [s(&whole), s(&staged)];
    assert_same_files(&masked(tree(&whole), &mask), &masked(tree(&staged), &mask));
}

/// Text files with each run-specific string replaced; binary files untouched.
fn masked(t: BTreeMap<PathBuf, Vec<u8>>, mask: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    t.into_iter()
        .map(|(k, v)| match String::from_utf8(v) {
            Ok(text) => {
                let text = mask.iter().fold(text, |t, m| t.replace(m, "<masked>"));
                (k, text.into_bytes())
            }
            Err(e) => (k, e.into_bytes()),
        })
        .collect()
}

fn assert_same_files<T: PartialEq>(a: &BTreeMap<PathBuf, T>, b: &BTreeMap<PathBuf, T>) {
    assert!(!a.is_empty());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let differing: Vec<_> = a
        .iter()
        .filter(|(k, v)| *v != &b[*k])
        .map(|(k, _)| k)
        .collect();
    assert!(differing.is_empty(), "files differ: {differing:?}");
}

#[test]
fn external_backend_matches_builtin() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (inproc, external) = (dir.path().join("inproc"), dir.path().join("external"));
    let builtin = format!("builtin:{}", s(&f.model));
    let served = format!("external:{BIN} backend-serve --bundle {}", s(&f.model));
    for (backend, out) in [(&builtin, &inproc), (&served, &external)] {
        let mut args = vec!["run"];
        args.extend(pipeline_args(f, backend, s(out)));
        ok(&args);
    }
    // Only the recorded backend spec and output directory may differ.
    let mask = [served.as_str(), builtin.as_str(), s(&inproc), s(&external)];
    assert_same_files(
        &masked(tree(&inproc), &mask),
        &masked(tree(&external), &mask),
    );
}

#[test]
fn failing_external_backend_exits_four() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let missing = format!(
        "external:{BIN} backend-serve --bundle {}",
        s(&dir.path().join("none"))
    );
    let mut args = vec!["run"];
    args.extend(pipeline_args(f, &missing, s(dir.path())));
    assert_eq!(ace(&args).status.code(), Some(4));
}
