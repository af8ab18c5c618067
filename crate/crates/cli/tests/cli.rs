use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ffe_cli::format::{load_flow, load_pair, save_pair, FramePairRecord, Metadata};
use ffe_core::{FlowField, ParticleFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ffe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffe"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const SMALL: &str = "[features]\nstatic_widths = 16, 16\ndynamic_width = 16\nembed_dim = 32\nk = 8\n[loss]\nsmooth_k = 8\n";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Small config, synthetic Beltrami data and a briefly trained model.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        ok(ffe(
            &[
                "synth", "--case", "beltrami", "--count", "4", "--n", "128", "--seed", "5",
                "--out", "data",
            ],
            dir.path(),
        ));
        ok(ffe(
            &[
                "train",
                "--config",
                "small.cfg",
                "--data",
                "data",
                "--out",
                "model.ffe",
                "--epochs",
                "3",
                "--seed",
                "2",
            ],
            dir.path(),
        ));
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }
}

/// `(1/n) sum p_i min_j |x_i + f_i - y_j|^2` by exhaustive search.
fn brute_objective(x: &ParticleFrame, f: &FlowField, p: &[f64], y: &ParticleFrame) -> f64 {
    let mut total = 0.0;
    for (i, xi) in x.positions().iter().enumerate() {
        let q: Vec<f64> = (0..3).map(|d| xi[d] + f.vectors()[i][d]).collect();
        let best = y
            .positions()
            .iter()
            .map(|yj| (0..3).map(|d| (q[d] - yj[d]).powi(2)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        total += p[i] * best;
    }
    total / x.len() as f64
}

fn metric(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn refinement_output_is_consistent() {
    let f = Fixture::new();
    ok(ffe(
        &[
            "synth", "--case", "beltrami", "--count", "1", "--n", "128", "--seed", "77", "--out",
            "test",
        ],
        f.dir.path(),
    ));
    let pair = "test/beltrami_0000.ffp";
    let with = ok(ffe(
        &[
            "estimate",
            "--model",
            "model.ffe",
            "--pair",
            pair,
            "--out",
            "a.fff",
            "--trace",
            "trace.jsonl",
            "--metrics",
            "m.txt",
        ],
        f.dir.path(),
    ));
    ok(ffe(
        &[
            "estimate",
            "--model",
            "model.ffe",
            "--pair",
            pair,
            "--out",
            "b.fff",
            "--no-dve",
        ],
        f.dir.path(),
    ));
    assert_ne!(
        std::fs::read(f.path("a.fff")).unwrap(),
        std::fs::read(f.path("b.fff")).unwrap()
    );

    let trace = std::fs::read_to_string(f.path("trace.jsonl")).unwrap();
    let objective: Vec<f64> = trace
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["objective"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(objective.len(), 151);
    let rec = load_pair(&f.path(pair)).unwrap();
    let (init, p) = load_flow(&f.path("b.fff")).unwrap();
    let (refined, p_refined) = load_flow(&f.path("a.fff")).unwrap();
    assert_eq!(p, p_refined);
    let start = brute_objective(&rec.source, &init, &p, &rec.target);
    let end = brute_objective(&rec.source, &refined, &p, &rec.target);
    assert!(
        (objective[0] - start).abs() <= 1e-9 * start.max(1e-12),
        "{} vs {start}",
        objective[0]
    );
    assert!(end <= start, "{end} > {start}");
    assert_eq!(
        std::fs::read_to_string(f.path("m.txt")).unwrap().trim(),
        with.trim()
    );

    let eval = ok(ffe(
        &["eval", "--pair", pair, "--flow", "a.fff"],
        f.dir.path(),
    ));
    assert_eq!(metric(&eval, "epe"), metric(&with, "epe"));
    assert!(metric(&eval, "mnds") >= 0.0);
    let (flow, conf) = load_flow(&f.path("a.fff")).unwrap();
    assert_eq!(flow.len(), 128);
    assert!(conf.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn estimate_without_ground_truth_prints_nothing() {
    let f = Fixture::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = ParticleFrame::new(
        (0..200)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect(),
    )
    .unwrap();
    let rec = FramePairRecord::new(x.clone(), x, None, Metadata::default()).unwrap();
    save_pair(&rec, &f.path("same.ffp")).unwrap();
    let out = ok(ffe(
        &[
            "estimate",
            "--model",
            "model.ffe",
            "--pair",
            "same.ffp",
            "--out",
            "same.fff",
        ],
        f.dir.path(),
    ));
    assert!(out.is_empty(), "{out}");
    let (flow, _) = load_flow(&f.path("same.fff")).unwrap();
    assert_eq!(flow.len(), 200);
    assert!(flow.to_flat().iter().all(|v| v.is_finite()));
}

#[test]
fn seeded_runs_are_reproducible() {
    let f = Fixture::new();
    ok(ffe(
        &[
            "train",
            "--config",
            "small.cfg",
            "--data",
            "data",
            "--out",
            "again.ffe",
            "--epochs",
            "3",
            "--seed",
            "2",
        ],
        f.dir.path(),
    ));
    assert_eq!(
        std::fs::read(f.path("model.ffe")).unwrap(),
        std::fs::read(f.path("again.ffe")).unwrap()
    );
    let o = Command::new(env!("CARGO_BIN_EXE_ffe"))
        .current_dir(f.dir.path())
        .env("FFE_THREADS", "1")
        .args([
            "train",
            "--config",
            "small.cfg",
            "--data",
            "data",
            "--out",
            "one.ffe",
            "--epochs",
            "3",
            "--seed",
            "2",
        ])
        .output()
        .unwrap();
    ok(o);
    assert_eq!(
        std::fs::read(f.path("model.ffe")).unwrap(),
        std::fs::read(f.path("one.ffe")).unwrap()
    );
}

#[test]
fn input_errors_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "[train]\nepochs = many\n").unwrap();
    for args in [
        vec![
            "estimate",
            "--model",
            "missing.ffe",
            "--pair",
            "missing.ffp",
            "--out",
            "flow.fff",
        ],
        vec!["eval", "--pair", "missing.ffp", "--flow", "missing.fff"],
        vec!["train", "--data", "missing.ffp", "--out", "model.ffe"],
        vec![
            "train",
            "--config",
            "bad.cfg",
            "--data",
            "x.ffp",
            "--out",
            "model.ffe",
        ],
        vec!["synth", "--case", "vortex", "--out", "data"],
        vec!["estimate", "--pair", "p.ffp"],
    ] {
        let o = ffe(&args, d);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let mut left: Vec<_> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    left.sort();
    assert_eq!(left, vec![std::ffi::OsString::from("bad.cfg")]);

    let o = Command::new(env!("CARGO_BIN_EXE_ffe"))
        .current_dir(d)
        .env("FFE_THREADS", "zero")
        .args(["grad-check"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_values_and_flag_overrides() {
    let f = Fixture::new();
    std::fs::write(f.path("one.cfg"), format!("{SMALL}[train]\nepochs = 1\n")).unwrap();
    ok(ffe(
        &[
            "train", "--config", "one.cfg", "--data", "data", "--out", "m1.ffe", "--log",
            "l1.jsonl",
        ],
        f.dir.path(),
    ));
    assert_eq!(
        std::fs::read_to_string(f.path("l1.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    ok(ffe(
        &[
            "train", "--config", "one.cfg", "--data", "data", "--out", "m2.ffe", "--log",
            "l2.jsonl", "--epochs", "2",
        ],
        f.dir.path(),
    ));
    assert_eq!(
        std::fs::read_to_string(f.path("l2.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}
