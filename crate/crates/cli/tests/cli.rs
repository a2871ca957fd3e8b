use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use softmoa::data::Dataset;
use softmoa::encoder::Petl;
use softmoa_cli::commands::{analyze, benchmark, gen_data, gradcheck, paramcount, sweep, train};
use softmoa_cli::config::SweepMode;
use softmoa_cli::{Overrides, RunConfig};

const TINY: &[(&str, &str)] = &[
    ("seed", "7"),
    ("model.d_model", "8"),
    ("model.layers", "1"),
    ("model.heads", "2"),
    ("model.freq_bins", "8"),
    ("model.frames", "8"),
    ("model.patch_freq", "4"),
    ("model.patch_time", "4"),
    ("data.classes", "3"),
    ("data.samples_per_class", "4"),
    ("data.test_samples_per_class", "2"),
    ("train.epochs", "2"),
    ("train.batch_size", "4"),
];

/// The tiny config with `extra` lines replacing or adding keys.
fn tiny(extra: &str) -> String {
    let extra: Vec<(&str, &str)> = extra
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let mut out = String::new();
    for (k, v) in TINY {
        if !extra.iter().any(|(e, _)| e == k) {
            out += &format!("{k} = {v}\n");
        }
    }
    for (k, v) in extra {
        out += &format!("{k} = {v}\n");
    }
    out
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn load(dir: &Path, body: &str) -> RunConfig {
    let path = write_cfg(dir, "run.cfg", body);
    RunConfig::load(Some(&path), &Overrides::default()).unwrap()
}

fn softmoa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softmoa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[i].clone()).collect()
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "model.d_modle = 8\n");
    let out = softmoa(&["paramcount", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.d_modle"), "{}", stderr(&out));
}

#[test]
fn zero_benchmark_steps_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "run.cfg", &tiny(""));
    let out = softmoa(&["benchmark", "--config", cfg.to_str().unwrap(), "--steps", "0"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn gradcheck_tiny_model_passes_through_binary() {
    let dir = tempfile::tempdir().unwrap();
    for petl in ["single:2", "dense:2:2", "soft:2:1:2"] {
        let cfg = write_cfg(dir.path(), "run.cfg", &tiny(&format!("petl = {petl}\n")));
        let out_dir = dir.path().join(petl.replace(':', "_"));
        let out = softmoa(&[
            "gradcheck",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{petl}: {}", stderr(&out));
        assert!(out_dir.join("gradcheck.csv").exists());
    }
}

#[test]
fn gradcheck_refuses_large_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "run.cfg", "petl = soft:14:1:1\n");
    let out = softmoa(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn gradcheck_reports_every_trainable_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(dir.path(), &tiny("petl = soft:3:2:2\n"));
    cfg.out = dir.path().join("out");
    let outcome = gradcheck::run(&cfg).unwrap();
    assert!(outcome.passed(), "{outcome}");
    let names: Vec<&str> = outcome.report.params.iter().map(|p| p.name.as_str()).collect();
    assert!(names.iter().any(|n| n.ends_with(".phi")), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("head.")), "{names:?}");
    let numel: usize = outcome.report.params.iter().map(|p| p.numel).sum();
    assert_eq!(numel, outcome.trainable_scalars);
}

#[test]
fn linear_probe_trains_only_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(dir.path(), &tiny("petl = none\n"));
    cfg.out = dir.path().join("out");
    let report = train::run(&cfg).unwrap();
    let t = &report.tasks[0];
    assert_eq!(t.trainable_non_head, 0);
    assert_eq!(t.head, 8 * 3 + 3);
    assert_eq!(t.trainable, t.head);
    assert_eq!(t.frozen_hash_before, t.frozen_hash_after);
}

#[test]
fn csvs_carry_config_hash_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let body = tiny("petl = soft:2:1:2\n");
    let mut a = load(dir.path(), &body);
    a.out = dir.path().join("a");
    let mut b = a.clone();
    b.out = dir.path().join("b");
    train::run(&a).unwrap();
    train::run(&b).unwrap();
    for file in ["summary.csv", "train_log.csv"] {
        let ra = read_csv(&a.out.join(file));
        let rb = read_csv(&b.out.join(file));
        assert_eq!(ra[0][0], "config_hash");
        assert!(ra[1..].iter().all(|r| r[0] == a.hash));
        for col in ["train_accuracy", "test_accuracy"] {
            assert_eq!(column(&ra, col), column(&rb, col), "{file} {col}");
        }
    }
    assert_eq!(
        column(&read_csv(&a.out.join("train_log.csv")), "loss"),
        column(&read_csv(&b.out.join("train_log.csv")), "loss")
    );
}

#[test]
fn hash_changes_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_cfg(dir.path(), "run.cfg", &tiny(""));
    let plain = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
    let seeded = RunConfig::load(
        Some(&path),
        &Overrides {
            seed: Some(8),
            ..Default::default()
        },
    )
    .unwrap();
    assert_ne!(plain.hash, seeded.hash);
    assert_eq!(plain.hash, RunConfig::load(Some(&path), &Overrides::default()).unwrap().hash);
}

#[test]
fn analyze_rejects_non_soft_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "run.cfg", &tiny("petl = dense:2:2\n"));
    let out = softmoa(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn analyze_rejects_checkpoint_without_slots() {
    let dir = tempfile::tempdir().unwrap();
    let mut single = load(dir.path(), &tiny("petl = single:2\n"));
    single.out = dir.path().join("single");
    train::run(&single).unwrap();
    let cfg = write_cfg(dir.path(), "soft.cfg", &tiny("petl = soft:2:1:2\n"));
    let ckpt = dir.path().join("single").join("model.ckpt");
    let out = softmoa(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn analyze_needs_config() {
    let out = softmoa(&["analyze"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn untrained_router_spreads_contribution_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(dir.path(), &tiny("petl = soft:4:1:2\ntrain.epochs = 1\ntrain.lr_max = 0\ntrain.lr_min = 0\n"));
    cfg.out = dir.path().join("out");
    train::run(&cfg).unwrap();
    let report = analyze::run(&cfg).unwrap();
    assert_eq!(report.samples, 6);
    for b in &report.blocks {
        assert_eq!(b.contribution.len(), 4);
        let sum: f64 = b.contribution.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for c in &b.contribution {
            assert!((c - 0.25).abs() < 0.05, "{:?}", b.contribution);
        }
    }
    let rows = read_csv(&cfg.out.join("per_class.csv"));
    assert!(rows.iter().any(|r| r[1] == "mean"));
}

#[test]
fn analyze_layer_selection() {
    let dir = tempfile::tempdir().unwrap();
    let body = tiny("petl = soft:2:1:2\nmodel.layers = 3\ntrain.epochs = 1\n");
    let mut cfg = load(dir.path(), &body);
    cfg.out = dir.path().join("out");
    train::run(&cfg).unwrap();
    let path = write_cfg(dir.path(), "run.cfg", &body);
    let picked = RunConfig::load(
        Some(&path),
        &Overrides {
            out: Some(cfg.out.clone()),
            layers: Some("0,2".into()),
            ..Default::default()
        },
    )
    .unwrap();
    let report = analyze::run(&picked).unwrap();
    let mut layers: Vec<usize> = report.blocks.iter().map(|b| b.layer).collect();
    layers.dedup();
    assert_eq!(layers, vec![0, 2]);
}

#[test]
fn budget_sweep_grows_with_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(
        dir.path(),
        &tiny("petl = soft:1:1:2\nsweep.mode = budget\nsweep.grid = 1, 2, 4\ntrain.epochs = 1\n"),
    );
    cfg.out = dir.path().join("out");
    let report = sweep::run(&cfg).unwrap();
    let params: Vec<usize> = report.rows.iter().map(|r| r.params.unwrap()).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]), "{params:?}");
    assert_eq!(column(&read_csv(&cfg.out.join("sweep.csv")), "params").len(), 3);
}

#[test]
fn adapters_sweep_stays_on_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(
        dir.path(),
        &tiny("petl = soft:8:1:1\nsweep.mode = adapters\nsweep.grid = 1, 2, 4, 8\ntrain.epochs = 1\n"),
    );
    cfg.out = dir.path().join("out");
    let report = sweep::run(&cfg).unwrap();
    let budget = report.budget.unwrap();
    // One adapter would need r > d.
    assert!(!report.rows[0].feasible());
    for r in &report.rows[1..] {
        let Some(Petl::SoftMoa { experts, .. }) = r.petl else {
            panic!("{r:?}")
        };
        // Half a bottleneck step across both blocks.
        let half_step = experts * (2 * 8 + 1);
        let p = r.params.unwrap() as i64;
        assert!((p - budget as i64).unsigned_abs() as usize <= half_step, "{r:?} vs {budget}");
    }
}

#[test]
fn slots_sweep_marks_infeasible_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(
        dir.path(),
        &tiny("petl = soft:2:1:1\nsweep.mode = slots\nsweep.grid = 2/1, 16/4\ntrain.epochs = 1\n"),
    );
    cfg.out = dir.path().join("out");
    let report = sweep::run(&cfg).unwrap();
    assert_eq!(report.mode, SweepMode::Slots);
    assert!(report.rows[0].feasible());
    assert!(!report.rows[1].feasible());
    let rows = read_csv(&cfg.out.join("sweep.csv"));
    assert_eq!(column(&rows, "feasible"), vec!["true", "false"]);
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(dir.path(), &tiny(""));
    cfg.out = dir.path().join("data");
    let written = gen_data::run(&cfg).unwrap();
    assert_eq!(written.len(), 2);
    let back = Dataset::load(&written[0]).unwrap();
    assert_eq!(back.len(), 12);
    assert_eq!(back.n_classes, 3);

    // The written file can stand in for the synthetic source.
    let path = write_cfg(dir.path(), "run.cfg", &tiny("petl = single:2\n"));
    let from_file = RunConfig::load(
        Some(&path),
        &Overrides {
            data: Some(written[0].clone()),
            out: Some(dir.path().join("out")),
            ..Default::default()
        },
    )
    .unwrap();
    let report = train::run(&from_file).unwrap();
    assert_eq!(report.tasks.len(), 1);
    assert!(report.tasks[0].test_accuracy.is_none());
}

#[test]
fn paramcount_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(dir.path(), &tiny("petl = soft:3:2:2\n"));
    cfg.out = dir.path().join("out");
    let report = paramcount::run(&cfg).unwrap();
    // One block beside attention: N adapters of 2dr + r + d, plus Φ of d × N·p.
    let per_block = 3 * (2 * 8 * 2 + 2 + 8) + 8 * 3 * 2;
    assert_eq!(report.trainable_non_head, per_block);
    assert_eq!(report.head, 8 * 3 + 3);
    assert!(cfg.out.join("flops.csv").exists());
}

#[test]
fn benchmark_writes_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load(
        dir.path(),
        &tiny("bench.variants = single:1, dense:4:1, soft:4:1:1\nbench.steps = 20\n"),
    );
    cfg.out = dir.path().join("out");
    let report = benchmark::run(&cfg).unwrap();
    assert_eq!(report.rows.len(), 3);
    for r in &report.rows {
        assert_eq!(r.step_ms.len(), 20);
        assert!(r.median_ms > 0.0);
    }
    let dense = report.row("dense").unwrap();
    let soft = report.row("soft").unwrap();
    // Expert MACs differ by exactly L/p at equal N.
    assert_eq!(dense.flops.expert, soft.flops.expert * 4);
    let steps = read_csv(&cfg.out.join("bench_steps.csv"));
    assert_eq!(steps.len(), 1 + 60);
}
