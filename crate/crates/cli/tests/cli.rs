use std::path::Path;
use std::process::Command;

use attnreuse_cli::commands::{check_param_bound, MAX_GRADCHECK_PARAMS};
use attnreuse_cli::{ablate, analyze, distill, sweep_ratio, RunConfig};
use attnreuse_core::checkpoint;
use attnreuse_core::distill::{LossVariant, Student};
use attnreuse_core::Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnreuse"))
}

fn small(out: &Path) -> RunConfig {
    let text = format!(
        r#"
out_dir = "{}"
[teacher]
layers = 2
width = 8
heads = 2
ffn_width = 16
[teacher.pretrain]
steps = 3
batch = 2
[student]
layers = 2
width = 6
heads = 2
ffn_width = 12
pattern = "2by1"
[distill]
steps = 5
batch = 2
[data]
n = 24
d_in = 4
"#,
        out.display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn analyze_reports_baseline_and_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let names: Vec<String> = ["2by6", "3by4", "6by2"].iter().map(|s| s.to_string()).collect();
    let r = analyze(&cfg, &names).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.rows[0].pattern, "none");
    assert_eq!(r.rows[0].param_delta, 0);
    let deltas: Vec<f64> = r.rows[1..].iter().map(|x| x.param_delta as f64 / 1e6).collect();
    for (d, want) in deltas.iter().zip([2.24, 2.99, 3.73]) {
        assert!((d - want).abs() < 0.03, "{d} vs {want}");
    }
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("analysis.json").exists());

    let only = analyze(&cfg, &[]).unwrap();
    assert_eq!(only.rows.len(), 1);
}

#[test]
fn analyze_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["analyze", "--pattern", "5by3", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("5by3"));

    let out = bin()
        .args(["analyze", "--pattern", "2by6", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("{1,3,5,7,9,11}"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[student]\nlayerz = 4\n").unwrap();
    let out = bin().args(["distill", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("layerz") && err.contains("line 2"), "{err}");

    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(
        bin()
            .args(["distill", "--steps", "many"])
            .output()
            .unwrap()
            .status
            .code(),
        Some(1)
    );
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn zero_steps_write_the_initial_student() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.distill.steps = 0;
    let report = distill(&cfg, false).unwrap();
    assert!(report.log.is_empty());
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");
    assert_eq!(
        std::fs::read_to_string(dir.path().join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
    let saved = checkpoint::load_student(&report.checkpoint).unwrap();
    let scfg = cfg.student_config();
    let fresh = Student::init(
        &scfg,
        &cfg.student.pattern.resolve(2).unwrap(),
        &mut Rng::with_stream(0, 1),
    )
    .unwrap();
    assert_eq!(saved.params, fresh.params);
}

#[test]
fn repeated_runs_give_identical_metrics_and_snapshot_replays() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    distill(&small(a.path()), true).unwrap();
    let snap = RunConfig::load(&a.path().join("config.toml")).unwrap();
    let mut replay = snap.clone();
    replay.out_dir = b.path().to_path_buf();
    distill(&replay, false).unwrap();
    for f in ["metrics.jsonl", "metrics.csv", "student.ckpt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(a.path().join("metrics.svg").exists());
}

#[test]
fn ablation_rows_share_masks() {
    let dir = tempfile::tempdir().unwrap();
    let r = ablate(&small(dir.path()), false).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert!(r.masks_identical);
    let mo = r.row(LossVariant::MaskedOnly).unwrap();
    assert!(mo.log.iter().all(|m| m.unmasked.iter().all(|&u| u == 0.0)));
    let full = r.row(LossVariant::Full).unwrap();
    let clean = r.row(LossVariant::UnmaskedFromCleanInput).unwrap();
    assert_eq!(full.log[0].masked, clean.log[0].masked);
    assert_ne!(full.log[0].unmasked, clean.log[0].unmasked);
}

#[test]
fn sweep_rows_and_degenerate_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.data.n = 64;
    let r = sweep_ratio(&cfg, &[0.4, 0.6, 0.8], true, true, false).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert!(r.failed().is_none());
    let sch = &r.rows[3].ratios;
    assert!(sch.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!((sch[0], *sch.last().unwrap()), (0.4, 0.8));
    let serial = sweep_ratio(&cfg, &[0.4, 0.6, 0.8], true, false, false).unwrap();
    for (p, s) in r.rows.iter().zip(&serial.rows) {
        assert_eq!(p.final_total, s.final_total);
    }

    let degenerate = sweep_ratio(&cfg, &[0.99], false, false, false).unwrap();
    assert!(degenerate.failed().is_some());
    let out = bin()
        .args([
            "sweep-ratio",
            "--ratios",
            "0.99",
            "--steps",
            "2",
            "--n",
            "64",
            "--out-dir",
        ])
        .arg(dir.path().join("cli"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_bound_is_inclusive() {
    assert!(check_param_bound(MAX_GRADCHECK_PARAMS).is_ok());
    let err = check_param_bound(MAX_GRADCHECK_PARAMS + 1).unwrap_err();
    assert!(err.to_string().contains("50000"));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn gradcheck_exit_codes() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/gradcheck.toml");
    let dir = tempfile::tempdir().unwrap();
    let ok = bin()
        .args(["gradcheck", "--config", cfg, "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    let bad = bin()
        .args(["gradcheck", "--config", cfg, "--corrupt-backward", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let large = dir.path().join("large.toml");
    std::fs::write(&large, "[student]\nwidth = 64\nffn_width = 256\n").unwrap();
    let big = bin()
        .args(["gradcheck", "--config"])
        .arg(&large)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(big.status.code(), Some(1), "{}", String::from_utf8_lossy(&big.stdout));
}
