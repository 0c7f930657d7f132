use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pgru(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgru"))
        .args(args)
        .current_dir(dir)
        .env_remove("PGRU_WORKERS")
        .output()
        .expect("run pgru")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_TRAIN: &[&str] = &[
    "train",
    "--synthetic",
    "--synth-steps",
    "32",
    "--synth-dim",
    "3",
    "--synth-train-per-class",
    "3",
    "--synth-test-per-class",
    "1",
    "--hidden",
    "6",
    "--layers",
    "1",
    "--batch",
    "6",
    "--epochs",
    "2",
    "--lr",
    "0.01",
    "--levels",
    "2",
];

#[test]
fn demo_prints_the_table_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgru(&["demo", "--steps", "128", "--dim", "10", "--cf", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("Two Level MG"));
    let residuals: Vec<f64> = lines
        .map(|l| l.rsplit("residual = ").next().unwrap().parse().unwrap())
        .collect();
    assert!(residuals.windows(2).all(|w| w[1] < w[0]));
    assert!(*residuals.last().unwrap() < 1e-12);
}

#[test]
fn demo_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = pgru(&["demo", "--seed", "7", "--steps", "64", "--dim", "4"], dir.path());
    let b = pgru(&["demo", "--seed", "7", "--steps", "64", "--dim", "4"], dir.path());
    assert_eq!(stdout(&a), stdout(&b));
    let c = pgru(&["demo", "--seed", "8", "--steps", "64", "--dim", "4"], dir.path());
    assert_ne!(stdout(&a), stdout(&c));
}

#[test]
fn demo_writes_spectrum_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgru(&["demo", "--spectrum", "spec.csv", "--records", "rec.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let spec = fs::read_to_string(dir.path().join("spec.csv")).unwrap();
    assert!(spec.starts_with("stage,component,wavenumber,magnitude\n"));
    // 10 components × (65 + 65 + 17) wavenumbers
    assert_eq!(spec.lines().count(), 1 + 10 * (65 + 65 + 17));
    let rec = fs::read_to_string(dir.path().join("rec.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(rec.lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 1);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pgru(&["demo", "--cf", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(pgru(&["demo", "--steps", "30"], dir.path()).status.code(), Some(2));
    assert_eq!(pgru(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(pgru(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(pgru(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn unreadable_data_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgru(&["train", "--data", "missing.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.csv"));
    fs::write(dir.path().join("bad.csv"), "seq_id,t,f1,label\n0,0,1.0,0\n0,1,oops,0\n").unwrap();
    let o = pgru(&["train", "--data", "bad.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3"));
}

#[test]
fn non_finite_loss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL_TRAIN.to_vec();
    // explicit Euler far beyond its stability limit
    args.extend(["--mode", "serial-classic", "--dt", "1e200"]);
    let o = pgru(&args, dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_metrics_and_checkpoint_then_infers() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL_TRAIN.to_vec();
    args.extend(["--mode", "mgrit", "--metrics", "m.jsonl", "--checkpoint", "m.ckpt", "--standardize"]);
    let o = pgru(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let rec: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "train_loss", "train_accuracy", "test_accuracy", "fwd_residual", "bwd_residual", "wall_seconds"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }
    assert!(dir.path().join("m.ckpt").exists());
    assert!(dir.path().join("m.ckpt.norm.json").exists());

    let o = pgru(
        &[
            "infer", "--checkpoint", "m.ckpt", "--synthetic", "--synth-steps", "32", "--synth-dim", "3",
            "--synth-train-per-class", "3", "--synth-test-per-class", "1", "--mode", "serial", "--output", "p.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let preds = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 6);
    assert!(String::from_utf8_lossy(&o.stderr).contains("accuracy"));
}

#[test]
fn serial_modes_train() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["serial-classic", "serial-implicit"] {
        let mut args = SMALL_TRAIN.to_vec();
        args.extend(["--mode", mode, "--metrics", "m.jsonl"]);
        assert_eq!(pgru(&args, dir.path()).status.code(), Some(0));
        let line = fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
        let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert!(rec["fwd_residual"].is_null());
    }
}

#[test]
fn metrics_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let strip = |s: String| -> Vec<serde_json::Value> {
        s.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_seconds");
                v
            })
            .collect()
    };
    let mut runs = Vec::new();
    for w in ["1", "4"] {
        let mut args = SMALL_TRAIN.to_vec();
        args.extend(["--mode", "mgrit", "--workers", w, "--metrics", "m.jsonl"]);
        assert_eq!(pgru(&args, dir.path()).status.code(), Some(0));
        runs.push(strip(fs::read_to_string(dir.path().join("m.jsonl")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn workers_env_var_sets_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pgru"))
        .args(["demo", "--steps", "64", "--dim", "3"])
        .env("PGRU_WORKERS", "0")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# demo settings\nsteps = 64\ndim = 3\ndemo.seed = 5\n").unwrap();
    let from_cfg = pgru(&["--config", "run.cfg", "demo"], dir.path());
    let explicit = pgru(&["demo", "--steps", "64", "--dim", "3", "--seed", "5"], dir.path());
    assert_eq!(from_cfg.status.code(), Some(0));
    assert_eq!(stdout(&from_cfg), stdout(&explicit));
    let overridden = pgru(&["--config", "run.cfg", "demo", "--seed", "6"], dir.path());
    let want = pgru(&["demo", "--steps", "64", "--dim", "3", "--seed", "6"], dir.path());
    assert_eq!(stdout(&overridden), stdout(&want));

    fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(pgru(&["--config", "bad.cfg", "demo"], dir.path()).status.code(), Some(2));
}

#[test]
fn bench_emits_requested_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgru(
        &["bench", "--lengths", "16,32", "--workers", "1,2", "--hidden", "4", "--layers", "1", "--batch", "2", "--levels", "2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("steps,mode,workers,seconds,speedup,loss,grad_max_abs\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn convergence_reports_depths_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgru(&["convergence", "--hidden", "8", "--batch", "2", "--iters", "4"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let err = String::from_utf8_lossy(&o.stderr);
    for want in ["c_f=2: 6 levels", "c_f=4: 3 levels", "c_f=8: 2 levels"] {
        assert!(err.contains(want), "{err}");
    }
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1 + 3 * 4);
    for cf in ["2", "4", "8"] {
        let fwd: Vec<f64> = text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next() == Some(cf))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        assert!(fwd.windows(2).all(|w| w[1] < w[0]), "cf {cf}: {fwd:?}");
    }
}
