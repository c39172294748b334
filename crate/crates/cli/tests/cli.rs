use std::fs;
use std::path::Path;

use resd_cli::{parse_config, replay_stats, run};

const SMALL: &str = "\
dataset=synthetic
model=mlp
T=2
epochs=1
batch_size=8
lr=0.1
hidden=8,8
classes=2
input_shape=4
train_per_class=8
test_per_class=4
seed=3
";

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn file_values_are_taken_verbatim_without_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&write(dir.path(), "a.cfg", SMALL), &[]).unwrap();
    assert_eq!(cfg.timesteps, 2);
    assert_eq!(cfg.epochs, 1);
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.lr, 0.1);
    assert_eq!(cfg.hidden, vec![8, 8]);
    assert_eq!(cfg.seed, 3);
}

#[test]
fn overrides_win_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "a.cfg", SMALL);
    let cfg = parse_config(&path, &["lr=0.2".into(), "T=4".into(), "beta=0.5".into()]).unwrap();
    assert_eq!(cfg.lr, 0.2);
    assert_eq!(cfg.timesteps, 4);
    assert_eq!(cfg.beta, 0.5);
    assert_eq!(cfg.batch_size, 8);
}

#[test]
fn missing_required_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = SMALL
        .lines()
        .filter(|l| !l.starts_with("epochs"))
        .map(|l| format!("{l}\n"))
        .collect();
    let err = parse_config(&write(dir.path(), "a.cfg", &text), &[]).unwrap_err();
    assert!(err.to_string().contains("epochs"), "{err}");
}

#[test]
fn bad_values_and_unknown_keys_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "a.cfg", SMALL);
    let err = parse_config(&path, &["T=four".into()]).unwrap_err();
    assert!(err.to_string().contains("`T`"), "{err}");
    let err = parse_config(&path, &["learning_rate=0.1".into()]).unwrap_err();
    assert!(
        err.to_string().contains("learning_rate") && err.to_string().contains("batch_size"),
        "{err}"
    );
    assert!(parse_config(&path, &["lr".into()]).is_err());
}

#[test]
fn train_writes_only_under_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.cfg", SMALL);
    let out = dir.path().join("run");
    let code = run([
        "resd",
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let mut top: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, ["a.cfg", "run"]);
    for f in ["metrics.csv", "summary.txt", "checkpoint.json", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let code = run([
        "resd",
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let eval = fs::read_to_string(out.join("eval.txt")).unwrap();
    assert!(eval.contains("final_acc=") && eval.contains("samples=8"), "{eval}");

    let stats = replay_stats(&out.join("metrics.csv")).unwrap();
    assert_eq!(stats.reliability.delta.len(), 2);
    assert!(stats.decomposition.abs_diff <= 1e-12);
}

#[test]
fn stats_on_a_crafted_file() {
    let dir = tempfile::tempdir().unwrap();
    // The final head has the lowest loss in iterations 0, 1 and 3.
    let csv = "epoch,iter,ce_1,ce_2,ce_3,kd_1,kd_2\n\
               0,0,0.9,0.8,0.5,0.1,0.2\n\
               0,1,0.7,0.6,0.6,0.3,0.1\n\
               0,2,0.4,0.9,0.8,0.5,0.5\n\
               0,3,1.0,1.2,0.3,0.2,0.4\n";
    let path = write(dir.path(), "m.csv", csv);
    let s = replay_stats(&path).unwrap();
    assert_eq!(s.reliability.delta, vec![true, true, false, true]);
    assert_eq!(s.reliability.eta, 0.25);
    // Good pairs: every kd entry except iteration 2 head 1.
    assert_eq!(s.decomposition.eta_hat, 1.0 / 8.0);
    let mean = (0.1 + 0.2 + 0.3 + 0.1 + 0.5 + 0.5 + 0.2 + 0.4) / 8.0;
    assert!((s.decomposition.lhs - mean).abs() <= 1e-15);
    assert!(s.decomposition.abs_diff <= 1e-12);
    assert_eq!(run(["resd", "stats", path.to_str().unwrap()]), 0);
}

#[test]
fn gradcheck_succeeds() {
    assert_eq!(run(["resd", "gradcheck"]), 0);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.cfg", SMALL);
    let out = dir.path().join("o");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(run(["resd", "train", "--config", c, "--out", o, "--set", "T=x"]), 2);
    assert_eq!(run(["resd", "train", "--config", "/nonexistent.cfg", "--out", o]), 2);
    assert_eq!(run(["resd", "frobnicate"]), 2);
    assert_eq!(
        run(["resd", "profile", "--config", c, "--out", o, "--timesteps", "1,x"]),
        2
    );
    assert_eq!(run(["resd", "stats", dir.path().join("none.csv").to_str().unwrap()]), 1);
}
