use std::path::Path;
use std::process::{Command, Output};

fn crossfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossfuse")).args(args).output().expect("spawn crossfuse")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "[run]\niterations = 2\nenvs = 2\neval_every = 2\neval_runs = 2\neval_episodes = 1\n\
[env]\nhorizon = 40\n[ppo]\nhorizon = 40\nsamples_per_iter = 64\nminibatch = 32\nepochs = 2\n";

#[test]
fn train_eval_stats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("runs");
    let o = crossfuse(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        "proprio-only",
        "--seed",
        "3,4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("proprio-only,")).count(), 2);
    for s in ["seed-3", "seed-4"] {
        assert!(out.join(s).join("final.xfck").exists());
    }

    let ckpt = out.join("seed-3").join("final.xfck");
    let o = crossfuse(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--scenario", "dynamic-obstacle", "--runs", "2", "--episodes", "1", "--seed", "0..2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("iter,scenario,runs,return_mean"));
    assert!(text.contains(",dynamic-obstacle,4,"), "{text}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("zero-shot"));

    let o = crossfuse(&["stats", out.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("# 2 runs"));
    assert!(out.join("stats.csv").exists());
}

#[test]
fn random_baseline_and_presets() {
    let o = crossfuse(&["eval", "--desk", "--runs", "2", "--episodes", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains(",thin-obstacle,2,"));
    let o = crossfuse(&["eval", "--paper-config", "--desk"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_and_bench() {
    let o = crossfuse(&["gradcheck", "--component", "mutation"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("mutated matmul adjoint"));
    let o = crossfuse(&["gradcheck", "--component", "pipeline", "--seed", "4"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("pipeline(seed 4)"));

    let dir = tempfile::tempdir().unwrap();
    let o = crossfuse(&["bench", "--grid", "8,16", "--repeats", "2", "--width", "16", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    // the binary installs the counting allocator
    assert!(!String::from_utf8_lossy(&o.stderr).contains("not instrumented"));
    let slopes = std::fs::read_to_string(Path::new(dir.path()).join("bench_slopes.csv")).unwrap();
    assert_eq!(slopes.lines().count(), 5);
}

#[test]
fn bad_arguments_fail_cleanly() {
    for args in [
        &["train", "--variant", "transformer"][..],
        &["eval", "--checkpoint", "/nonexistent.xfck"],
        &["gradcheck", "--component", "everything"],
        &["train", "--seed", "x"],
    ] {
        let o = crossfuse(args);
        assert!(!o.status.success(), "{args:?}");
    }
}
