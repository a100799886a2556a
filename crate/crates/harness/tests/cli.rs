//! Drives the `curl` binary end to end on a tiny budget.

use std::process::Command;

fn curl(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_curl")).args(args).env("RUST_LOG", "warn").output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

const TINY: [&str; 14] = [
    "--profile", "quick", "--env", "pointmass",
    "--set", "train.env_steps=320",
    "--set", "train.initial_steps=16",
    "--set", "train.min_replay=16",
    "--set", "train.batch_size=8",
    "--set", "sac.hidden=16",
];

#[test]
fn print_config_applies_flags_in_order() {
    let (ok, out, err) = curl(&["train", "--print-config", "--profile", "quick", "--seed", "7", "--no-aug-rl", "--set", "sac.lr=0.002"]);
    assert!(ok, "{err}");
    assert!(out.contains("experiment.seed=7\n"));
    assert!(out.contains("ablation.no_aug_rl=true\n"));
    assert!(out.contains("sac.lr=0.002\n"));
    assert!(out.contains("env.render_size=25\n"));
}

#[test]
fn bad_input_is_rejected() {
    assert!(!curl(&["train", "--print-config", "--set", "sac.nope=1"]).0);
    assert!(!curl(&["train", "--print-config", "--no-curl", "--detach-encoder"]).0);
    assert!(!curl(&["train", "--print-config", "--env", "gridchase", "--agent", "sac"]).0);
}

#[test]
fn train_evaluate_probe_export() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let mut args = vec!["train", "--out", run_s];
    args.extend(TINY);
    let (ok, out, err) = curl(&args);
    assert!(ok, "{err}");
    assert!(out.starts_with("env_step,"));
    let ckpt = run.join("checkpoint");
    let ckpt_s = ckpt.to_str().unwrap();

    let (ok, out, err) = curl(&["evaluate", "--checkpoint", ckpt_s, "--episodes", "1"]);
    assert!(ok, "{err}");
    assert!(out.contains("std=0.000000"), "{out}");
    let (ok, _, _) = curl(&["evaluate", "--checkpoint", ckpt_s, "--env", "gridchase"]);
    assert!(!ok);

    let (ok, out, err) = curl(&["probe", "--checkpoint", ckpt_s, "--samples", "200"]);
    assert!(ok, "{err}");
    assert!(out.starts_with("trained_mse="), "{out}");

    let plots = dir.path().join("plots");
    let metrics = run.join("metrics.csv");
    let (ok, out, err) = curl(&["export-plots", metrics.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(ok, "{err}");
    assert!(out.lines().count() > 0);
}

#[test]
fn ablate_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("abl");
    let mut args = vec!["ablate", "--variants", "pixel_sac,state_sac", "--seeds", "0,1", "--out", out_dir.to_str().unwrap()];
    args.extend(TINY);
    let (ok, out, err) = curl(&args);
    assert!(ok, "{err}");
    assert!(out.starts_with("variant,seeds,mean_return,std_return,per_seed\n"), "{out}");
    assert!(out.contains("\npixel_sac,2,") && out.contains("\nstate_sac,2,"), "{out}");
    assert!(out_dir.join("ablation.csv").exists());
    assert!(out_dir.join("state_sac_seed1.csv").exists());
}
