use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn jointok(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointok")).env("JOINTOK_RUN_ROOT", root).args(args).output().expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> PathBuf {
    let out = jointok(root, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A few steps of the tiny preset with enough images for Fréchet statistics.
fn trained(root: &Path) -> PathBuf {
    ok(root, &["train", "--preset", "tiny", "--set", "dataset_size=300", "--steps", "4", "--checkpoint-every", "2", "--name", "base"])
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path());
    for f in ["manifest.json", "config.toml", "metrics.jsonl", "last.ckpt", "step_000002.ckpt", "step_000004.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["status"], "completed");
    assert_eq!(m["config"]["dataset_size"], 300);
    assert_eq!(m["dataset_fingerprint"].as_str().unwrap().len(), 64);
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3]);
    assert!(log.lines().all(|l| l.contains("\"lr\"") && l.contains("\"loss/ntp\"")));
}

#[test]
fn resume_after_a_crash_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let run = trained(root);
    let full = std::fs::read(run.join("last.ckpt")).unwrap();
    let full_log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    // crash state: checkpoint from step 2, one record past it, a stale lock
    std::fs::copy(run.join("step_000002.ckpt"), run.join("last.ckpt")).unwrap();
    let partial: Vec<&str> = full_log.lines().take(3).collect();
    std::fs::write(run.join("metrics.jsonl"), partial.join("\n") + "\n").unwrap();
    std::fs::write(run.join(".lock"), "4242").unwrap();
    let out = jointok(root, &["train", "--resume", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "stale lock must be removed by hand");
    std::fs::remove_file(run.join(".lock")).unwrap();
    ok(root, &["train", "--resume", run.to_str().unwrap(), "--checkpoint-every", "2"]);
    assert_eq!(std::fs::read(run.join("last.ckpt")).unwrap(), full);
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(), full_log);
}

#[test]
fn sampling_is_deterministic_given_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ckpt = trained(root).join("last.ckpt");
    let c = ckpt.to_str().unwrap();
    let args = |name: &'static str, seed: &'static str| ["sample", "--ckpt", c, "--classes", "0,1,2", "--guidance", "cfg:1.0", "--seed", seed, "--name", name];
    let a = ok(root, &args("a", "7"));
    let b = ok(root, &args("b", "7"));
    let other = ok(root, &args("c", "8"));
    assert_eq!(std::fs::read(a.join("samples.png")).unwrap(), std::fs::read(b.join("samples.png")).unwrap());
    assert_eq!(json(&a.join("ids.json")), json(&b.join("ids.json")));
    assert_ne!(json(&a.join("ids.json")), json(&other.join("ids.json")));
    assert_eq!(json(&a.join("ids.json"))["ids"].as_array().unwrap().len(), 3);
}

#[test]
fn diagnose_histogram_counts_every_validation_token() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let run = trained(root);
    let d = ok(root, &["diagnose", "--ckpt", run.join("last.ckpt").to_str().unwrap()]);
    let report = json(&d.join("collapse.json"));
    let total: u64 = report["histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    // tiny: L = 8 tokens, 300 images with a 0.25 validation fraction
    assert_eq!(total, 8 * 75);
    assert_eq!(report["total_tokens"].as_u64(), Some(total));
    for f in ["frequency.csv", "frequency.png", "pca.csv", "pca.png", "loss_curves.csv", "loss_curves.png"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(d.join("frequency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 32);
}

#[test]
fn eval_reproduces_its_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let c = trained(root).join("last.ckpt");
    let args = |name: &'static str| ["eval", "--ckpt", c.to_str().unwrap(), "--samples", "130", "--name", name].map(String::from);
    let a = ok(root, &args("e1").each_ref().map(|s| s.as_str()));
    let b = ok(root, &args("e2").each_ref().map(|s| s.as_str()));
    let m = json(&a.join("metrics.json"));
    assert_eq!(m, json(&b.join("metrics.json")));
    assert!(m["generation"]["gfid"].as_f64().unwrap().is_finite());
    assert!(m["reconstruction"]["psnr"].as_f64().unwrap().is_finite());
}

#[test]
fn ordering_records_the_permutation() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let c = trained(root).join("last.ckpt");
    let o = ok(root, &["ordering", "--ckpt", c.to_str().unwrap(), "--order", "reversed", "--steps", "3", "--samples", "130"]);
    let m = json(&o.join("manifest.json"));
    assert_eq!(m["subcommand"], "ordering");
    assert_eq!(m["extra"]["order"], "reversed");
    let perm: Vec<u64> = m["extra"]["permutation"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(perm, (0..8).rev().collect::<Vec<_>>());
    assert_eq!(json(&o.join("ordering.json"))["tokenizer_unchanged"], true);
}

#[test]
fn exit_codes_separate_usage_from_success() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(jointok(root, &["--help"]).status.code(), Some(0));
    assert_eq!(jointok(root, &["train", "--no-such-flag"]).status.code(), Some(1));
    let typo = jointok(root, &["train", "--preset", "tiny", "--set", "lambda_ntpp=1"]);
    assert_eq!(typo.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("lambda_ntp"));
    assert_eq!(jointok(root, &["sample", "--ckpt", "missing.ckpt", "--classes", "0"]).status.code(), Some(1));
    let c = trained(root).join("last.ckpt");
    let auto = jointok(root, &["sample", "--ckpt", c.to_str().unwrap(), "--classes", "0", "--guidance", "auto:1.5"]);
    assert_eq!(auto.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&auto.stderr).contains("auxiliary"));
}

#[test]
fn non_finite_training_exits_with_internal_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = jointok(root, &["train", "--preset", "tiny", "--steps", "3", "--set", "lr=1e300", "--name", "nan"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let run = root.join("nan");
    assert!(run.join("abort.ckpt").exists());
    assert_eq!(json(&run.join("manifest.json"))["status"], "failed");
}

#[test]
fn locked_and_existing_runs_are_left_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let run = trained(root);
    let before = std::fs::read(run.join("manifest.json")).unwrap();
    // a second run with the same name must not overwrite the first
    let again = jointok(root, &["train", "--preset", "tiny", "--steps", "1", "--name", "base"]);
    assert_eq!(again.status.code(), Some(1));
    std::fs::write(run.join(".lock"), "1").unwrap();
    let locked = jointok(root, &["train", "--resume", run.to_str().unwrap()]);
    assert_eq!(locked.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&locked.stderr).contains("locked"));
    assert_eq!(std::fs::read(run.join("manifest.json")).unwrap(), before);
}
