//! End-to-end checks of the binary: exit codes, determinism of datagen, the
//! seed override, and the run-directory lock.

use std::path::Path;
use std::process::Command;

fn langemb() -> Command {
    Command::new(env!("CARGO_BIN_EXE_langemb"))
}

/// A corpus small enough that datagen runs in well under a second.
const SMALL_CONFIG: &str = r#"{
    "corpus": {
        "n_seen_languages": 3,
        "n_unseen_languages": 1,
        "n_phonemes": 4,
        "n_speakers": 2,
        "train_per_speaker": 4,
        "eval_per_speaker": 2,
        "unseen_train_pool": 4,
        "frames": 20,
        "feat_dim": 8
    },
    "low_resource_budget": 4
}"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

fn dataset_bytes(dir: &Path) -> Vec<u8> {
    let mut bytes = std::fs::read(dir.join("dataset/manifest.json")).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.join("dataset/utt"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    for p in names {
        bytes.extend(std::fs::read(p).unwrap());
    }
    bytes
}

#[test]
fn datagen_same_seed_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    for name in ["a", "b"] {
        let status = langemb()
            .args(["datagen", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(name))
            .args(["--seed", "7"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        dataset_bytes(&tmp.path().join("a")),
        dataset_bytes(&tmp.path().join("b"))
    );
}

#[test]
fn env_seed_override_matches_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let status = langemb()
        .args(["datagen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("flag"))
        .args(["--seed", "123"])
        .status()
        .unwrap();
    assert!(status.success());
    let status = langemb()
        .args(["datagen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("env"))
        .env("LD_RUN_SEED", "123")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        dataset_bytes(&tmp.path().join("flag")),
        dataset_bytes(&tmp.path().join("env"))
    );
}

#[test]
fn stage2_without_stage1_checkpoint_exits_2_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let status = langemb()
        .args(["datagen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let output = langemb()
        .args(["train", "--stage", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("stage1") && stderr.contains(".ldck"),
        "stderr should name the missing checkpoint: {stderr}"
    );
}

#[test]
fn missing_dataset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let output = langemb()
        .args(["pretrain-encoder", "--out"])
        .arg(tmp.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn bad_config_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"not_a_key": 1}"#).unwrap();
    let output = langemb()
        .args(["datagen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn invalid_budget_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let output = langemb()
        .args(["datagen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("run"))
        .args(["--budget", "100000"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), b"").unwrap();
    let output = langemb()
        .args(["datagen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("locked"));
    // the stale lock is untouched so the owner can still release it
    assert!(out.join(".lock").exists());
}

#[test]
fn plot_without_reports_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let output = langemb()
        .args(["plot", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn help_mentions_pipeline_and_toggles() {
    let output = langemb().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("datagen"));
    for sub in ["train", "eval", "ablation", "plot"] {
        assert!(text.contains(sub), "--help missing subcommand {sub}");
    }
    // every config key with its default is listed
    for key in ["stage1_steps", "grl_lambda", "low_resource_budget", "n_seen_languages"] {
        assert!(text.contains(key), "--help missing config key {key}");
    }
    assert!(text.contains("\"seed\": 7"));
    let output = langemb().args(["train", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&output.stdout);
    for flag in ["--sat", "--grl-lambda", "--projection", "--budget", "--seed"] {
        assert!(text.contains(flag), "train --help missing {flag}");
    }
}
