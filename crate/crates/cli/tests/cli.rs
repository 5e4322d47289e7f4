//! End-to-end exercises of the command-line surface on a miniature
//! configuration: happy paths, exit codes, and output artifacts.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU32, Ordering};

static DIR_COUNTER: AtomicU32 = AtomicU32::new(0);

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "vlmdet_cli_{tag}_{}_{}",
        std::process::id(),
        DIR_COUNTER.fetch_add(1, Ordering::SeqCst)
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn vlmdet(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vlmdet"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const TINY: &[&str] = &[
    "--set", "model.d_model=32",
    "--set", "model.n_heads=4",
    "--set", "model.d_embed=16",
    "--set", "model.image_side=16",
    "--set", "model.context_len=16",
    "--set", "data.train_size=16",
    "--set", "data.eval_size=8",
    "--set", "data.categories=4",
    "--set", "train.pretrain_size=16",
    "--set", "train.pretrain_epochs=1",
    "--set", "train.epochs=1",
    "--set", "train.batch=8",
];

fn tiny_args<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    let mut args = rest.to_vec();
    args.extend_from_slice(TINY);
    args
}

fn pretrain_into(dir: &Path) -> PathBuf {
    let ckpt = dir.join("pre.ckpt");
    let out_dir = dir.join("pretrain");
    let (code, _, err) = vlmdet(&tiny_args(&[
        "pretrain",
        "--out",
        ckpt.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "pretrain failed: {err}");
    ckpt
}

#[test]
fn full_pipeline_happy_path() {
    let dir = work_dir("pipeline");
    let backbone = pretrain_into(&dir);

    let adapted = dir.join("adapted.ckpt");
    let adapt_dir = dir.join("adapt");
    let (code, stdout, err) = vlmdet(&tiny_args(&[
        "adapt",
        "--backbone",
        backbone.to_str().unwrap(),
        "--strategy",
        "prompt",
        "--m",
        "4",
        "--out",
        adapted.to_str().unwrap(),
        "--out-dir",
        adapt_dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "adapt failed: {err}");
    assert!(stdout.contains("trained prompt"));
    assert!(adapted.exists());
    assert!(adapt_dir.join("adapt_loss.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(adapt_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "adapt");
    assert!(manifest["outputs"].as_array().unwrap().len() >= 2);

    let eval_dir = dir.join("eval");
    let (code, stdout, err) = vlmdet(&tiny_args(&[
        "eval",
        "--checkpoint",
        adapted.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "eval failed: {err}");
    assert!(stdout.starts_with("dataset,family,n_real,n_fake,ap,acc"));
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 + 1); // header + 3 families + aggregate
    assert!(eval_dir.join("metrics.json").exists());
}

#[test]
fn robustness_fewshot_ablate_and_export() {
    let dir = work_dir("suite");
    let backbone = pretrain_into(&dir);

    let adapted = dir.join("probe.ckpt");
    let (code, _, err) = vlmdet(&tiny_args(&[
        "adapt",
        "--backbone",
        backbone.to_str().unwrap(),
        "--strategy",
        "probe",
        "--out",
        adapted.to_str().unwrap(),
        "--out-dir",
        dir.join("adapt").to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "{err}");

    let rob_dir = dir.join("robustness");
    let (code, _, err) = vlmdet(&tiny_args(&[
        "robustness",
        "--checkpoint",
        adapted.to_str().unwrap(),
        "--out-dir",
        rob_dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "{err}");
    let plot = std::fs::read_to_string(rob_dir.join("robustness_plot.csv")).unwrap();
    // (identity + 2 qualities + 2 sigmas) per family plus header
    assert_eq!(plot.lines().count(), 1 + 5 * 3);

    let few_dir = dir.join("fewshot");
    let (code, stdout, err) = vlmdet(&tiny_args(&[
        "fewshot",
        "--backbone",
        backbone.to_str().unwrap(),
        "--strategy",
        "probe",
        "--k",
        "2",
        "--out-dir",
        few_dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "{err}");
    // 2 per class per category, 4 categories -> 16 samples
    assert!(stdout.contains("on 16 samples"), "{stdout}");

    let abl_dir = dir.join("ablate");
    let (code, stdout, err) = vlmdet(&tiny_args(&[
        "ablate",
        "--backbone",
        backbone.to_str().unwrap(),
        "--strategy",
        "probe",
        "--sizes",
        "8,16",
        "--out-dir",
        abl_dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "{err}");
    assert!(stdout.starts_with("size,map,mean_acc"));
    assert!(abl_dir.join("metrics_8.csv").exists());
    assert!(abl_dir.join("metrics_16.csv").exists());

    let feats = dir.join("features.csv");
    let (code, _, err) = vlmdet(&tiny_args(&[
        "export-features",
        "--checkpoint",
        adapted.to_str().unwrap(),
        "--out",
        feats.to_str().unwrap(),
        "--out-dir",
        dir.join("export").to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&feats).unwrap();
    assert_eq!(text.lines().count(), 3 * 8); // one row per eval image
    let first = text.lines().next().unwrap();
    // source id, label, family, then d_embed values
    assert_eq!(first.split(',').count(), 3 + 16);
}

#[test]
fn gen_data_writes_images_and_manifests() {
    let dir = work_dir("gendata");
    let (code, _, err) = vlmdet(&tiny_args(&[
        "gen-data",
        "--out-dir",
        dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 0, "{err}");
    assert!(dir.join("vocab.txt").exists());
    let train_manifest = std::fs::read_to_string(dir.join("train.txt")).unwrap();
    assert_eq!(train_manifest.lines().count(), 16);
    let ppms = std::fs::read_dir(dir.join("train")).unwrap().count();
    assert_eq!(ppms, 16);
    assert!(dir.join("eval_gan_like").exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = work_dir("missing");
    let (code, _, err) = vlmdet(&tiny_args(&[
        "eval",
        "--checkpoint",
        dir.join("missing.ckpt").to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]));
    assert_eq!(code, 2);
    assert!(err.contains("missing.ckpt"), "{err}");
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let (code, _, err) = vlmdet(&["eval", "--no-such-flag"]);
    assert_eq!(code, 1);
    assert!(err.contains("--checkpoint") || err.contains("unexpected"), "{err}");

    let (code, _, _) = vlmdet(&["--help"]);
    assert_eq!(code, 0);

    let (code, _, _) = vlmdet(&["no-such-command"]);
    assert_eq!(code, 1);
}

#[test]
fn identical_seeds_reproduce_identical_outputs() {
    let dir = work_dir("determinism");
    let backbone = pretrain_into(&dir);
    let run = |tag: &str| -> Vec<u8> {
        let out_dir = dir.join(tag);
        let ckpt = dir.join(format!("{tag}.ckpt"));
        let (code, _, err) = vlmdet(&tiny_args(&[
            "adapt",
            "--backbone",
            backbone.to_str().unwrap(),
            "--strategy",
            "adapter",
            "--out",
            ckpt.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]));
        assert_eq!(code, 0, "{err}");
        std::fs::read(&ckpt).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn model_keys_are_pinned_by_the_checkpoint() {
    let dir = work_dir("pinned");
    let backbone = pretrain_into(&dir);
    let adapt_dir = dir.join("adapt");
    let mut args = tiny_args(&[
        "adapt",
        "--backbone",
        backbone.to_str().unwrap(),
        "--strategy",
        "probe",
        "--out-dir",
        adapt_dir.to_str().unwrap(),
    ]);
    args.extend_from_slice(&["--set", "model.d_model=64"]);
    let (code, _, err) = vlmdet(&args);
    assert_eq!(code, 2);
    assert!(err.contains("fixed by the checkpoint"), "{err}");
}
