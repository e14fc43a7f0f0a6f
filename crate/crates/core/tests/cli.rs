mod common;

use std::fs;

use common::*;

#[test]
fn gen_shapes_writes_the_requested_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let msg = shotlab_ok(&[
        "gen-shapes", "--out", out.to_str().unwrap(), "--classes", "30", "--per-class", "200", "--size", "64", "--seed", "1",
    ])
    .unwrap();
    assert!(msg.contains("6000 images in 30 classes"), "{msg}");
    let classes: Vec<_> = fs::read_dir(&out).unwrap().flatten().filter(|e| e.path().is_dir()).collect();
    assert_eq!(classes.len(), 30);
    let pngs: usize = classes.iter().map(|c| fs::read_dir(c.path()).unwrap().count()).sum();
    assert_eq!(pngs, 6000);
    shotlab_ok(&["inspect", out.to_str().unwrap()]).unwrap();
}

#[test]
fn train_and_eval_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    println!("{}", check_reproducibility(dir.path()).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    tiny_cli_fixture(dir.path()).unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    shotlab_ok(&[
        "--config", &p("tiny.toml"), "train", "--data", &p("data"), "--out", &p("t"), "--encoder-ckpt",
        &p("pre/encoder.ckpt"), "--regime", "delayed", "--unfreeze-epoch", "1", "--epochs", "2", "--seed", "11",
    ])
    .unwrap();
    let resolved = shotlab::config::RunConfig::load(&dir.path().join("t/config.toml")).unwrap();
    assert_eq!(resolved.seed, 11);
    assert_eq!(resolved.train.seed, 11);
    assert_eq!(resolved.train.epochs, 2);
    assert_eq!(resolved.train.schedule.decay_epochs, 1);
    assert_eq!(resolved.train.regime.encoder_mode, shotlab::training::EncoderMode::Delayed);
    assert_eq!(resolved.train.regime.unfreeze_epoch, Some(1));
    assert_eq!(resolved.train.val_episodes, 10);
    let lines = fs::read_to_string(dir.path().join("t/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    assert!(!lines.contains("wall_seconds"));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    tiny_cli_fixture(dir.path()).unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    for t in ["1", "3"] {
        shotlab_ok(&[
            "--threads", t, "--config", &p("tiny.toml"), "eval", "--data", &p("data"), "--model",
            &p("pre/encoder.ckpt"), "--predictor", "knn", "--k", "5", "--out", &p(&format!("knn-{t}.json")),
        ])
        .unwrap();
    }
    assert_eq!(fs::read(p("knn-1.json")).unwrap(), fs::read(p("knn-3.json")).unwrap());
}

#[test]
fn sweep_and_inspect_produce_verified_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    tiny_cli_fixture(dir.path()).unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    shotlab_ok(&[
        "--config", &p("tiny.toml"), "sweep", "--data", &p("data"), "--model", &p("pre/encoder.ckpt"),
        "--predictor", "knn", "--k-values", "2,3,5", "--out", &p("sw"),
    ])
    .unwrap();
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows[0], "k,mean_acc,std_err");
    assert_eq!(rows.iter().skip(1).map(|r| r.split(',').next().unwrap()).collect::<Vec<_>>(), ["2", "3", "5"]);
    assert!(!csv.contains('\r'));
    assert!(fs::read_to_string(dir.path().join("sw/sweep.svg")).unwrap().starts_with("<svg"));
    shotlab_ok(&["inspect", &p("sw")]).unwrap();
    let described = shotlab_ok(&["inspect", &p("pre/encoder.ckpt")]).unwrap();
    assert!(described.contains("encoder checkpoint"));

    fs::write(dir.path().join("sw/sweep.csv"), "tampered\n").unwrap();
    let out = shotlab(&["inspect", &p("sw")]).unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let code = |args: &[&str]| shotlab(args).unwrap().status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["bogus-command"]), Some(1));
    assert_eq!(code(&["train", "--no-such-flag"]), Some(1));
    assert_eq!(code(&["inspect", "/definitely/not/here"]), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(code(&["--config", bad.to_str().unwrap(), "pretrain"]), Some(1));

    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"SHLBCKPT").unwrap();
    fs::write(dir.path().join("broken.ckpt.json"), "{}").unwrap();
    assert_eq!(code(&["inspect", ckpt.to_str().unwrap()]), Some(2));
}

#[test]
fn output_root_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_shotlab"))
        .args(["gen-shapes", "--classes", "2", "--per-class", "2", "--size", "8"])
        .env("SHOTLAB_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("shapes/manifest.json").exists());
}
