//! End-to-end runs of the `dcsam` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dcsam_core::config::RunConfig;
use dcsam_core::io;
use dcsam_core::pipeline;
use dcsam_core::video::MaskTube;

fn dcsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcsam"))
        .args(args)
        .env("DCSAM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 3;
    cfg.train.batch = 2;
    cfg.train.canvas = (16, 16);
    cfg.model.width = 6;
    cfg.model.n_queries = 4;
    let path = dir.join("tiny.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn manifest_outputs(path: &Path) -> Vec<String> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    assert!(v["version"].as_str().unwrap().starts_with('v'));
    assert!(v["finished_unix"].as_f64().unwrap() >= v["started_unix"].as_f64().unwrap());
    v["outputs"].as_array().unwrap().iter().map(|o| o.as_str().unwrap().to_string()).collect()
}

#[test]
fn gen_writes_bundles_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = dcsam(&["gen", "--classes", "3", "--seeds", "2", "--out", p(&out), "--size", "16", "24", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let outputs = manifest_outputs(&out.join("manifest.json"));
    assert_eq!(outputs.len(), 6);
    let ep = io::read_episode(&out.join("class_02").join("episode_0001")).unwrap();
    assert_eq!(ep.class_id, 2);
    assert_eq!(ep.canvas(), (16, 24));

    // same flags, same bytes
    let again = dir.path().join("again");
    assert!(dcsam(&["gen", "--classes", "3", "--seeds", "2", "--out", p(&again), "--size", "16", "24", "--seed", "9"]).status.success());
    let f = Path::new("class_01").join("episode_0000").join("query.dcst");
    assert_eq!(fs::read(out.join(&f)).unwrap(), fs::read(again.join(&f)).unwrap());
}

#[test]
fn train_eval_tube_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = dcsam(&["train", "--config", p(&cfg), "--fold", "1", "--out", p(&run), "--ablate", "no-cyc,no-prior"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for out in manifest_outputs(&run.join("manifest.json")) {
        assert!(Path::new(&out).exists());
    }
    let ck = io::read_checkpoint(&run.join("checkpoint")).unwrap();
    assert!(!ck.config.model.ablation.use_cyc_bias && !ck.config.model.ablation.use_prior_mask);
    assert!(ck.config.model.ablation.use_neg_branch);
    assert_eq!(ck.step, 3);
    let curve = fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("step,loss,lr\n"));

    let report = dir.path().join("report.csv");
    let o = dcsam(&["eval", "--ckpt", p(&run), "--fold", "1", "--out", p(&report), "--episodes", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "fold,class_id,iou");
    assert_eq!(lines.len(), 1 + 4 + 1);
    assert!(lines[5].starts_with("1,mean,"));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    for key in ["miou", "j", "f", "jf"] {
        let v = summary[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    // a one-frame tube is the image pipeline on that episode
    let data = dir.path().join("data");
    assert!(dcsam(&["gen", "--classes", "4", "--seeds", "1", "--out", p(&data), "--size", "16", "16"]).status.success());
    let episode = data.join("class_03").join("episode_0000");
    let one = dir.path().join("tube1");
    let o = dcsam(&["tube", "--ckpt", p(&run), "--episode", p(&episode), "--frames", "1", "--out", p(&one)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred: MaskTube = io::read_tube(&one).unwrap();
    let ep = io::read_episode(&episode).unwrap();
    let direct = pipeline::segment(&ck.config.model.encoder(), &ck.params, &ep, &ck.config.model).unwrap();
    assert_eq!(pred.masks[0], direct);

    let tube = dir.path().join("tube");
    let o = dcsam(&["tube", "--ckpt", p(&run), "--episode", p(&episode), "--frames", "5", "--out", p(&tube), "--motion", "translation"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = io::read_tube(&tube).unwrap();
    pred.validate().unwrap();
    assert_eq!(pred.len(), 5);
    assert_eq!(io::read_tube(&tube.join("gt")).unwrap().len(), 5);
    assert_eq!(fs::read_to_string(tube.join("jf.csv")).unwrap().lines().count(), 1 + 5 + 1);
}

#[test]
fn missing_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    let text: String = RunConfig::default().to_text().lines().filter(|l| !l.starts_with("tau")).map(|l| format!("{l}\n")).collect();
    fs::write(&cfg, text).unwrap();
    let o = dcsam(&["train", "--config", p(&cfg), "--fold", "0", "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = dcsam(&["eval", "--ckpt", p(&missing), "--fold", "0", "--out", p(&dir.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(dcsam(&["oracle", "--suite", "nope"]).status.code(), Some(1));
    assert_eq!(dcsam(&["gen", "--classes", "99", "--seeds", "1", "--out", p(&missing)]).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_dcsam"))
        .args(["oracle", "--suite", "cyc", "--trials", "5"])
        .env("DCSAM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(dcsam(&["--help"]).status.code(), Some(0));
}

#[test]
fn oracle_suites_pass() {
    for (suite, trials) in [("cyc", "1000"), ("softmax", "500"), ("grad", "1")] {
        let o = dcsam(&["oracle", "--suite", suite, "--trials", trials, "--seed", "3"]);
        assert!(o.status.success(), "{suite}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), format!("{suite}: {trials}/{trials} passed"));
    }
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg");
    let parsed = RunConfig::parse(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(parsed, RunConfig::default());
}
