//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dcsam_core::config::RunConfig;
use dcsam_core::episode::{gen_episode, standard_fold, NUM_CLASSES};
use dcsam_core::gradcheck::GradCheckConfig;
use dcsam_core::io::{self, Checkpoint};
use dcsam_core::metrics::{default_tolerance, per_frame_jf};
use dcsam_core::pipeline::{ModelConfig, ModelParams};
use dcsam_core::rng::{self, tags};
use dcsam_core::train::{self, cosine_lr, EvalConfig, EVAL_SEED};
use dcsam_core::video::{make_tube, propagate_first_frame, TubeMotion};
use dcsam_core::{oracle, Error};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{write_json, Manifest};
use crate::{Ablate, CliError, CliResult, Motion, Suite};

fn config_json(cfg: &RunConfig) -> Value {
    let map: serde_json::Map<String, Value> = cfg
        .to_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| {
            let v = v.trim();
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            (k.trim().to_string(), value)
        })
        .collect();
    Value::Object(map)
}

pub fn gen(classes: u32, seeds: u64, out: &Path, size: (usize, usize), seed: u64) -> CliResult<()> {
    if classes == 0 || classes > NUM_CLASSES {
        return Err(CliError::Usage(format!("--classes must be in 1..={NUM_CLASSES}")));
    }
    let mut manifest = Manifest::start(
        "gen",
        json!({ "classes": classes, "seeds": seeds, "size": [size.0, size.1] }),
        seed,
    );
    for class in 0..classes {
        for k in 0..seeds {
            let ep = gen_episode(class, rng::derive(seed, &[tags::GEN, class.into(), k]), size)?;
            let dir = out.join(format!("class_{class:02}")).join(format!("episode_{k:04}"));
            io::write_episode(&dir, &ep)?;
            manifest.output(dir);
        }
    }
    manifest.finish(&out.join("manifest.json"))?;
    eprintln!("wrote {} episodes to {}", u64::from(classes) * seeds, out.display());
    Ok(())
}

pub fn train(config: &Path, fold_index: usize, out: &Path, ablate: &[Ablate]) -> CliResult<()> {
    let text = std::fs::read_to_string(config).map_err(Error::from)?;
    let mut cfg = RunConfig::parse(&text)?;
    for a in ablate {
        let ab = &mut cfg.model.ablation;
        match a {
            Ablate::NoCyc => ab.use_cyc_bias = false,
            Ablate::NoNeg => ab.use_neg_branch = false,
            Ablate::NoSam => ab.use_sam_fusion = false,
            Ablate::NoPrior => ab.use_prior_mask = false,
        }
    }
    cfg.validate()?;
    let fold = standard_fold(fold_index)?;
    let mut manifest = Manifest::start("train", config_json(&cfg), cfg.train.seed);
    let steps = cfg.train.steps;
    let every = (steps / 10).max(1);
    let outcome = train::train_from(
        &cfg.model,
        &cfg.train,
        &fold,
        ModelParams::init(&cfg.model, cfg.train.seed),
        |step, loss| {
            if step % every == 0 || step + 1 == steps {
                eprintln!("step {step:>5} loss {loss:.5}");
            }
        },
    )?;

    let ckpt_dir = out.join("checkpoint");
    io::write_checkpoint(
        &ckpt_dir,
        &Checkpoint {
            config: cfg.clone(),
            params: outcome.params,
            step: outcome.adam.step,
        },
    )?;
    manifest.output(&ckpt_dir);

    let mut csv = String::from("step,loss,lr\n");
    for (step, loss) in outcome.losses.iter().enumerate() {
        let _ = writeln!(csv, "{step},{loss},{}", cosine_lr(cfg.train.lr, step, steps));
    }
    let curve = out.join("loss_curve.csv");
    io::atomic_write(&curve, csv.as_bytes())?;
    manifest.output(curve);
    manifest.finish(&out.join("manifest.json"))
}

/// Accepts either a checkpoint directory or a run directory containing one.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

#[derive(Serialize)]
struct EvalSummary {
    fold: usize,
    episodes_per_class: usize,
    untrained: bool,
    per_class_iou: BTreeMap<u32, f64>,
    miou: f64,
    j: f64,
    f: f64,
    jf: f64,
}

pub fn eval(ckpt: &Path, fold_index: usize, out: &Path, episodes: usize, untrained: bool) -> CliResult<()> {
    let ck = io::read_checkpoint(&checkpoint_dir(ckpt))?;
    let fold = standard_fold(fold_index)?;
    let params = if untrained {
        ModelParams::init(&ck.config.model, ck.config.train.seed)
    } else {
        ck.params
    };
    let eval_cfg = EvalConfig {
        episodes_per_class: episodes,
        seed: EVAL_SEED,
        canvas: ck.config.train.canvas,
    };
    let mut manifest = Manifest::start(
        "eval",
        json!({ "checkpoint": ckpt, "fold": fold_index, "episodes": episodes, "untrained": untrained }),
        EVAL_SEED,
    );
    let report = train::evaluate(&params, &ck.config.model, &fold, &eval_cfg)?;

    let mut csv = String::from("fold,class_id,iou\n");
    for (c, v) in &report.per_class_iou {
        let _ = writeln!(csv, "{fold_index},{c},{v}");
    }
    let _ = writeln!(csv, "{fold_index},mean,{}", report.miou);
    io::atomic_write(out, csv.as_bytes())?;
    manifest.output(out);

    let json_path = out.with_extension("json");
    let summary = EvalSummary {
        fold: fold_index,
        episodes_per_class: episodes,
        untrained,
        per_class_iou: report.per_class_iou.clone(),
        miou: report.miou,
        j: report.j,
        f: report.f,
        jf: report.jf,
    };
    write_json(&json_path, &summary)?;
    manifest.output(&json_path);
    manifest.finish(&out.with_extension("manifest.json"))?;
    println!(
        "fold {fold_index}: mIoU {:.4}  J {:.4}  F {:.4}  J&F {:.4}",
        report.miou, report.j, report.f, report.jf
    );
    Ok(())
}

pub fn tube(ckpt: &Path, episode: &Path, frames: usize, out: &Path, seed: u64, motion: Motion) -> CliResult<()> {
    let ck = io::read_checkpoint(&checkpoint_dir(ckpt))?;
    let ep = io::read_episode(episode)?;
    let model: &ModelConfig = &ck.config.model;
    let motion = match motion {
        Motion::Full => TubeMotion::Full,
        Motion::Translation => TubeMotion::TranslationOnly,
    };
    let mut manifest = Manifest::start(
        "tube",
        json!({ "checkpoint": ckpt, "episode": episode, "frames": frames, "motion": format!("{motion:?}") }),
        seed,
    );
    let gt = make_tube(&ep, frames, seed, motion)?;
    let pred = propagate_first_frame(&model.encoder(), &ck.params, model, &ep.support_img, &ep.support_mask, &gt)?;
    io::write_tube(out, &pred)?;
    manifest.output(out.join("meta.txt"));
    let gt_dir = out.join("gt");
    io::write_tube(&gt_dir, &gt)?;
    manifest.output(&gt_dir);

    let (h, w) = ep.canvas();
    let scores = per_frame_jf(&pred, &gt, default_tolerance(h, w))?;
    let mut csv = String::from("frame,j,f\n");
    for (t, (j, f)) in scores.iter().enumerate() {
        let _ = writeln!(csv, "{t},{j},{f}");
    }
    let n = scores.len() as f64;
    let (mj, mf) = scores.iter().fold((0.0, 0.0), |acc, s| (acc.0 + s.0 / n, acc.1 + s.1 / n));
    let _ = writeln!(csv, "mean,{mj},{mf}");
    let csv_path = out.join("jf.csv");
    io::atomic_write(&csv_path, csv.as_bytes())?;
    manifest.output(&csv_path);
    manifest.finish(&out.join("manifest.json"))?;
    println!("tube of {} frames: J {mj:.4}  F {mf:.4}  J&F {:.4}", scores.len(), (mj + mf) / 2.0);
    Ok(())
}

/// One small random gradient check per trial on an 8x8 episode.
fn grad_suite(trials: usize, seed: u64) -> CliResult<oracle::SuiteOutcome> {
    let model = ModelConfig {
        stride: 1,
        ..ModelConfig::default()
    };
    let mut out = oracle::SuiteOutcome::default();
    for t in 0..trials {
        let s = rng::derive(seed, &[tags::GRADCHECK, t as u64]);
        let ep = gen_episode((s % u64::from(NUM_CLASSES)) as u32, s, (8, 8))?;
        let params = ModelParams::init(&model, s);
        let cfg = GradCheckConfig {
            seed: s,
            ..GradCheckConfig::default()
        };
        let report = train::grad_check(&params, &model, &ep, &cfg)?;
        out.trials += 1;
        if report.passed() {
            out.passed += 1;
        } else {
            for f in report.failures() {
                eprintln!("trial {t}: {} max relative error {:.3e}", f.name, f.max_rel_err);
            }
        }
    }
    Ok(out)
}

pub fn oracle(suite: Suite, trials: usize, seed: u64) -> CliResult<()> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let (name, outcome) = match suite {
        Suite::Cyc => ("cyc", oracle::run_cycle_suite(trials, seed)),
        Suite::Softmax => ("softmax", oracle::run_softmax_suite(trials, seed)),
        Suite::Grad => ("grad", grad_suite(trials, seed)?),
    };
    println!("{name}: {}/{} passed", outcome.passed, outcome.trials);
    if outcome.all_passed() {
        Ok(())
    } else {
        Err(CliError::OracleFailed(format!("{name} suite: {} of {} trials failed", outcome.trials - outcome.passed, outcome.trials)))
    }
}
