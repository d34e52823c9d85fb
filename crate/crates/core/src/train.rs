//! Training loop, AdamW, evaluation on held-out classes, and gradient checks.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::StubEncoder;
use crate::episode::{gen_episode, Episode, FoldSplit};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckConfig, GradCheckReport};
use crate::loss;
use crate::metrics::{self, MetricReport};
use crate::pipeline::{self, ModelConfig, ModelParams, ParamVars};
use crate::rng::{self, tags};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::video::{self, TubeMotion};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub canvas: (usize, usize),
    /// When positive, each training query is replaced by a random frame of
    /// a tube of this length built from it.
    pub tube_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 500,
            batch: 4,
            weight_decay: 1e-5,
            seed: 0,
            canvas: (32, 32),
            tube_frames: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be a non-negative number");
        }
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return bad("canvas must be non-empty");
        }
        Ok(())
    }
}

/// Cosine decay from `lr` at step 0 to zero at `steps`.
pub fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return lr;
    }
    let t = step.min(steps) as f64 / steps as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One decoupled-weight-decay Adam step:
    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, wd: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape("AdamState::update", "parameter, gradient and moment counts differ"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let decay = 1.0 - lr * wd;
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::shape("AdamState::update", format!("gradient {:?} for {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                *x = *x * decay - step;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub losses: Vec<f64>,
    pub adam: AdamState,
}

/// Training episode `index` of step `step`: a train class picked from the
/// seed, and an episode seed derived from (seed, class, running index).
pub fn training_episode(cfg: &TrainConfig, fold: &FoldSplit, step: usize, slot: usize) -> Result<Episode> {
    let classes: Vec<u32> = fold.train_classes.iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("fold has no training classes".into()));
    }
    let pick = rng::derive(cfg.seed, &[tags::TRAIN_PICK, step as u64, slot as u64]);
    let class = classes[(pick % classes.len() as u64) as usize];
    let index = (step * cfg.batch + slot) as u64;
    let seed = rng::derive(cfg.seed, &[tags::EPISODE, class.into(), index]);
    let mut ep = gen_episode(class, seed, cfg.canvas)?;
    if cfg.tube_frames > 0 {
        let tube = video::make_tube(&ep, cfg.tube_frames, seed, TubeMotion::Full)?;
        let frame = (rng::derive(seed, &[tags::TUBE]) % cfg.tube_frames as u64) as usize;
        ep.query_img = tube.frames[frame].clone();
        ep.query_mask = tube.masks[frame].clone();
    }
    Ok(ep)
}

fn bind_all(tape: &mut Tape, params: &ModelParams) -> (Vec<Var>, ParamVars) {
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.param((*t).clone())).collect();
    let pv = ParamVars::from_slice(&vars);
    (vars, pv)
}

/// Loss of one episode and its gradient for every parameter tensor.
pub fn episode_gradients(
    encoder: &StubEncoder,
    params: &ModelParams,
    cfg: &ModelConfig,
    ep: &Episode,
) -> Result<(f64, Vec<Tensor>)> {
    let enc = pipeline::encode_episode(encoder, ep)?;
    let mut tape = Tape::new();
    let (vars, pv) = bind_all(&mut tape, params);
    let (prob, _) = pipeline::forward_on(&mut tape, &pv, &enc.features, cfg)?;
    let l = loss::total_on(&mut tape, prob, &enc.query_target)?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).data()[0], vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| if e.is_numerical() { Error::DivergenceDetected { step } } else { e }
}

/// Runs `train.steps` AdamW steps on episodes of the fold's training
/// classes, starting from parameters initialised from `train.seed`.
pub fn train(model: &ModelConfig, train: &TrainConfig, fold: &FoldSplit) -> Result<TrainOutcome> {
    train_from(model, train, fold, ModelParams::init(model, train.seed), |_, _| {})
}

/// Training from given parameters; `on_step(step, loss)` sees every step.
pub fn train_from(
    model: &ModelConfig,
    train: &TrainConfig,
    fold: &FoldSplit,
    mut params: ModelParams,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    let encoder = model.encoder();
    let mut adam = AdamState::new(&params.tensors());
    let mut losses = Vec::with_capacity(train.steps);
    let scale = 1.0 / train.batch as f64;
    for step in 0..train.steps {
        let per_episode: Vec<Result<(f64, Vec<Tensor>)>> = (0..train.batch)
            .into_par_iter()
            .map(|slot| {
                let ep = training_episode(train, fold, step, slot)?;
                episode_gradients(&encoder, &params, model, &ep)
            })
            .collect();
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for item in per_episode {
            let (l, g) = item.map_err(divergence(step))?;
            total += l;
            for (acc, gk) in grads.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gk.data()) {
                    *a += b * scale;
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::DivergenceDetected { step });
        }
        let lr = cosine_lr(train.lr, step, train.steps);
        adam.update(&mut params.tensors_mut(), &grads, lr, train.weight_decay)?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainOutcome { params, losses, adam })
}

/// Trailing moving average with the given window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Evaluation protocol: a fixed set of episodes per held-out class.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes_per_class: usize,
    pub seed: u64,
    pub canvas: (usize, usize),
}

pub const EVAL_SEED: u64 = 0x5EED_E7A1;

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_class: 200,
            seed: EVAL_SEED,
            canvas: (32, 32),
        }
    }
}

pub fn eval_episode(cfg: &EvalConfig, class: u32, index: usize) -> Result<Episode> {
    let seed = rng::derive(cfg.seed, &[tags::EVAL, class.into(), index as u64]);
    gen_episode(class, seed, cfg.canvas)
}

/// Class, intersection, union, IoU and boundary F of one episode.
type EpisodeScore = (u32, u64, u64, f64, f64);

/// Scores an arbitrary predictor on the evaluation episodes of `classes`.
/// Per-class IoU pools intersections and unions over the class's episodes;
/// J and F average per-episode IoU and boundary F.
pub fn evaluate_with<P>(classes: &[u32], cfg: &EvalConfig, predict: P) -> Result<MetricReport>
where
    P: Fn(&Episode) -> Result<Tensor> + Sync,
{
    if classes.is_empty() || cfg.episodes_per_class == 0 {
        return Err(Error::EmptyReport);
    }
    let tol = metrics::default_tolerance(cfg.canvas.0, cfg.canvas.1);
    let jobs: Vec<(u32, usize)> = classes
        .iter()
        .flat_map(|&c| (0..cfg.episodes_per_class).map(move |i| (c, i)))
        .collect();
    let scored: Vec<Result<EpisodeScore>> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let ep = eval_episode(cfg, c, i)?;
            let pred = predict(&ep)?;
            let (inter, union) = metrics::overlap(&pred, &ep.query_mask)?;
            let j = metrics::iou(&pred, &ep.query_mask)?;
            let f = metrics::boundary_f(&pred, &ep.query_mask, tol)?;
            Ok((c, inter, union, j, f))
        })
        .collect();
    let mut pooled: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    let (mut j_sum, mut f_sum) = (0.0, 0.0);
    for item in scored {
        let (c, inter, union, j, f) = item?;
        let e = pooled.entry(c).or_default();
        e.0 += inter;
        e.1 += union;
        j_sum += j;
        f_sum += f;
    }
    let per_class = pooled
        .into_iter()
        .map(|(c, (i, u))| (c, if u == 0 { 1.0 } else { i as f64 / u as f64 }))
        .collect();
    let n = jobs.len() as f64;
    MetricReport::new(per_class, j_sum / n, f_sum / n)
}

/// Held-out-class metrics of `params` on the fold's test classes.
pub fn evaluate(params: &ModelParams, model: &ModelConfig, fold: &FoldSplit, cfg: &EvalConfig) -> Result<MetricReport> {
    let encoder = model.encoder();
    let classes: Vec<u32> = fold.test_classes.iter().copied().collect();
    evaluate_with(&classes, cfg, |ep| pipeline::segment(&encoder, params, ep, model))
}

/// Finite-difference check of every parameter tensor against the tape
/// gradient of the total loss on one episode.
pub fn grad_check(params: &ModelParams, model: &ModelConfig, ep: &Episode, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let encoder = model.encoder();
    let enc = pipeline::encode_episode(&encoder, ep)?;
    gradcheck::check_gradients(
        &params.named(),
        |tape, vars| {
            let pv = ParamVars::from_slice(vars);
            let (prob, _) = pipeline::forward_on(tape, &pv, &enc.features, model)?;
            loss::total_on(tape, prob, &enc.query_target)
        },
        cfg,
    )
}
