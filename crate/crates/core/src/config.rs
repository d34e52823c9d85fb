//! Run configuration as plain `key = value` text.
//!
//! Every key is required and unknown keys are rejected, so a config file
//! always describes the whole run. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::{Ablation, ModelConfig};
use crate::train::TrainConfig;

pub const KEYS: [&str; 19] = [
    "lr",
    "steps",
    "batch",
    "weight_decay",
    "seed",
    "use_neg_branch",
    "use_sam_fusion",
    "use_cyc_bias",
    "use_prior_mask",
    "n_queries",
    "width",
    "mid_channels",
    "high_channels",
    "canvas_h",
    "canvas_w",
    "stride",
    "tau",
    "encoder_seed",
    "tube_frames",
];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn value<T: FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value `{raw}` for key `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            if map.insert(k, v).is_some() {
                return Err(Error::Config(format!("duplicate key `{k}`")));
            }
        }
        if let Some(missing) = KEYS.iter().find(|k| !map.contains_key(*k)) {
            return Err(Error::Config(format!("missing key `{missing}`")));
        }
        let cfg = Self {
            model: ModelConfig {
                width: value(&map, "width")?,
                n_queries: value(&map, "n_queries")?,
                mid_channels: value(&map, "mid_channels")?,
                high_channels: value(&map, "high_channels")?,
                stride: value(&map, "stride")?,
                encoder_seed: value(&map, "encoder_seed")?,
                tau: value(&map, "tau")?,
                ablation: Ablation {
                    use_neg_branch: value(&map, "use_neg_branch")?,
                    use_sam_fusion: value(&map, "use_sam_fusion")?,
                    use_cyc_bias: value(&map, "use_cyc_bias")?,
                    use_prior_mask: value(&map, "use_prior_mask")?,
                },
            },
            train: TrainConfig {
                lr: value(&map, "lr")?,
                steps: value(&map, "steps")?,
                batch: value(&map, "batch")?,
                weight_decay: value(&map, "weight_decay")?,
                seed: value(&map, "seed")?,
                canvas: (value(&map, "canvas_h")?, value(&map, "canvas_w")?),
                tube_frames: value(&map, "tube_frames")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.model.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        let (h, w) = self.train.canvas;
        let s = self.model.stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!("canvas {h}x{w} is not divisible by stride {s}")));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (m, t, a) = (&self.model, &self.train, &self.model.ablation);
        let values: [String; 19] = [
            t.lr.to_string(),
            t.steps.to_string(),
            t.batch.to_string(),
            t.weight_decay.to_string(),
            t.seed.to_string(),
            a.use_neg_branch.to_string(),
            a.use_sam_fusion.to_string(),
            a.use_cyc_bias.to_string(),
            a.use_prior_mask.to_string(),
            m.n_queries.to_string(),
            m.width.to_string(),
            m.mid_channels.to_string(),
            m.high_channels.to_string(),
            t.canvas.0.to_string(),
            t.canvas.1.to_string(),
            m.stride.to_string(),
            m.tau.to_string(),
            m.encoder_seed.to_string(),
            t.tube_frames.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
