//! Parameter-free mask decoder standing in for the SAM mask decoder.
//!
//! For each pixel `p` with feature `f_p`, positive prompts score
//! `s+(p) = tau * logsumexp_i(<pos_i, f_p> / tau)`, negative prompts score
//! `s-(p)` the same way, and the mask probability is `sigmoid(s+ - s-)`.
//! Without a negative branch `s-` is zero.

use crate::error::{Error, Result};
use crate::pipeline::PromptSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    tau: f64,
}

impl DecoderConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self { tau })
        } else {
            Err(Error::InvalidArgument(format!("decoder temperature must be positive, got {tau}")))
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { tau: 1.0 }
    }
}

/// Flattens `d×h×w` features to `d×hw`.
fn flat_features(f_sam: &Tensor) -> Result<(Tensor, usize, usize)> {
    let (d, h, w) = f_sam.dims3("decode")?;
    Ok((f_sam.reshape(vec![d, h * w])?, h, w))
}

/// Smoothed max score per pixel for one set of prompts, as a length-`hw` vector.
pub fn scores_on(tape: &mut Tape, prompts: Var, feats: Var, tau: f64) -> Result<Var> {
    let (_, dp) = tape.value(prompts).dims2("decode")?;
    let (df, _) = tape.value(feats).dims2("decode")?;
    if dp != df {
        return Err(Error::shape("decode", format!("prompt width {dp}, feature width {df}")));
    }
    let s = tape.matmul(prompts, feats)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let lse = tape.logsumexp_cols(s)?;
    tape.scale(lse, tau)
}

pub fn decode_on(
    tape: &mut Tape,
    pos_labeled: Var,
    neg_labeled: Option<Var>,
    f_sam: &Tensor,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let (flat, h, w) = flat_features(f_sam)?;
    let feats = tape.constant(flat);
    let pos = scores_on(tape, pos_labeled, feats, cfg.tau)?;
    let logit = match neg_labeled {
        Some(neg) => {
            let neg = scores_on(tape, neg, feats, cfg.tau)?;
            tape.sub(pos, neg)?
        }
        None => pos,
    };
    let prob = tape.sigmoid(logit)?;
    tape.reshape(prob, vec![h, w])
}

/// Per-pixel foreground probability for labeled prompts over `d×h×w` features.
pub fn decode(prompts: &PromptSet, f_sam_q: &Tensor, cfg: &DecoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pos = tape.constant(prompts.pos_labeled.clone());
    let neg = prompts.neg_labeled.as_ref().map(|n| tape.constant(n.clone()));
    let out = decode_on(&mut tape, pos, neg, f_sam_q, cfg)?;
    Ok(tape.value(out).clone())
}

/// `tau * logsumexp_i(<prompt_i, f_p> / tau)` for every pixel.
pub fn scores(prompts: &Tensor, f_sam: &Tensor, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (flat, _, _) = flat_features(f_sam)?;
    let (p, f) = (tape.constant(prompts.clone()), tape.constant(flat));
    let s = scores_on(&mut tape, p, f, tau)?;
    Ok(tape.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompts(pos: Tensor, neg: Option<Tensor>) -> PromptSet {
        PromptSet {
            pos_labeled: pos.clone(),
            pos,
            neg_labeled: neg.clone(),
            neg,
        }
    }

    #[test]
    fn equal_prompts_give_half() {
        let p = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 1.0, 0.3, -0.2]).unwrap();
        let f = Tensor::new(vec![3, 2, 2], (0..12).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
        let out = decode(&prompts(p.clone(), Some(p)), &f, &DecoderConfig::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.shape(), &[2, 2]);
    }

    #[test]
    fn aligned_prompt_saturates() {
        // pixel 0 feature (10, 0), pixel 1 feature (0, 10)
        let f = Tensor::new(vec![2, 1, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let pos = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let neg = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let out = decode(&prompts(pos, Some(neg)), &f, &DecoderConfig::default()).unwrap();
        assert!(out.data()[0] > 0.9999);
        assert!(out.data()[1] < 1e-4);
    }

    #[test]
    fn rejects_width_mismatch_and_bad_tau() {
        let f = Tensor::zeros(vec![3, 2, 2]);
        let p = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            decode(&prompts(p, None), &f, &DecoderConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(DecoderConfig::new(0.0).is_err());
        assert!(DecoderConfig::new(-1.0).is_err());
    }
}
