//! Prompt generation: prior mask, feature fusion, the positive and negative
//! branches, the pseudo query mask and the final prompt refinement.
//!
//! Per branch `b` with support mask `M_b` (`M_s` for the positive branch,
//! `1 - M_s` for the negative one):
//!
//! 1. `F_s' = conv1x1([F_s; avg(F_s, M_b); F_sam_s])` and
//!    `F_q' = conv1x1([F_q; avg(F_s, M_b); F_sam_q; prior(M_b)])`
//! 2. `Q_b_med = QCycAttn_support(Q_b_init, F_s', M_b)`
//! 3. the decoder turns the labeled mediate prompts into a pseudo query mask
//! 4. `Q_b' = SelfAttn(QCycAttn_query(Q_b_med, F_q', pseudo_b))`
//!
//! The attention blocks are shared between branches; the branches differ in
//! their mask, their initial queries and their label embedding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{self, AttentionBlock, BlockVars};
use crate::decoder::{self, DecoderConfig};
use crate::encoder::{EncodedImage, EncoderConfig, StubEncoder};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::mask;
use crate::rng::{self, tags};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative noise on the near-identity attention projections at init.
pub const ATTN_INIT_NOISE: f64 = 0.3;

pub const POOL_EPS: f64 = 1e-6;
/// Similarity ranges below this count as constant in the prior mask.
pub const PRIOR_FLAT_RANGE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_neg_branch: bool,
    pub use_sam_fusion: bool,
    pub use_cyc_bias: bool,
    pub use_prior_mask: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_neg_branch: true,
            use_sam_fusion: true,
            use_cyc_bias: true,
            use_prior_mask: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Prompt and fused-feature width; also the SAM-like feature width.
    pub width: usize,
    pub n_queries: usize,
    pub mid_channels: usize,
    pub high_channels: usize,
    pub stride: usize,
    pub encoder_seed: u64,
    pub tau: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            n_queries: 25,
            mid_channels: 16,
            high_channels: 16,
            stride: 2,
            encoder_seed: 1234,
            tau: 1.0,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: self.encoder_seed,
            mid_channels: self.mid_channels,
            high_channels: self.high_channels,
            sam_channels: self.width,
            stride: self.stride,
        }
    }

    pub fn encoder(&self) -> StubEncoder {
        StubEncoder::new(self.encoder_config())
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        DecoderConfig::new(self.tau)
    }

    fn support_fusion_channels(&self) -> usize {
        2 * self.mid_channels + if self.ablation.use_sam_fusion { self.width } else { 0 }
    }

    fn query_fusion_channels(&self) -> usize {
        self.support_fusion_channels() + usize::from(self.ablation.use_prior_mask)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_queries == 0 || self.mid_channels == 0 || self.high_channels == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        DecoderConfig::new(self.tau).map(|_| ())
    }
}

/// All trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub fusion_support_w: Tensor,
    pub fusion_support_b: Tensor,
    pub fusion_query_w: Tensor,
    pub fusion_query_b: Tensor,
    pub attn_support: AttentionBlock,
    pub attn_query: AttentionBlock,
    pub attn_self: AttentionBlock,
    pub q_pos_init: Tensor,
    pub q_neg_init: Tensor,
    pub e_pos: Tensor,
    pub e_neg: Tensor,
}

pub const PARAM_NAMES: [&str; 17] = [
    "fusion_support_w",
    "fusion_support_b",
    "fusion_query_w",
    "fusion_query_b",
    "attn_support_wq",
    "attn_support_wk",
    "attn_support_wv",
    "attn_query_wq",
    "attn_query_wk",
    "attn_query_wv",
    "attn_self_wq",
    "attn_self_wk",
    "attn_self_wv",
    "q_pos_init",
    "q_neg_init",
    "e_pos",
    "e_neg",
];

fn gaussian(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape, data).expect("finite draws")
}

impl ModelParams {
    /// Fresh parameters. Fusion weights are Gaussian with variance
    /// `1/fan_in`, attention projections start near the identity, initial
    /// queries are unit Gaussians scaled by `1/sqrt(d)`, and the two label
    /// embeddings are independent draws.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[tags::INIT]);
        let d = cfg.width;
        let (cs, cq) = (cfg.support_fusion_channels(), cfg.query_fusion_channels());
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        Self {
            fusion_support_w: gaussian(&mut rng, vec![d, cs], 1.0 / (cs as f64).sqrt()),
            fusion_support_b: Tensor::zeros(vec![d]),
            fusion_query_w: gaussian(&mut rng, vec![d, cq], 1.0 / (cq as f64).sqrt()),
            fusion_query_b: Tensor::zeros(vec![d]),
            attn_support: AttentionBlock::near_identity(d, ATTN_INIT_NOISE, &mut rng),
            attn_query: AttentionBlock::near_identity(d, ATTN_INIT_NOISE, &mut rng),
            attn_self: AttentionBlock::near_identity(d, ATTN_INIT_NOISE, &mut rng),
            q_pos_init: gaussian(&mut rng, vec![cfg.n_queries, d], inv_sqrt_d),
            q_neg_init: gaussian(&mut rng, vec![cfg.n_queries, d], inv_sqrt_d),
            e_pos: gaussian(&mut rng, vec![d], inv_sqrt_d),
            e_neg: gaussian(&mut rng, vec![d], inv_sqrt_d),
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 17] {
        [
            &self.fusion_support_w,
            &self.fusion_support_b,
            &self.fusion_query_w,
            &self.fusion_query_b,
            &self.attn_support.wq,
            &self.attn_support.wk,
            &self.attn_support.wv,
            &self.attn_query.wq,
            &self.attn_query.wk,
            &self.attn_query.wv,
            &self.attn_self.wq,
            &self.attn_self.wk,
            &self.attn_self.wv,
            &self.q_pos_init,
            &self.q_neg_init,
            &self.e_pos,
            &self.e_neg,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 17] {
        [
            &mut self.fusion_support_w,
            &mut self.fusion_support_b,
            &mut self.fusion_query_w,
            &mut self.fusion_query_b,
            &mut self.attn_support.wq,
            &mut self.attn_support.wk,
            &mut self.attn_support.wv,
            &mut self.attn_query.wq,
            &mut self.attn_query.wk,
            &mut self.attn_query.wv,
            &mut self.attn_self.wq,
            &mut self.attn_self.wk,
            &mut self.attn_self.wv,
            &mut self.q_pos_init,
            &mut self.q_neg_init,
            &mut self.e_pos,
            &mut self.e_neg,
        ]
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        PARAM_NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order, checking
    /// shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let template = Self::init(cfg, 0);
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        for ((name, want), got) in PARAM_NAMES.iter().zip(template.tensors()).zip(&tensors) {
            if want.shape() != got.shape() {
                return Err(Error::shape(
                    "ModelParams::from_tensors",
                    format!("{name}: expected {:?}, got {:?}", want.shape(), got.shape()),
                ));
            }
        }
        let mut out = template;
        for (slot, t) in out.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(out)
    }

    /// Same parameters with the positive and negative branch roles exchanged.
    pub fn swap_branches(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.q_pos_init, &mut out.q_neg_init);
        std::mem::swap(&mut out.e_pos, &mut out.e_neg);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let vars: Vec<Var> = self.tensors().iter().map(|t| tape.param((*t).clone())).collect();
        ParamVars::from_slice(&vars)
    }
}

/// [`ModelParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub fusion_support_w: Var,
    pub fusion_support_b: Var,
    pub fusion_query_w: Var,
    pub fusion_query_b: Var,
    pub attn_support: BlockVars,
    pub attn_query: BlockVars,
    pub attn_self: BlockVars,
    pub q_pos_init: Var,
    pub q_neg_init: Var,
    pub e_pos: Var,
    pub e_neg: Var,
}

impl ParamVars {
    /// Expects variables in [`PARAM_NAMES`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), PARAM_NAMES.len());
        let block = |k: usize| BlockVars {
            wq: v[k],
            wk: v[k + 1],
            wv: v[k + 2],
        };
        Self {
            fusion_support_w: v[0],
            fusion_support_b: v[1],
            fusion_query_w: v[2],
            fusion_query_b: v[3],
            attn_support: block(4),
            attn_query: block(7),
            attn_self: block(10),
            q_pos_init: v[13],
            q_neg_init: v[14],
            e_pos: v[15],
            e_neg: v[16],
        }
    }
}

/// Generated prompts before and after adding the label embeddings. The
/// negative entries are absent when the negative branch is disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub pos: Tensor,
    pub neg: Option<Tensor>,
    pub pos_labeled: Tensor,
    pub neg_labeled: Option<Tensor>,
}

/// `P' = P + E`, row-wise.
pub fn label_prompts(pos: &Tensor, neg: &Tensor, e_pos: &Tensor, e_neg: &Tensor) -> Result<PromptSet> {
    let mut tape = Tape::new();
    let (p, n) = (tape.constant(pos.clone()), tape.constant(neg.clone()));
    let (ep, en) = (tape.constant(e_pos.clone()), tape.constant(e_neg.clone()));
    let pl = tape.add_row(p, ep)?;
    let nl = tape.add_row(n, en)?;
    Ok(PromptSet {
        pos: pos.clone(),
        neg: Some(neg.clone()),
        pos_labeled: tape.value(pl).clone(),
        neg_labeled: Some(tape.value(nl).clone()),
    })
}

fn pixel_vectors(f: &Tensor, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = f.dims3(op)?;
    Ok((c, h * w, f.data().to_vec()))
}

/// Unit-normalized feature vector of each pixel as the rows of an `hw × C`
/// matrix. Zero vectors stay zero.
fn normalized_pixels(f: &Tensor, op: &'static str) -> Result<Tensor> {
    let (c, hw, data) = pixel_vectors(f, op)?;
    let mut out = vec![0.0; hw * c];
    for p in 0..hw {
        let norm = (0..c).map(|ch| data[ch * hw + p].powi(2)).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        for ch in 0..c {
            out[p * c + ch] = data[ch * hw + p] * inv;
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// Cosine similarity between every query pixel (rows) and every support
/// pixel (columns) of the high-level features.
pub fn cosine_similarity(f_high_q: &Tensor, f_high_s: &Tensor) -> Result<Tensor> {
    if f_high_s.shape() != f_high_q.shape() {
        return Err(Error::shape(
            "prior_mask",
            format!("query {:?}, support {:?}", f_high_q.shape(), f_high_s.shape()),
        ));
    }
    let q = normalized_pixels(f_high_q, "prior_mask")?;
    let s = normalized_pixels(f_high_s, "prior_mask")?;
    crate::tensor::matmul(&q, &s.transpose()?)
}

/// Prior mask from a precomputed [`cosine_similarity`] matrix: the largest
/// similarity to a foreground support pixel per query pixel, min-max
/// normalized. A flat map becomes all zeros.
pub fn prior_from_similarity(sim: &Tensor, m_s: &Tensor) -> Result<Tensor> {
    let (hwq, hws) = sim.dims2("prior_mask")?;
    let (h, w) = m_s.dims2("prior_mask")?;
    if h * w != hws || hwq != hws {
        return Err(Error::shape("prior_mask", format!("similarity {:?}, mask {:?}", sim.shape(), m_s.shape())));
    }
    let labels = attention::binary_labels(m_s, "prior_mask")?;
    if !labels.iter().any(|&l| l) {
        return Err(Error::EmptySupportMask);
    }
    let raw: Vec<f64> = (0..hwq)
        .map(|i| {
            sim.row(i)
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= PRIOR_FLAT_RANGE {
        return Ok(Tensor::zeros(vec![h, w]));
    }
    Tensor::new(vec![h, w], raw.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Prior mask in `[0, 1]`: max cosine similarity of each query pixel to the
/// foreground support pixels, min-max normalized.
pub fn prior_mask(f_high_q: &Tensor, f_high_s: &Tensor, m_s: &Tensor) -> Result<Tensor> {
    let (_, h, w) = f_high_q.dims3("prior_mask")?;
    if m_s.shape() != [h, w] {
        return Err(Error::shape("prior_mask", format!("features {:?}, mask {:?}", f_high_q.shape(), m_s.shape())));
    }
    prior_from_similarity(&cosine_similarity(f_high_q, f_high_s)?, m_s)
}

/// `Σ_p M_p F_p / (Σ_p M_p + 1e-6)`, one value per channel.
pub fn mask_average(f: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (c, hw, data) = pixel_vectors(f, "mask_average")?;
    if m.numel() != hw {
        return Err(Error::shape("mask_average", format!("{:?} vs mask {:?}", f.shape(), m.shape())));
    }
    mask::ensure_binary(m, "mask_average")?;
    let total = m.sum() + POOL_EPS;
    let out = (0..c)
        .map(|ch| data[ch * hw..(ch + 1) * hw].iter().zip(m.data()).map(|(a, b)| a * b).sum::<f64>() / total)
        .collect();
    Tensor::new(vec![c], out)
}

/// Stacks `[F; broadcast(pooled); F_sam?; prior?]` as a `C_in × hw` matrix.
fn fusion_input(f: &Tensor, pooled: &Tensor, f_sam: Option<&Tensor>, prior: Option<&Tensor>) -> Result<Tensor> {
    let (c, h, w) = f.dims3("fuse")?;
    let hw = h * w;
    if pooled.numel() != c {
        return Err(Error::shape("fuse", format!("pooled has {} channels, F has {c}", pooled.numel())));
    }
    let mut data = f.data().to_vec();
    for &v in pooled.data() {
        data.extend(std::iter::repeat_n(v, hw));
    }
    let mut rows = 2 * c;
    if let Some(s) = f_sam {
        let (cs, hs, ws) = s.dims3("fuse")?;
        if (hs, ws) != (h, w) {
            return Err(Error::shape("fuse", "SAM features differ in spatial size"));
        }
        data.extend_from_slice(s.data());
        rows += cs;
    }
    if let Some(p) = prior {
        if p.shape() != [h, w] {
            return Err(Error::shape("fuse", "prior differs in spatial size"));
        }
        data.extend_from_slice(p.data());
        rows += 1;
    }
    Tensor::new(vec![rows, hw], data)
}

/// Fused features as an `hw × d` matrix on the tape.
fn fuse_on(
    tape: &mut Tape,
    f: &Tensor,
    pooled: &Tensor,
    f_sam: Option<&Tensor>,
    prior: Option<&Tensor>,
    w: Var,
    b: Var,
) -> Result<Var> {
    let x = tape.constant(fusion_input(f, pooled, f_sam, prior)?);
    let y = tape.matmul(w, x)?;
    let y = tape.add_col(y, b)?;
    tape.transpose(y)
}

/// Channel concatenation followed by a 1×1 convolution, giving `d×h×w`.
pub fn fuse(
    f: &Tensor,
    pooled_s: &Tensor,
    f_sam: Option<&Tensor>,
    prior: Option<&Tensor>,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    let (_, h, wd) = f.dims3("fuse")?;
    let x = fusion_input(f, pooled_s, f_sam, prior)?;
    let x = x.reshape(vec![x.shape()[0], h, wd])?;
    crate::tensor::conv1x1(&x, w, b)
}

/// Encoded support and query images with the support mask at feature
/// resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFeatures {
    pub support: EncodedImage,
    pub query: EncodedImage,
    pub support_mask: Tensor,
}

/// Episode features plus the query mask at feature resolution, the
/// training target.
#[derive(Clone, Debug)]
pub struct EncodedEpisode {
    pub features: EpisodeFeatures,
    pub query_target: Tensor,
}

pub fn encode_episode(encoder: &StubEncoder, ep: &Episode) -> Result<EncodedEpisode> {
    let stride = encoder.config().stride;
    Ok(EncodedEpisode {
        features: EpisodeFeatures {
            support: encoder.encode(&ep.support_img)?,
            query: encoder.encode(&ep.query_img)?,
            support_mask: mask::downsample(&ep.support_mask, stride)?,
        },
        query_target: mask::downsample(&ep.query_mask, stride)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Positive,
    Negative,
}

/// Fused features of one branch, ready for attention.
pub struct BranchInputs {
    pub mask: Tensor,
    pub support: Var,
    pub query: Var,
}

/// Builds the fused support and query features of a branch. Fails with
/// [`Error::EmptySupportMask`] when the branch mask has no foreground.
pub fn prepare_branch(
    tape: &mut Tape,
    vars: &ParamVars,
    feats: &EpisodeFeatures,
    branch: Branch,
    similarity: Option<&Tensor>,
    cfg: &ModelConfig,
) -> Result<BranchInputs> {
    mask::ensure_binary(&feats.support_mask, "prepare_branch")?;
    let m = match branch {
        Branch::Positive => feats.support_mask.clone(),
        Branch::Negative => mask::invert(&feats.support_mask),
    };
    if mask::foreground(&m) == 0 {
        return Err(Error::EmptySupportMask);
    }
    let ab = cfg.ablation;
    let pooled = mask_average(&feats.support.mid, &m)?;
    let prior = match (ab.use_prior_mask, similarity) {
        (false, _) => None,
        (true, Some(sim)) => Some(prior_from_similarity(sim, &m)?),
        (true, None) => Some(prior_mask(&feats.query.high, &feats.support.high, &m)?),
    };
    let sam = |e: &EncodedImage| if ab.use_sam_fusion { Some(e.sam.clone()) } else { None };
    let support = fuse_on(
        tape,
        &feats.support.mid,
        &pooled,
        sam(&feats.support).as_ref(),
        None,
        vars.fusion_support_w,
        vars.fusion_support_b,
    )?;
    let query = fuse_on(
        tape,
        &feats.query.mid,
        &pooled,
        sam(&feats.query).as_ref(),
        prior.as_ref(),
        vars.fusion_query_w,
        vars.fusion_query_b,
    )?;
    Ok(BranchInputs {
        mask: flatten(&m)?,
        support,
        query,
    })
}

fn flatten(m: &Tensor) -> Result<Tensor> {
    m.reshape(vec![m.numel()])
}

/// Mediate prompts: cyclic-consistent attention from the initial queries to
/// the fused support features.
pub fn mediate_on(tape: &mut Tape, vars: &ParamVars, inputs: &BranchInputs, init: Var, cfg: &ModelConfig) -> Result<Var> {
    attention::qcyc_attention_on(
        tape,
        &vars.attn_support,
        init,
        inputs.support,
        &inputs.mask,
        cfg.ablation.use_cyc_bias,
    )
}

/// Final prompts: cyclic-consistent attention to the fused query features
/// under the branch pseudo-mask, then self-attention.
pub fn refine_on(
    tape: &mut Tape,
    vars: &ParamVars,
    inputs: &BranchInputs,
    mediate: Var,
    pseudo_flat: &Tensor,
    cfg: &ModelConfig,
) -> Result<Var> {
    let cross = attention::qcyc_attention_on(
        tape,
        &vars.attn_query,
        mediate,
        inputs.query,
        pseudo_flat,
        cfg.ablation.use_cyc_bias,
    )?;
    attention::self_attention_on(tape, &vars.attn_self, cross)
}

/// Prompt variables on a tape.
#[derive(Clone, Debug)]
pub struct PromptVars {
    pub pos: Var,
    pub neg: Option<Var>,
    pub pos_labeled: Var,
    pub neg_labeled: Option<Var>,
    /// Binarized positive pseudo query mask, `h×w`, detached.
    pub pseudo_mask: Tensor,
}

impl PromptVars {
    pub fn to_prompt_set(&self, tape: &Tape) -> PromptSet {
        PromptSet {
            pos: tape.value(self.pos).clone(),
            neg: self.neg.map(|v| tape.value(v).clone()),
            pos_labeled: tape.value(self.pos_labeled).clone(),
            neg_labeled: self.neg_labeled.map(|v| tape.value(v).clone()),
        }
    }
}

pub fn generate_prompts_on(
    tape: &mut Tape,
    vars: &ParamVars,
    feats: &EpisodeFeatures,
    cfg: &ModelConfig,
) -> Result<PromptVars> {
    let dec = cfg.decoder()?;
    let sim = if cfg.ablation.use_prior_mask {
        Some(cosine_similarity(&feats.query.high, &feats.support.high)?)
    } else {
        None
    };
    let pos_in = prepare_branch(tape, vars, feats, Branch::Positive, sim.as_ref(), cfg)?;
    let neg_in = if cfg.ablation.use_neg_branch {
        Some(prepare_branch(tape, vars, feats, Branch::Negative, sim.as_ref(), cfg)?)
    } else {
        None
    };

    let pos_med = mediate_on(tape, vars, &pos_in, vars.q_pos_init, cfg)?;
    let neg_med = match &neg_in {
        Some(inp) => Some(mediate_on(tape, vars, inp, vars.q_neg_init, cfg)?),
        None => None,
    };

    let pos_med_l = tape.add_row(pos_med, vars.e_pos)?;
    let neg_med_l = match neg_med {
        Some(n) => Some(tape.add_row(n, vars.e_neg)?),
        None => None,
    };
    let coarse = decoder::decode_on(tape, pos_med_l, neg_med_l, &feats.query.sam, &dec)?;
    let pseudo = mask::binarize(tape.value(coarse));
    let pseudo_flat = flatten(&pseudo)?;

    let pos = refine_on(tape, vars, &pos_in, pos_med, &pseudo_flat, cfg)?;
    let neg = match (&neg_in, neg_med) {
        (Some(inp), Some(med)) => Some(refine_on(tape, vars, inp, med, &mask::invert(&pseudo_flat), cfg)?),
        _ => None,
    };
    let pos_labeled = tape.add_row(pos, vars.e_pos)?;
    let neg_labeled = match neg {
        Some(n) => Some(tape.add_row(n, vars.e_neg)?),
        None => None,
    };
    Ok(PromptVars {
        pos,
        neg,
        pos_labeled,
        neg_labeled,
        pseudo_mask: pseudo,
    })
}

/// Mask probabilities for the query at feature resolution, and the prompts
/// that produced them.
pub fn forward_on(
    tape: &mut Tape,
    vars: &ParamVars,
    feats: &EpisodeFeatures,
    cfg: &ModelConfig,
) -> Result<(Var, PromptVars)> {
    let prompts = generate_prompts_on(tape, vars, feats, cfg)?;
    let prob = decoder::decode_on(tape, prompts.pos_labeled, prompts.neg_labeled, &feats.query.sam, &cfg.decoder()?)?;
    Ok((prob, prompts))
}

pub fn generate_prompts(params: &ModelParams, feats: &EpisodeFeatures, cfg: &ModelConfig) -> Result<(PromptSet, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let pv = generate_prompts_on(&mut tape, &vars, feats, cfg)?;
    Ok((pv.to_prompt_set(&tape), pv.pseudo_mask))
}

/// Image inference: probabilities at feature resolution.
pub fn predict(params: &ModelParams, feats: &EpisodeFeatures, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let (prob, _) = forward_on(&mut tape, &vars, feats, cfg)?;
    Ok(tape.value(prob).clone())
}

/// Image inference on a raw episode: a binary mask at canvas resolution.
pub fn segment(encoder: &StubEncoder, params: &ModelParams, ep: &Episode, cfg: &ModelConfig) -> Result<Tensor> {
    let enc = encode_episode(encoder, ep)?;
    let prob = predict(params, &enc.features, cfg)?;
    mask::upsample(&mask::binarize(&prob), cfg.stride)
}
