//! Cyclic-consistent cross-attention and plain self-attention over prompt
//! queries.
//!
//! Cross-attention here attends from `N` prompt queries to `HW` feature
//! positions. A position `j` is cycle-consistent when the round trip
//! `j -> i* = argmax_i A[i][j] -> j* = argmax_j A[i*][j]` lands on a position
//! carrying the same mask label as `j`. Inconsistent positions receive a
//! `-inf` logit bias, so their attention weight is exactly zero. The bias is
//! computed from the affinity values and never differentiated.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, argmax, Bias, Tensor, MASKED};

/// Single-head attention projections, all `d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionBlock {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor) -> Result<Self> {
        let d = wq.dims2("AttentionBlock")?.0;
        for w in [&wq, &wk, &wv] {
            if w.shape() != [d, d] {
                return Err(Error::shape(
                    "AttentionBlock",
                    format!("projections must all be {d}×{d}, got {:?}", w.shape()),
                ));
            }
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
        }
    }

    /// Gaussian projections with standard deviation `1/sqrt(d)`.
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let mut draw = || {
            let scale = 1.0 / (d as f64).sqrt();
            let data = (0..d * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            Tensor::new(vec![d, d], data).expect("finite draws")
        };
        Self {
            wq: draw(),
            wk: draw(),
            wv: draw(),
        }
    }

    /// Identity plus Gaussian noise of standard deviation `noise/sqrt(d)`.
    /// Starting near the identity keeps query and feature directions aligned
    /// through the projections.
    pub fn near_identity(d: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let mut b = Self::random(d, rng);
        for w in [&mut b.wq, &mut b.wk, &mut b.wv] {
            for (k, v) in w.data_mut().iter_mut().enumerate() {
                *v = *v * noise + if k / d == k % d { 1.0 } else { 0.0 };
            }
        }
        b
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            wq: tape.param(self.wq.clone()),
            wk: tape.param(self.wk.clone()),
            wv: tape.param(self.wv.clone()),
        }
    }

    fn bind_const(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
        }
    }
}

/// An [`AttentionBlock`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Per-position cycle-consistency verdicts, rendered as a `{0, -inf}` bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleBias {
    consistent: Vec<bool>,
}

impl CycleBias {
    /// A bias that masks nothing.
    pub fn open(len: usize) -> Self {
        Self {
            consistent: vec![true; len],
        }
    }

    pub fn from_flags(consistent: Vec<bool>) -> Self {
        Self { consistent }
    }

    pub fn len(&self) -> usize {
        self.consistent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consistent.is_empty()
    }

    pub fn is_consistent(&self, j: usize) -> bool {
        self.consistent[j]
    }

    pub fn flags(&self) -> &[bool] {
        &self.consistent
    }

    /// Bias values: `0.0` or [`MASKED`].
    pub fn values(&self) -> Vec<f64> {
        self.consistent
            .iter()
            .map(|&ok| if ok { 0.0 } else { MASKED })
            .collect()
    }

    pub fn to_bias(&self) -> Bias {
        Bias::per_column(self.values()).expect("0 or MASKED")
    }
}

/// Reads a flat `{0,1}` mask into labels.
pub fn binary_labels(mask: &Tensor, op: &'static str) -> Result<Vec<bool>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v == 1.0 {
                Ok(true)
            } else if v == 0.0 {
                Ok(false)
            } else {
                Err(Error::InvalidArgument(format!("{op}: mask value {v} is not 0 or 1")))
            }
        })
        .collect()
}

/// `A = Q Kᵀ / sqrt(d)`.
pub fn affinity(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let a = affinity_on(&mut tape, qv, kv)?;
    Ok(tape.value(a).clone())
}

pub fn affinity_on(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let (_, dq) = tape.value(q).dims2("affinity")?;
    let (_, dk) = tape.value(k).dims2("affinity")?;
    if dq != dk {
        return Err(Error::shape("affinity", format!("query width {dq}, key width {dk}")));
    }
    let kt = tape.transpose(k)?;
    let a = tape.matmul(q, kt)?;
    tape.scale(a, 1.0 / (dq as f64).sqrt())
}

/// Cycle-consistency bias for an `N×HW` affinity and a flat mask of length
/// `HW`. Argmax ties resolve to the smallest index.
pub fn cycle_bias(a: &Tensor, mask_flat: &Tensor) -> Result<CycleBias> {
    let (n, hw) = a.dims2("cycle_bias")?;
    if mask_flat.numel() != hw {
        return Err(Error::shape(
            "cycle_bias",
            format!("affinity has {hw} positions, mask has {}", mask_flat.numel()),
        ));
    }
    let labels = binary_labels(mask_flat, "cycle_bias")?;

    // Column argmax in one sweep over rows; strict comparison keeps the first row.
    let mut best_query = vec![0usize; hw];
    let mut best_val = a.row(0).to_vec();
    for i in 1..n {
        for (j, &v) in a.row(i).iter().enumerate() {
            if v > best_val[j] {
                best_val[j] = v;
                best_query[j] = i;
            }
        }
    }
    let best_pos: Vec<usize> = (0..n).map(|i| argmax(a.row(i))).collect();
    let consistent = (0..hw)
        .map(|j| labels[j] == labels[best_pos[best_query[j]]])
        .collect();
    Ok(CycleBias { consistent })
}

/// Cyclic-consistent cross-attention on a tape.
///
/// `queries` is `N×d`, `feats` is `HW×d`, `mask_flat` holds `HW` labels.
/// With `use_bias == false` the cycle bias is replaced by zeros.
pub fn qcyc_attention_on(
    tape: &mut Tape,
    block: &BlockVars,
    queries: Var,
    feats: Var,
    mask_flat: &Tensor,
    use_bias: bool,
) -> Result<Var> {
    let q = tape.matmul(queries, block.wq)?;
    let k = tape.matmul(feats, block.wk)?;
    let v = tape.matmul(feats, block.wv)?;
    let a = affinity_on(tape, q, k)?;
    let hw = tape.value(a).shape()[1];
    if mask_flat.numel() != hw {
        return Err(Error::shape(
            "qcyc_attention",
            format!("{hw} feature positions, mask has {}", mask_flat.numel()),
        ));
    }
    let bias = if use_bias {
        cycle_bias(tape.value(a), mask_flat)?.to_bias()
    } else {
        binary_labels(mask_flat, "qcyc_attention")?;
        Bias::zeros(hw)
    };
    let weights = tape.masked_softmax_rows(a, &bias)?;
    tape.matmul(weights, v)
}

/// Scaled dot-product self-attention without residual or normalization.
pub fn self_attention_on(tape: &mut Tape, block: &BlockVars, queries: Var) -> Result<Var> {
    let q = tape.matmul(queries, block.wq)?;
    let k = tape.matmul(queries, block.wk)?;
    let v = tape.matmul(queries, block.wv)?;
    let a = affinity_on(tape, q, k)?;
    let n = tape.value(a).shape()[1];
    let weights = tape.masked_softmax_rows(a, &Bias::zeros(n))?;
    tape.matmul(weights, v)
}

pub fn qcyc_attention(block: &AttentionBlock, queries: &Tensor, feats: &Tensor, mask_flat: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = block.bind_const(&mut tape);
    let (q, f) = (tape.constant(queries.clone()), tape.constant(feats.clone()));
    let out = qcyc_attention_on(&mut tape, &b, q, f, mask_flat, true)?;
    Ok(tape.value(out).clone())
}

/// Cross-attention with no bias at all.
pub fn cross_attention(block: &AttentionBlock, queries: &Tensor, feats: &Tensor) -> Result<Tensor> {
    let q = tensor::matmul(queries, &block.wq)?;
    let k = tensor::matmul(feats, &block.wk)?;
    let v = tensor::matmul(feats, &block.wv)?;
    let a = affinity(&q, &k)?;
    let w = tensor::masked_softmax_rows(&a, &Bias::zeros(a.shape()[1]))?;
    tensor::matmul(&w, &v)
}

pub fn self_attention(block: &AttentionBlock, queries: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = block.bind_const(&mut tape);
    let q = tape.constant(queries.clone());
    let out = self_attention_on(&mut tape, &b, q)?;
    Ok(tape.value(out).clone())
}
