//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables. Leaves are
//! either constants or parameters; an op is tracked when any input is
//! tracked, and only tracked ops take part in [`Tape::backward`].
//!
//! ```
//! use dcsam_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let p = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(p, p).unwrap();
//! let half = tape.scale(sq, 0.5).unwrap();
//! let loss = tape.sum(half).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).data(), &[1.0, -2.0, 0.5]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{self, Bias, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the input values, the output
/// value and the upstream gradient, and returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    RepeatCols(Var),
    Sum(Var),
    Log(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSumExpCols(Var),
    ConcatRows(Vec<Var>),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, one per recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = tensor::finite(name, value)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("div", a, b, |x, y| x / y)?;
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map("scale", |x| x * s)?;
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map("add_scalar", |x| x + s)?;
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// `x[i][j] + row[j]` for a matrix `x` and a vector `row`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("add_row")?;
        let rv = self.value(row);
        if rv.numel() != c {
            return Err(Error::shape("add_row", format!("{r}×{c} + {:?}", rv.shape())));
        }
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, &b) in chunk.iter_mut().zip(rv.data()) {
                *d += b;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![r, c], data), Op::AddRow(x, row), &[x, row])
    }

    /// `x[i][j] + col[i]` for a matrix `x` and a vector `col`.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("add_col")?;
        let cv = self.value(col);
        if cv.numel() != r {
            return Err(Error::shape("add_col", format!("{r}×{c} + {:?}", cv.shape())));
        }
        let mut data = self.value(x).data().to_vec();
        for (chunk, &b) in data.chunks_mut(c).zip(cv.data()) {
            for d in chunk {
                *d += b;
            }
        }
        self.push("add_col", Tensor::from_parts(vec![r, c], data), Op::AddCol(x, col), &[x, col])
    }

    /// Broadcasts a length-`r` vector into an `r×n` matrix.
    pub fn repeat_cols(&mut self, v: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::shape("repeat_cols", "zero columns"));
        }
        let vals = self.value(v).data();
        let r = vals.len();
        let data = vals.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
        self.push("repeat_cols", Tensor::from_parts(vec![r, n], data), Op::RepeatCols(v), &[v])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::from_parts(vec![1], vec![self.value(a).sum()]);
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map("log", f64::ln)?;
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map("sigmoid", sigmoid)?;
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map("clamp", |x| x.clamp(lo, hi))?;
        self.push("clamp", out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row softmax of `x + bias`. The bias is a constant and never receives
    /// a gradient.
    pub fn masked_softmax_rows(&mut self, x: Var, bias: &Bias) -> Result<Var> {
        let out = tensor::masked_softmax_rows(self.value(x), bias)?;
        self.push("masked_softmax_rows", out, Op::Softmax(x), &[x])
    }

    /// Column-wise log-sum-exp of a matrix, giving a vector of length `cols`.
    pub fn logsumexp_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("logsumexp_cols")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for (j, o) in out.iter_mut().enumerate() {
            let max = (0..r).map(|i| xv[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..r).map(|i| (xv[i * c + j] - max).exp()).sum();
            *o = max + s.ln();
        }
        self.push("logsumexp_cols", Tensor::from_parts(vec![c], out), Op::LogSumExpCols(x), &[x])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let (_, c) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{pc} vs {c} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, c], data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Records an op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Reverse accumulation from a tracked scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if !node.tracked || node.value.numel() != 1 {
            return Err(Error::UntrackedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(node.value.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                for (input, contrib) in self.local_grads(node, &g) {
                    if !self.nodes[input.0].tracked {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                *a += c;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].tracked {
                    out.push((*a, tensor::matmul(g, &val(*b).transpose().unwrap()).unwrap()));
                }
                if self.nodes[b.0].tracked {
                    out.push((*b, tensor::matmul(&val(*a).transpose().unwrap(), g).unwrap()));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, g.transpose().unwrap())],
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec()))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, like(*b, gd.iter().map(|x| -x).collect()))],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let ga = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let ga = gd.iter().zip(bv).map(|(g, b)| g / b).collect();
                let gb = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Scale(a, s) => vec![(*a, like(*a, gd.iter().map(|x| x * s).collect()))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::AddRow(x, row) => {
                let c = val(*row).numel();
                let mut gr = vec![0.0; c];
                for chunk in gd.chunks(c) {
                    for (acc, v) in gr.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*row, like(*row, gr))]
            }
            Op::AddCol(x, col) => {
                let c = g.shape()[1];
                let gc = gd.chunks(c).map(|chunk| chunk.iter().sum()).collect();
                vec![(*x, g.clone()), (*col, like(*col, gc))]
            }
            Op::RepeatCols(v) => {
                let c = g.shape()[1];
                let gv = gd.chunks(c).map(|chunk| chunk.iter().sum()).collect();
                vec![(*v, like(*v, gv))]
            }
            Op::Sum(a) => vec![(*a, like(*a, vec![gd[0]; val(*a).numel()]))],
            Op::Log(a) => {
                let ga = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                vec![(*a, like(*a, ga))]
            }
            Op::Sigmoid(a) => {
                let ga = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                vec![(*a, like(*a, ga))]
            }
            Op::Clamp(a, lo, hi) => {
                let ga = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if (*lo..=*hi).contains(x) { *g } else { 0.0 })
                    .collect();
                vec![(*a, like(*a, ga))]
            }
            Op::Softmax(x) => {
                let c = g.shape()[1];
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((gx_row, y_row), g_row) in gx.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in gx_row.iter_mut().zip(y_row).zip(g_row) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::LogSumExpCols(x) => {
                let xv = val(*x);
                let c = xv.shape()[1];
                let y = node.value.data();
                let gx = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| gd[k % c] * (v - y[k % c]).exp())
                    .collect();
                vec![(*x, like(*x, gx))]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).numel();
                        let part = like(p, gd[offset..offset + n].to_vec());
                        offset += n;
                        (p, part)
                    })
                    .collect()
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                inputs.iter().copied().zip(backward(&ins, &node.value, g)).collect()
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
