//! Dense row-major `f64` tensors and the handful of kernels the pipeline
//! is written in.
//!
//! Every public constructor and kernel rejects non-finite values. The one
//! exception is [`Bias`], which may carry the [`MASKED`] sentinel and is
//! only consumed by [`masked_softmax_rows`].

use crate::error::{Error, Result};

/// Sentinel for a fully masked softmax logit.
pub const MASKED: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from values already known to be finite and sized.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(value.is_finite(), "Tensor::full with non-finite value");
        check_shape(&shape).expect("Tensor::full with a zero-sized dimension");
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(op, format!("expected C×H×W, got {:?}", self.shape))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        finite(op, Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Returns the tensor with every value rounded through `f32`.
    pub fn round_f32(&self) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f32 as f64).collect(),
        )
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "shape",
            format!("dimensions must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Index of the largest value; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} × {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a.data[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    finite("matmul", Tensor::from_parts(vec![m, n], out))
}

/// Additive softmax bias: finite values or the [`MASKED`] sentinel, either
/// one value per column (broadcast over rows) or one per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Bias {
    rows: Option<usize>,
    values: Vec<f64>,
}

impl Bias {
    pub fn per_column(values: Vec<f64>) -> Result<Self> {
        Self::validate(&values)?;
        Ok(Self { rows: None, values })
    }

    pub fn full(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::shape("Bias::full", "length does not match rows × cols"));
        }
        Self::validate(&values)?;
        Ok(Self {
            rows: Some(rows),
            values,
        })
    }

    pub fn zeros(cols: usize) -> Self {
        Self {
            rows: None,
            values: vec![0.0; cols],
        }
    }

    fn validate(values: &[f64]) -> Result<()> {
        if values.iter().all(|&v| v.is_finite() || v == MASKED) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "Bias" })
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn at(&self, i: usize, j: usize, cols: usize) -> f64 {
        match self.rows {
            None => self.values[j],
            Some(_) => self.values[i * cols + j],
        }
    }

    fn check(&self, r: usize, c: usize) -> Result<()> {
        let ok = match self.rows {
            None => self.values.len() == c,
            Some(br) => br == r && self.values.len() == r * c,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("masked_softmax_rows", "bias does not match logits"))
        }
    }
}

/// Row-wise softmax of `x + bias`. Entries whose bias is [`MASKED`] come out
/// exactly zero.
pub fn masked_softmax_rows(x: &Tensor, bias: &Bias) -> Result<Tensor> {
    let (r, c) = x.dims2("masked_softmax_rows")?;
    bias.check(r, c)?;
    let mut out = vec![0.0; r * c];
    let mut logits = vec![0.0; c];
    for i in 0..r {
        let mut max = f64::NEG_INFINITY;
        for (j, logit) in logits.iter_mut().enumerate() {
            let v = x.data[i * c + j] + bias.at(i, j, c);
            *logit = v;
            if v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked { row: i });
        }
        let row = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (o, &l) in row.iter_mut().zip(&logits) {
            if l == f64::NEG_INFINITY {
                *o = 0.0;
            } else {
                *o = (l - max).exp();
                total += *o;
            }
        }
        for o in row.iter_mut() {
            *o /= total;
        }
    }
    finite("masked_softmax_rows", Tensor::from_parts(vec![r, c], out))
}

/// Per-pixel affine channel map: `out[:, p] = w · x[:, p] + b`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c_in, h, wd) = x.dims3("conv1x1")?;
    let (c_out, c_in2) = w.dims2("conv1x1")?;
    if c_in != c_in2 || b.shape() != [c_out] {
        return Err(Error::shape(
            "conv1x1",
            format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let hw = h * wd;
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        let out_row = &mut out[o * hw..(o + 1) * hw];
        out_row.fill(b.data[o]);
        for i in 0..c_in {
            let wv = w.data[o * c_in + i];
            let x_row = &x.data[i * hw..(i + 1) * hw];
            for (acc, &xv) in out_row.iter_mut().zip(x_row) {
                *acc += wv * xv;
            }
        }
    }
    finite("conv1x1", Tensor::from_parts(vec![c_out, h, wd], out))
}
