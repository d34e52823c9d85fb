//! Scalar reference implementations.
//!
//! These are written as explicit loops over plain slices and share no code
//! with the vectorized kernels they are compared against. The `oracle`
//! CLI suite and the test suites both use them.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{self, tags};

/// `ShapeMismatch`-free matrix as nested rows.
pub type Rows = Vec<Vec<f64>>;

/// Cycle-consistency verdicts by brute force: for every position `j`, scan
/// all queries for `i*`, then all positions for `j*`.
pub fn cycle_bias(a: &Rows, labels: &[bool]) -> Vec<bool> {
    let n = a.len();
    let hw = labels.len();
    let mut out = Vec::with_capacity(hw);
    for j in 0..hw {
        let mut i_star = 0;
        for i in 0..n {
            if a[i][j] > a[i_star][j] {
                i_star = i;
            }
        }
        let mut j_star = 0;
        for jj in 0..hw {
            if a[i_star][jj] > a[i_star][j_star] {
                j_star = jj;
            }
        }
        out.push(labels[j] == labels[j_star]);
    }
    out
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Cross-attention from `queries` to `feats` with an optional cycle bias.
/// Masked logits are skipped outright rather than exponentiated.
pub fn qcyc_attention(wq: &Rows, wk: &Rows, wv: &Rows, queries: &Rows, feats: &Rows, labels: Option<&[bool]>) -> Rows {
    let q = matmul(queries, wq);
    let k = matmul(feats, wk);
    let v = matmul(feats, wv);
    let d = wq.len() as f64;
    let n = q.len();
    let hw = k.len();
    let mut a = vec![vec![0.0; hw]; n];
    for i in 0..n {
        for j in 0..hw {
            let mut s = 0.0;
            for c in 0..q[i].len() {
                s += q[i][c] * k[j][c];
            }
            a[i][j] = s / d.sqrt();
        }
    }
    let keep = match labels {
        Some(l) => cycle_bias(&a, l),
        None => vec![true; hw],
    };
    let width = v[0].len();
    let mut out = vec![vec![0.0; width]; n];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..hw {
            if keep[j] && a[i][j] > max {
                max = a[i][j];
            }
        }
        let mut total = 0.0;
        let mut w = vec![0.0; hw];
        for j in 0..hw {
            if keep[j] {
                w[j] = (a[i][j] - max).exp();
                total += w[j];
            }
        }
        for j in 0..hw {
            for c in 0..width {
                out[i][c] += w[j] / total * v[j][c];
            }
        }
    }
    out
}

pub fn self_attention(wq: &Rows, wk: &Rows, wv: &Rows, queries: &Rows) -> Rows {
    qcyc_attention(wq, wk, wv, queries, queries, None)
}

/// A random cycle-bias instance: affinity rows, labels.
pub fn random_cycle_instance(rng: &mut impl Rng, max_n: usize, max_hw: usize) -> (Rows, Vec<bool>) {
    let n = rng.random_range(1..=max_n);
    let hw = rng.random_range(1..=max_hw);
    // Coarse values make ties common, which exercises the tie rule.
    let coarse = rng.random_bool(0.3);
    let a = (0..n)
        .map(|_| {
            (0..hw)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    if coarse {
                        v.round()
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    let labels = (0..hw).map(|_| rng.random_bool(0.5)).collect();
    (a, labels)
}

pub fn random_rows(rng: &mut impl Rng, r: usize, c: usize) -> Rows {
    (0..r)
        .map(|_| (0..c).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Summary of an oracle comparison run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SuiteOutcome {
    pub trials: usize,
    pub passed: usize,
}

impl SuiteOutcome {
    pub fn all_passed(&self) -> bool {
        self.trials == self.passed
    }
}

/// Compares the vectorized cycle bias against [`cycle_bias`] on `trials`
/// random instances with `N <= 4` and `HW <= 9`.
pub fn run_cycle_suite(trials: usize, seed: u64) -> SuiteOutcome {
    use crate::tensor::Tensor;
    let mut out = SuiteOutcome::default();
    for t in 0..trials {
        let mut rng = rng::stream(seed, &[tags::ORACLE, 0, t as u64]);
        let (a, labels) = random_cycle_instance(&mut rng, 4, 9);
        let expected = cycle_bias(&a, &labels);
        let at = Tensor::from_rows(&a).expect("finite");
        let mask = Tensor::new(
            vec![labels.len()],
            labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect(),
        )
        .expect("finite");
        let got = crate::attention::cycle_bias(&at, &mask).expect("valid instance");
        out.trials += 1;
        if got.flags() == expected.as_slice() {
            out.passed += 1;
        }
    }
    out
}

/// Checks that masked softmax rows sum to one within `1e-9` and that masked
/// entries are exactly zero.
pub fn run_softmax_suite(trials: usize, seed: u64) -> SuiteOutcome {
    use crate::tensor::{masked_softmax_rows, Bias, Tensor, MASKED};
    let mut out = SuiteOutcome::default();
    for t in 0..trials {
        let mut rng = rng::stream(seed, &[tags::ORACLE, 1, t as u64]);
        let r = rng.random_range(1..=6);
        let c = rng.random_range(1..=12);
        let scale = [1.0, 10.0, 300.0][rng.random_range(0..3)];
        let x: Vec<f64> = (0..r * c)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let mut bias: Vec<f64> = (0..c)
            .map(|_| if rng.random_bool(0.4) { MASKED } else { 0.0 })
            .collect();
        let keep = rng.random_range(0..c);
        bias[keep] = 0.0;
        let xt = Tensor::new(vec![r, c], x).expect("finite");
        let y = masked_softmax_rows(&xt, &Bias::per_column(bias.clone()).expect("valid"))
            .expect("one open column");
        let ok = (0..r).all(|i| {
            let row = y.row(i);
            let sum: f64 = row.iter().sum();
            (sum - 1.0).abs() <= 1e-9
                && row.iter().zip(&bias).all(|(&v, &b)| b != MASKED || v == 0.0)
        });
        out.trials += 1;
        if ok {
            out.passed += 1;
        }
    }
    out
}
