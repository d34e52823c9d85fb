//! Central finite-difference checks for tape gradients.

use rand::seq::index;

use crate::error::Result;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub coords_per_tensor: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Coordinate, analytic and numeric derivative at the worst error.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_err >= self.tolerance)
    }
}

/// Denominator floor of [`relative_error`]. Central differences at `h = 1e-5`
/// on an O(1) loss carry roundoff near `1e-11`, which would dominate the
/// ratio for derivatives much below this.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`, so that derivatives which are
/// both essentially zero compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of `loss_fn` against central differences on a
/// random subset of coordinates of every named parameter tensor.
///
/// `loss_fn` receives one tracked variable per parameter, in order.
pub fn check_gradients<F>(params: &[(String, Tensor)], loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = rng::stream(cfg.seed, &[rng::tags::GRADCHECK]);
    let mut out = Vec::with_capacity(params.len());
    for (k, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let n = tensor.numel();
        let picks = index::sample(&mut rng, n, cfg.coords_per_tensor.min(n));
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: 0,
            max_rel_err: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for coord in picks.iter() {
            let orig = tensor.data()[coord];
            values[k].data_mut()[coord] = orig + cfg.step;
            let plus = eval(&values)?;
            values[k].data_mut()[coord] = orig - cfg.step;
            let minus = eval(&values)?;
            values[k].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[coord];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || check.coords_checked == 0 {
                check.max_rel_err = err;
                check.worst = (coord, a, numeric);
            }
            check.coords_checked += 1;
        }
        out.push(check);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: out,
    })
}
