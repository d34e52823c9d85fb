//! Segmentation losses: binary cross-entropy, Dice, and their sum.

use crate::error::{Error, Result};
use crate::mask;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;

fn target(tape: &Tape, p: Var, y: &Tensor, op: &'static str) -> Result<()> {
    if tape.value(p).shape() != y.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?}, target {:?}", tape.value(p).shape(), y.shape()),
        ));
    }
    mask::ensure_binary(y, op)
}

/// Mean pixel BCE with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_on(tape: &mut Tape, p: Var, y: &Tensor) -> Result<Var> {
    target(tape, p, y, "bce_loss")?;
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let yv = tape.constant(y.clone());
    let not_y = tape.constant(mask::invert(y));
    let log_p = tape.log(p)?;
    let neg_p = tape.scale(p, -1.0)?;
    let one_minus_p = tape.add_scalar(neg_p, 1.0)?;
    let log_q = tape.log(one_minus_p)?;
    let a = tape.mul(yv, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

/// `1 - 2 Σ p·y / (Σ p² + Σ y² + 1e-6)`.
pub fn dice_on(tape: &mut Tape, p: Var, y: &Tensor) -> Result<Var> {
    target(tape, p, y, "dice_loss")?;
    let yv = tape.constant(y.clone());
    let py = tape.mul(p, yv)?;
    let inter = tape.sum(py)?;
    let pp = tape.mul(p, p)?;
    let p2 = tape.sum(pp)?;
    let y2: f64 = y.data().iter().map(|v| v * v).sum();
    let denom = tape.add_scalar(p2, y2 + DICE_EPS)?;
    let ratio = tape.div(inter, denom)?;
    let scaled = tape.scale(ratio, -2.0)?;
    tape.add_scalar(scaled, 1.0)
}

pub fn total_on(tape: &mut Tape, p: Var, y: &Tensor) -> Result<Var> {
    let bce = bce_on(tape, p, y)?;
    let dice = dice_on(tape, p, y)?;
    tape.add(bce, dice)
}

fn eval(p: &Tensor, y: &Tensor, f: impl Fn(&mut Tape, Var, &Tensor) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let out = f(&mut tape, pv, y)?;
    Ok(tape.value(out).data()[0])
}

pub fn bce_loss(p: &Tensor, y: &Tensor) -> Result<f64> {
    eval(p, y, bce_on)
}

pub fn dice_loss(p: &Tensor, y: &Tensor) -> Result<f64> {
    eval(p, y, dice_on)
}

pub fn total_loss(p: &Tensor, y: &Tensor) -> Result<f64> {
    eval(p, y, total_on)
}
