//! Evaluation metrics: IoU, mIoU, boundary F, and the video J / F / J&F.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask;
use crate::tensor::Tensor;
use crate::video::MaskTube;

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    mask::ensure_binary(a, op)?;
    mask::ensure_binary(b, op)
}

/// Intersection and union pixel counts.
pub fn overlap(pred: &Tensor, gt: &Tensor) -> Result<(u64, u64)> {
    same_shape(pred, gt, "iou")?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok((inter, union))
}

/// `|pred ∩ gt| / |pred ∪ gt|`; 1 when both masks are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (inter, union) = overlap(pred, gt)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn miou(per_class: &BTreeMap<u32, f64>) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::EmptyReport);
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// outside the image.
pub fn boundary(m: &Tensor) -> Result<Vec<bool>> {
    let (h, w) = m.dims2("boundary")?;
    mask::ensure_binary(m, "boundary")?;
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.data()[y as usize * w + x as usize] == 1.0
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    Ok(out)
}

/// `ceil(0.008 · diagonal)` pixels.
pub fn default_tolerance(h: usize, w: usize) -> usize {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Fraction of `from` pixels with a `to` pixel within Chebyshev distance `tol`.
fn matched_fraction(from: &[bool], to: &[bool], h: usize, w: usize, tol: usize) -> f64 {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return 0.0;
    }
    let t = tol as isize;
    let hit = |y: usize, x: usize| {
        let (y0, y1) = ((y as isize - t).max(0) as usize, (y + tol).min(h - 1));
        let (x0, x1) = ((x as isize - t).max(0) as usize, (x + tol).min(w - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| to[yy * w + xx]))
    };
    let matched = (0..h * w).filter(|&k| from[k] && hit(k / w, k % w)).count();
    matched as f64 / total as f64
}

/// Boundary F-measure with a Chebyshev matching tolerance. Two empty masks
/// score 1; a single empty mask scores 0.
pub fn boundary_f(pred: &Tensor, gt: &Tensor, tol: usize) -> Result<f64> {
    same_shape(pred, gt, "boundary_f")?;
    let (h, w) = pred.dims2("boundary_f")?;
    let (bp, bg) = (boundary(pred)?, boundary(gt)?);
    let (np, ng) = (bp.iter().any(|&b| b), bg.iter().any(|&b| b));
    if !np && !ng {
        return Ok(1.0);
    }
    let precision = matched_fraction(&bp, &bg, h, w, tol);
    let recall = matched_fraction(&bg, &bp, h, w, tol);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_class_iou: BTreeMap<u32, f64>,
    pub miou: f64,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

impl MetricReport {
    pub fn new(per_class_iou: BTreeMap<u32, f64>, j: f64, f: f64) -> Result<Self> {
        let miou = miou(&per_class_iou)?;
        Ok(Self {
            per_class_iou,
            miou,
            j,
            f,
            jf: (j + f) / 2.0,
        })
    }
}

/// Per-frame J and F of a predicted tube against ground truth.
pub fn per_frame_jf(pred: &MaskTube, gt: &MaskTube, tol: usize) -> Result<Vec<(f64, f64)>> {
    if pred.masks.len() != gt.masks.len() {
        return Err(Error::FrameCountMismatch {
            left: pred.masks.len(),
            right: gt.masks.len(),
        });
    }
    pred.masks
        .iter()
        .zip(&gt.masks)
        .map(|(p, g)| Ok((iou(p, g)?, boundary_f(p, g, tol)?)))
        .collect()
}

/// Mean per-frame J and F; the class entry of the report carries J.
pub fn jf_score(pred: &MaskTube, gt: &MaskTube, tol: usize) -> Result<MetricReport> {
    let frames = per_frame_jf(pred, gt, tol)?;
    if frames.is_empty() {
        return Err(Error::EmptyReport);
    }
    let n = frames.len() as f64;
    let j = frames.iter().map(|x| x.0).sum::<f64>() / n;
    let f = frames.iter().map(|x| x.1).sum::<f64>() / n;
    MetricReport::new(BTreeMap::from([(gt.class_id, j)]), j, f)
}
