//! Binary mask helpers. Masks are `H×W` tensors holding exactly `0.0` or `1.0`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn is_binary(mask: &Tensor) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

pub fn ensure_binary(mask: &Tensor, op: &'static str) -> Result<()> {
    if is_binary(mask) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{op}: mask is not binary")))
    }
}

pub fn foreground(mask: &Tensor) -> usize {
    mask.data().iter().filter(|&&v| v == 1.0).count()
}

/// `1 - mask`.
pub fn invert(mask: &Tensor) -> Tensor {
    Tensor::from_parts(
        mask.shape().to_vec(),
        mask.data().iter().map(|v| 1.0 - v).collect(),
    )
}

/// Thresholds probabilities: `p >= 0.5` becomes foreground.
pub fn binarize(prob: &Tensor) -> Tensor {
    Tensor::from_parts(
        prob.shape().to_vec(),
        prob.data()
            .iter()
            .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Reduces an `H×W` mask by `stride` with a majority vote per block. If the
/// vote erases a non-empty mask, the block with the most foreground is kept
/// so that small objects survive.
pub fn downsample(mask: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w) = mask.dims2("downsample")?;
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "downsample",
            format!("{h}×{w} is not divisible by stride {stride}"),
        ));
    }
    if stride == 1 {
        return Ok(mask.clone());
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut counts = vec![0usize; oh * ow];
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] == 1.0 {
                counts[(y / stride) * ow + x / stride] += 1;
            }
        }
    }
    let half = stride * stride;
    let mut out: Vec<f64> = counts
        .iter()
        .map(|&c| if 2 * c >= half { 1.0 } else { 0.0 })
        .collect();
    if out.iter().all(|&v| v == 0.0) {
        if let Some((k, &c)) = counts.iter().enumerate().max_by_key(|&(k, &c)| (c, usize::MAX - k)) {
            if c > 0 {
                out[k] = 1.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow], out))
}

/// Nearest-neighbour enlargement by an integer factor.
pub fn upsample(mask: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w) = mask.dims2("upsample")?;
    if stride == 0 {
        return Err(Error::InvalidArgument("upsample stride 0".into()));
    }
    let (oh, ow) = (h * stride, w * stride);
    let data = (0..oh * ow)
        .map(|k| mask.data()[(k / ow / stride) * w + (k % ow) / stride])
        .collect();
    Ok(Tensor::from_parts(vec![oh, ow], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_majority_and_fallback() {
        let m = Tensor::new(
            vec![2, 4],
            vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(downsample(&m, 2).unwrap().data(), &[1.0, 0.0]);

        let tiny = Tensor::new(
            vec![2, 4],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(downsample(&tiny, 2).unwrap().data(), &[0.0, 1.0]);
        assert!(downsample(&tiny, 3).is_err());
    }

    #[test]
    fn upsample_repeats_blocks() {
        let m = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let up = upsample(&m, 2).unwrap();
        assert_eq!(up.shape(), &[2, 4]);
        assert_eq!(up.data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(downsample(&up, 2).unwrap(), m);
    }
}
