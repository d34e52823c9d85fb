//! Deterministic stand-in for the pretrained backbones.
//!
//! The image is first average-pooled by the stride. Each of the three
//! feature streams is then a fixed random projection of a local patch of the
//! pooled image followed by `tanh`. The mid-level and SAM-like streams read
//! 3×3 patches, the high-level stream reads 5×5 patches. Weights depend only
//! on the seed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::episode::CHANNELS;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

const GAIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub seed: u64,
    pub mid_channels: usize,
    pub high_channels: usize,
    pub sam_channels: usize,
    pub stride: usize,
}

/// Feature maps of one image, each `C×h×w` at the pooled resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub mid: Tensor,
    pub high: Tensor,
    pub sam: Tensor,
}

#[derive(Clone, Debug)]
struct Projection {
    radius: usize,
    /// `out × (patch + 1)`, last column is the bias.
    weights: Vec<f64>,
    out: usize,
}

impl Projection {
    fn new(rng: &mut impl Rng, out: usize, radius: usize) -> Self {
        let side = 2 * radius + 1;
        let fan_in = CHANNELS * side * side;
        let scale = GAIN / (fan_in as f64).sqrt();
        let weights = (0..out * (fan_in + 1))
            .enumerate()
            .map(|(k, _)| {
                let z: f64 = rng.sample(StandardNormal);
                if k % (fan_in + 1) == fan_in {
                    0.3 * z
                } else {
                    scale * z
                }
            })
            .collect();
        Self { radius, weights, out }
    }

    /// Projects every pixel of an already pooled `C×h×w` image.
    fn apply(&self, img: &[f64], h: usize, w: usize) -> Tensor {
        let side = 2 * self.radius + 1;
        let fan_in = CHANNELS * side * side;
        let patches = patches(img, h, w, self.radius);
        let mut out = vec![0.0; self.out * h * w];
        for o in 0..self.out {
            let row = &self.weights[o * (fan_in + 1)..(o + 1) * (fan_in + 1)];
            let (wts, bias) = (&row[..fan_in], row[fan_in]);
            for (v, patch) in out[o * h * w..(o + 1) * h * w].iter_mut().zip(patches.chunks_exact(fan_in)) {
                *v = (bias + dot(wts, patch)).tanh();
            }
        }
        Tensor::from_parts(vec![self.out, h, w], out)
    }
}

/// Block average over `stride × stride` cells.
fn pool(img: &[f64], h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0.0; CHANNELS * oh * ow];
    let norm = 1.0 / (stride * stride) as f64;
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                out[c * oh * ow + (y / stride) * ow + x / stride] += img[c * h * w + y * w + x] * norm;
            }
        }
    }
    out
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Edge-clamped patches centred on every pixel, shifted by -0.5, one row
/// of `C·(2r+1)²` values per pixel.
fn patches(img: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let side = 2 * radius + 1;
    let mut out = Vec::with_capacity(h * w * CHANNELS * side * side);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let plane = &img[c * h * w..(c + 1) * h * w];
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        out.push(plane[yy * w + xx] - 0.5);
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct StubEncoder {
    config: EncoderConfig,
    mid: Projection,
    high: Projection,
    sam: Projection,
}

impl StubEncoder {
    pub fn new(config: EncoderConfig) -> Self {
        let mut rng = rng::stream(config.seed, &[tags::ENCODER]);
        let mid = Projection::new(&mut rng, config.mid_channels, 1);
        let high = Projection::new(&mut rng, config.high_channels, 2);
        let sam = Projection::new(&mut rng, config.sam_channels, 1);
        Self {
            config,
            mid,
            high,
            sam,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encode(&self, image: &Tensor) -> Result<EncodedImage> {
        let (c, h, w) = image.dims3("encode")?;
        let s = self.config.stride;
        if c != CHANNELS || s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "encode",
                format!("image {:?} with stride {s}", image.shape()),
            ));
        }
        let pooled = pool(image.data(), h, w, s);
        let (ph, pw) = (h / s, w / s);
        Ok(EncodedImage {
            mid: self.mid.apply(&pooled, ph, pw),
            high: self.high.apply(&pooled, ph, pw),
            sam: self.sam.apply(&pooled, ph, pw),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> EncoderConfig {
        EncoderConfig {
            seed,
            mid_channels: 4,
            high_channels: 5,
            sam_channels: 6,
            stride: 2,
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let ep = crate::episode::gen_episode(3, 9, (16, 16)).unwrap();
        let a = StubEncoder::new(cfg(1)).encode(&ep.query_img).unwrap();
        let b = StubEncoder::new(cfg(1)).encode(&ep.query_img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mid.shape(), &[4, 8, 8]);
        assert_eq!(a.high.shape(), &[5, 8, 8]);
        assert_eq!(a.sam.shape(), &[6, 8, 8]);
        let c = StubEncoder::new(cfg(2)).encode(&ep.query_img).unwrap();
        assert_ne!(a.mid, c.mid);
        // the SAM-like stream is not a copy of the mid-level one
        assert_ne!(a.mid.data()[..4], a.sam.data()[..4]);
    }

    #[test]
    fn rejects_bad_stride() {
        let img = Tensor::zeros(vec![3, 5, 5]);
        assert!(StubEncoder::new(cfg(0)).encode(&img).is_err());
    }
}
