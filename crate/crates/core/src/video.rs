//! Mask tubes built by warping one query image through a random walk of
//! small similarity transforms, and first-frame prompt propagation.

use rand::Rng;

use crate::encoder::StubEncoder;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::mask;
use crate::pipeline::{self, EpisodeFeatures, ModelConfig, ModelParams};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

/// Zoom levels of the scale grid, in tenths.
pub const SCALE_GRID: [u32; 3] = [9, 10, 11];
pub const MAX_STEP: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformSpec {
    pub dx: i32,
    pub dy: i32,
    pub flip: bool,
    /// Index into [`SCALE_GRID`].
    pub scale_index: usize,
}

impl TransformSpec {
    pub const IDENTITY: Self = Self {
        dx: 0,
        dy: 0,
        flip: false,
        scale_index: 1,
    };

    pub fn scale(&self) -> f64 {
        f64::from(SCALE_GRID[self.scale_index]) / 10.0
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape("warp", format!("expected rank 2 or 3, got {s:?}"))),
    }
}

/// Warps a `C×H×W` or `H×W` tensor. The forward map mirrors horizontally
/// (if `flip`), zooms about the canvas centre, then translates; the output
/// is filled by nearest-neighbour lookup through the inverse map, with zeros
/// outside the source.
pub fn warp(t: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    let (c, _, _) = dims(t)?;
    warp_filled(t, spec, &vec![0.0; c])
}

/// [`warp`] for images: pixels with no source take the channel mean of the
/// source image, so content leaving the canvas does not expose black
/// borders the scene never contained.
pub fn warp_image(img: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    let means: Vec<f64> = img
        .data()
        .chunks(h * w)
        .map(|ch| ch.iter().sum::<f64>() / (h * w) as f64)
        .collect();
    debug_assert_eq!(means.len(), c);
    warp_filled(img, spec, &means)
}

/// [`warp`] with one fill value per channel for pixels with no source.
pub fn warp_filled(t: &Tensor, spec: &TransformSpec, fill: &[f64]) -> Result<Tensor> {
    let (c, h, w) = dims(t)?;
    if fill.len() != c {
        return Err(Error::shape("warp", format!("{} fill values for {c} channels", fill.len())));
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let s = spec.scale();
    let mut out: Vec<f64> = fill.iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
    for y in 0..h {
        for x in 0..w {
            let ty = (y as i64 - i64::from(spec.dy)) as f64;
            let tx = (x as i64 - i64::from(spec.dx)) as f64;
            let sy = (cy + (ty - cy) / s).round();
            let mut sx = (cx + (tx - cx) / s).round();
            if spec.flip {
                sx = (w as f64 - 1.0) - sx;
            }
            if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for ch in 0..c {
                out[ch * h * w + y * w + x] = t.data()[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTube {
    pub frames: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub transforms: Vec<TransformSpec>,
    pub class_id: u32,
    pub seed: u64,
}

impl MaskTube {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks equal lengths and mask binarity.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.masks.len() || self.masks.len() != self.transforms.len() {
            return Err(Error::FrameCountMismatch {
                left: self.frames.len(),
                right: self.masks.len(),
            });
        }
        for m in &self.masks {
            mask::ensure_binary(m, "MaskTube")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TubeMotion {
    /// Translation, zoom and a per-tube mirror.
    Full,
    TranslationOnly,
}

fn walk(rng: &mut impl Rng, t: usize, motion: TubeMotion) -> Vec<TransformSpec> {
    let flip = motion == TubeMotion::Full && rng.random_bool(0.5);
    let mut cur = TransformSpec::IDENTITY;
    let mut out = vec![cur];
    for _ in 1..t {
        cur.dx += rng.random_range(-MAX_STEP..=MAX_STEP);
        cur.dy += rng.random_range(-MAX_STEP..=MAX_STEP);
        if motion == TubeMotion::Full {
            cur.flip = flip;
            let step: i32 = rng.random_range(-1..=1);
            cur.scale_index = (cur.scale_index as i32 + step).clamp(0, SCALE_GRID.len() as i32 - 1) as usize;
        }
        out.push(cur);
    }
    out
}

/// Tube of `t` frames from the episode query. Frame 0 is the query itself.
pub fn make_tube(ep: &Episode, t: usize, seed: u64, motion: TubeMotion) -> Result<MaskTube> {
    if t == 0 {
        return Err(Error::InvalidArgument("a tube needs at least one frame".into()));
    }
    let mut rng = rng::stream(seed, &[tags::TUBE, ep.class_id.into()]);
    let transforms = walk(&mut rng, t, motion);
    let mut frames = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for spec in &transforms {
        if spec.is_identity() {
            frames.push(ep.query_img.clone());
            masks.push(ep.query_mask.clone());
        } else {
            frames.push(warp_image(&ep.query_img, spec)?);
            masks.push(warp(&ep.query_mask, spec)?);
        }
    }
    Ok(MaskTube {
        frames,
        masks,
        transforms,
        class_id: ep.class_id,
        seed,
    })
}

/// Segments every frame of `tube` with prompts generated once from the
/// support pair and frame 0. Returns binary masks at canvas resolution.
pub fn propagate_first_frame(
    encoder: &StubEncoder,
    params: &ModelParams,
    cfg: &ModelConfig,
    support_img: &Tensor,
    support_mask: &Tensor,
    tube: &MaskTube,
) -> Result<MaskTube> {
    tube.validate()?;
    let first = tube.frames.first().ok_or(Error::EmptyReport)?;
    let feats = EpisodeFeatures {
        support: encoder.encode(support_img)?,
        query: encoder.encode(first)?,
        support_mask: mask::downsample(support_mask, cfg.stride)?,
    };
    let (prompts, _) = pipeline::generate_prompts(params, &feats, cfg)?;
    let dec = cfg.decoder()?;
    let mut masks = Vec::with_capacity(tube.len());
    for (t, frame) in tube.frames.iter().enumerate() {
        let sam = if t == 0 {
            feats.query.sam.clone()
        } else {
            encoder.encode(frame)?.sam
        };
        let prob = crate::decoder::decode(&prompts, &sam, &dec)?;
        masks.push(mask::upsample(&mask::binarize(&prob), cfg.stride)?);
    }
    Ok(MaskTube {
        frames: tube.frames.clone(),
        masks,
        transforms: tube.transforms.clone(),
        class_id: tube.class_id,
        seed: tube.seed,
    })
}
