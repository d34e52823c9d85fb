//! Synthetic one-shot episodes and the class-fold protocol.
//!
//! There are 16 classes: 8 shape families, each in two appearance variants.
//! Every class has its own colour; variant 1 adds a stripe texture, and the
//! checker-blob family carries a checker pattern. A scene is a noisy grey
//! background with 1-2 distractor instances of other classes and one target
//! instance painted last. The mask covers the target only.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

pub const NUM_CLASSES: u32 = 16;
pub const NUM_FAMILIES: u32 = 8;
pub const FOLD_COUNT: usize = 4;
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Rectangle,
    Triangle,
    Ring,
    Cross,
    Bar,
    LShape,
    CheckerBlob,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Disk,
        ShapeFamily::Rectangle,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Bar,
        ShapeFamily::LShape,
        ShapeFamily::CheckerBlob,
    ];

    /// Membership test in shape-local coordinates, where the shape spans
    /// roughly `[-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Disk => u * u + v * v <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= 1.0 && v.abs() <= 0.7,
            ShapeFamily::Triangle => v <= 0.8 && v >= 2.0 * u.abs() - 1.0,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.25..=1.0).contains(&r2)
            }
            ShapeFamily::Cross => {
                (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0)
            }
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
            ShapeFamily::LShape => {
                ((-1.0..=-0.3).contains(&u) && v.abs() <= 1.0)
                    || (u.abs() <= 1.0 && (0.3..=1.0).contains(&v))
            }
            ShapeFamily::CheckerBlob => {
                let r = (u * u + v * v).sqrt();
                let theta = v.atan2(u);
                r <= 0.85 + 0.15 * (3.0 * theta).sin()
            }
        }
    }
}

/// Appearance and geometry of a class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub family: ShapeFamily,
    pub striped: bool,
    pub color: [f64; 3],
}

pub fn class_style(class_id: u32) -> Result<ClassStyle> {
    if class_id >= NUM_CLASSES {
        return Err(Error::UnknownClass(class_id));
    }
    let family = ShapeFamily::ALL[(class_id % NUM_FAMILIES) as usize];
    // Spread consecutive ids around the hue circle.
    let hue = ((class_id * 7) % NUM_CLASSES) as f64 / NUM_CLASSES as f64;
    let value = if class_id < NUM_FAMILIES { 0.95 } else { 0.8 };
    Ok(ClassStyle {
        family,
        striped: class_id >= NUM_FAMILIES,
        color: hsv_to_rgb(hue, 0.85, value),
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One in-context task. Images are `3×H×W` in `[0, 1]`, masks `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_img: Tensor,
    pub support_mask: Tensor,
    pub query_img: Tensor,
    pub query_mask: Tensor,
    pub class_id: u32,
    pub seed: u64,
}

impl Episode {
    pub fn canvas(&self) -> (usize, usize) {
        (self.support_mask.shape()[0], self.support_mask.shape()[1])
    }
}

/// Instance masks of one rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub target: Vec<bool>,
    pub distractors: Vec<(u32, Vec<bool>)>,
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    mirrored: bool,
}

fn rasterize(family: ShapeFamily, p: Placement, h: usize, w: usize) -> Vec<bool> {
    let (ru, rv) = (p.radius * p.aspect, p.radius / p.aspect);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut u = (x as f64 - p.cx) / ru;
            let v = (y as f64 - p.cy) / rv;
            if p.mirrored {
                u = -u;
            }
            out[y * w + x] = family.contains(u, v);
        }
    }
    out
}

fn random_placement(rng: &mut impl Rng, h: usize, w: usize, scale: f64) -> Placement {
    let side = h.min(w) as f64;
    Placement {
        cy: rng.random_range(0.0..h as f64),
        cx: rng.random_range(0.0..w as f64),
        radius: rng.random_range(0.15..0.4) * side * scale,
        aspect: rng.random_range(0.8..1.25),
        mirrored: rng.random_bool(0.5),
    }
}

/// Fallback target: a centred square covering about 5% of the canvas.
fn fallback_target(h: usize, w: usize) -> Vec<bool> {
    let side = ((0.05 * (h * w) as f64).sqrt().ceil() as usize).clamp(1, h.min(w));
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut out = vec![false; h * w];
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            out[y * w + x] = true;
        }
    }
    out
}

fn paint(img: &mut [f64], mask: &[bool], style: &ClassStyle, rng: &mut impl Rng, h: usize, w: usize) {
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let brightness = rng.random_range(0.9..1.1);
    let phase = rng.random_range(0..4usize);
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            if !mask[k] {
                continue;
            }
            let mut shade = brightness;
            if style.striped && ((x + y + phase) / 2) % 2 == 0 {
                shade *= 0.55;
            }
            if style.family == ShapeFamily::CheckerBlob && ((x / 2) + (y / 2)) % 2 == 1 {
                shade *= 0.75;
            }
            for (c, base) in style.color.iter().enumerate() {
                let v = base * shade + noise.sample(rng);
                img[c * h * w + k] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Renders one scene of `class_id`.
pub fn render_scene(class_id: u32, rng: &mut impl Rng, h: usize, w: usize) -> Result<(Tensor, Tensor, SceneLayout)> {
    let style = class_style(class_id)?;
    let hw = h * w;
    let (min_fg, max_fg) = (0.02 * hw as f64, 0.5 * hw as f64);

    let target = (0..200)
        .map(|_| rasterize(style.family, random_placement(rng, h, w, 1.0), h, w))
        .find(|m| {
            let n = count(m) as f64;
            n >= min_fg && n <= max_fg
        })
        .unwrap_or_else(|| fallback_target(h, w));
    let target_area = count(&target);

    let n_distractors = rng.random_range(1..=2);
    let mut distractors = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        let other = (class_id + rng.random_range(1..NUM_CLASSES)) % NUM_CLASSES;
        let family = class_style(other)?.family;
        let mut placed = None;
        for attempt in 0..100 {
            let shrink = 1.0 - 0.008 * attempt as f64;
            let m = rasterize(family, random_placement(rng, h, w, shrink), h, w);
            let overlap = m.iter().zip(&target).filter(|(a, b)| **a && **b).count();
            if count(&m) > 0 && overlap * 10 <= target_area {
                placed = Some(m);
                break;
            }
        }
        let m = placed.unwrap_or_else(|| {
            // A single background pixel never overlaps the target.
            let free: Vec<usize> = (0..hw).filter(|&k| !target[k]).collect();
            let mut m = vec![false; hw];
            m[free[rng.random_range(0..free.len())]] = true;
            m
        });
        distractors.push((other, m));
    }

    let bg_noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let gray = rng.random_range(0.35..0.6);
    let tint: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(-0.03..0.03)).collect();
    let mut img = vec![0.0; CHANNELS * hw];
    for c in 0..CHANNELS {
        for k in 0..hw {
            img[c * hw + k] = (gray + tint[c] + bg_noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    for (other, m) in &distractors {
        paint(&mut img, m, &class_style(*other)?, rng, h, w);
    }
    paint(&mut img, &target, &style, rng, h, w);

    let mask = target.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok((
        Tensor::new(vec![CHANNELS, h, w], img)?,
        Tensor::new(vec![h, w], mask)?,
        SceneLayout {
            target,
            distractors,
        },
    ))
}

/// Generates an episode together with the layouts of its two scenes.
pub fn gen_episode_detailed(class_id: u32, seed: u64, canvas: (usize, usize)) -> Result<(Episode, [SceneLayout; 2])> {
    let (h, w) = canvas;
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("canvas {h}×{w} is too small")));
    }
    class_style(class_id)?;
    let mut rng = rng::stream(seed, &[tags::EPISODE, class_id as u64, h as u64, w as u64]);
    let (support_img, support_mask, support_layout) = render_scene(class_id, &mut rng, h, w)?;
    let (query_img, query_mask, query_layout) = render_scene(class_id, &mut rng, h, w)?;
    Ok((
        Episode {
            support_img,
            support_mask,
            query_img,
            query_mask,
            class_id,
            seed,
        },
        [support_layout, query_layout],
    ))
}

pub fn gen_episode(class_id: u32, seed: u64, canvas: (usize, usize)) -> Result<Episode> {
    gen_episode_detailed(class_id, seed, canvas).map(|(ep, _)| ep)
}

/// Train/test class partition for one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub fold_index: usize,
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
}

/// Fold `k` tests on the `k`-th contiguous quarter of `class_ids` and trains
/// on the rest.
pub fn split_folds(class_ids: &[u32], fold_index: usize) -> Result<FoldSplit> {
    let n = class_ids.len();
    if n == 0 || !n.is_multiple_of(FOLD_COUNT) {
        return Err(Error::NonDivisibleClassCount {
            count: n,
            folds: FOLD_COUNT,
        });
    }
    if fold_index >= FOLD_COUNT {
        return Err(Error::FoldIndex {
            index: fold_index,
            folds: FOLD_COUNT,
        });
    }
    let per = n / FOLD_COUNT;
    let test: BTreeSet<u32> = class_ids[fold_index * per..(fold_index + 1) * per].iter().copied().collect();
    let train = class_ids.iter().copied().filter(|c| !test.contains(c)).collect();
    Ok(FoldSplit {
        fold_count: FOLD_COUNT,
        fold_index,
        train_classes: train,
        test_classes: test,
    })
}

/// The standard split over all synthetic classes.
pub fn standard_fold(fold_index: usize) -> Result<FoldSplit> {
    let all: Vec<u32> = (0..NUM_CLASSES).collect();
    split_folds(&all, fold_index)
}
