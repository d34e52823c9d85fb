//! Audits of the synthetic episode generator and the tube builder.

use dcsam_core::episode::{gen_episode, gen_episode_detailed, NUM_CLASSES};
use dcsam_core::mask;
use dcsam_core::metrics::iou;
use dcsam_core::video::{make_tube, warp, warp_image, TransformSpec, TubeMotion};
use dcsam_core::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn distractor_overlap_audit_over_1000_seeds() {
    for seed in 0..1000u64 {
        let class = (seed % u64::from(NUM_CLASSES)) as u32;
        let (ep, layouts) = gen_episode_detailed(class, seed, (32, 32)).unwrap();
        for layout in &layouts {
            let area = layout.target.iter().filter(|&&b| b).count();
            assert!(!layout.distractors.is_empty() && layout.distractors.len() <= 2, "seed {seed}");
            for (other, d) in &layout.distractors {
                assert_ne!(*other, class);
                let shared = layout.target.iter().zip(d).filter(|(a, b)| **a && **b).count();
                assert!(shared as f64 <= 0.1 * area as f64, "seed {seed}: overlap {shared} of {area}");
            }
        }
        for m in [&ep.support_mask, &ep.query_mask] {
            assert!(mask::is_binary(m));
            let frac = mask::foreground(m) as f64 / 1024.0;
            assert!((0.02..=0.5).contains(&frac), "seed {seed}: fraction {frac}");
        }
    }
}

#[test]
fn episodes_are_pure_functions_of_inputs() {
    for class in 0..NUM_CLASSES {
        assert_eq!(gen_episode(class, 77, (24, 32)).unwrap(), gen_episode(class, 77, (24, 32)).unwrap());
    }
    assert_ne!(gen_episode(1, 1, (16, 16)).unwrap(), gen_episode(1, 2, (16, 16)).unwrap());
    assert!(matches!(gen_episode(NUM_CLASSES, 0, (16, 16)), Err(Error::UnknownClass(_))));
}

#[test]
fn minimal_canvas_is_accepted() {
    let ep = gen_episode(3, 5, (8, 8)).unwrap();
    assert_eq!(ep.canvas(), (8, 8));
    assert!(mask::foreground(&ep.support_mask) >= 1);
}

#[test]
fn tube_rewarp_audit_over_1000_tubes() {
    for k in 0..1000u64 {
        let ep = gen_episode((k % 16) as u32, k / 16, (16, 16)).unwrap();
        let motion = if k % 2 == 0 { TubeMotion::Full } else { TubeMotion::TranslationOnly };
        let tube = make_tube(&ep, 6, k, motion).unwrap();
        assert_eq!(tube.frames[0], ep.query_img);
        for (t, spec) in tube.transforms.iter().enumerate() {
            assert_eq!(tube.masks[t], warp(&ep.query_mask, spec).unwrap(), "tube {k} frame {t}");
            assert_eq!(tube.frames[t], warp_image(&ep.query_img, spec).unwrap());
            assert!(mask::is_binary(&tube.masks[t]));
        }
    }
}

#[test]
fn translation_tube_shifts_back_to_frame_zero() {
    for k in 0..50u64 {
        let ep = gen_episode((k % 16) as u32, k, (32, 32)).unwrap();
        let tube = make_tube(&ep, 8, k, TubeMotion::TranslationOnly).unwrap();
        for (t, spec) in tube.transforms.iter().enumerate() {
            let back = TransformSpec { dx: -spec.dx, dy: -spec.dy, ..*spec };
            let restored = warp(&tube.masks[t], &back).unwrap();
            // compare only pixels whose content stayed on the canvas
            let (h, w) = (32i32, 32i32);
            let keep: Vec<f64> = (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w + spec.dy, p % w + spec.dx);
                    f64::from(u8::from(y >= 0 && y < h && x >= 0 && x < w))
                })
                .collect();
            let keep = Tensor::new(vec![32, 32], keep).unwrap();
            let clip = |m: &Tensor| Tensor::new(vec![32, 32], m.data().iter().zip(keep.data()).map(|(a, b)| a * b).collect()).unwrap();
            assert_eq!(iou(&clip(&restored), &clip(&ep.query_mask)).unwrap(), 1.0, "tube {k} frame {t}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warping_keeps_masks_binary(
        bits in prop::collection::vec(any::<bool>(), 9 * 7),
        dx in -4i32..4, dy in -4i32..4, flip in any::<bool>(), scale_index in 0usize..3,
    ) {
        let m = Tensor::new(vec![9, 7], bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap();
        let out = warp(&m, &TransformSpec { dx, dy, flip, scale_index }).unwrap();
        prop_assert!(mask::is_binary(&out));
    }
}
