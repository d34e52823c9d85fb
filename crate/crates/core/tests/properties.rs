//! Property tests for kernels, attention, metrics and the data layer.

use std::collections::BTreeMap;

use dcsam_core::attention::{self, AttentionBlock};
use dcsam_core::episode::{split_folds, standard_fold, NUM_CLASSES};
use dcsam_core::mask;
use dcsam_core::metrics::{boundary_f, iou, miou};
use dcsam_core::oracle::{self, Rows};
use dcsam_core::tensor::{self, masked_softmax_rows, Bias, Tensor, MASKED};
use dcsam_core::{decoder, rng};
use proptest::prelude::*;
use rand::Rng;

fn rows_to_tensor(r: &Rows) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

fn mask_tensor(labels: &[bool]) -> Tensor {
    Tensor::new(vec![labels.len()], labels.iter().map(|&l| f64::from(u8::from(l))).collect()).unwrap()
}

fn matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
}

fn binary(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(any::<bool>(), h * w)
        .prop_map(move |b| Tensor::new(vec![h, w], b.iter().map(|&x| f64::from(u8::from(x))).collect()).unwrap())
}

fn random_block(rng: &mut impl Rng, d: usize) -> AttentionBlock {
    AttentionBlock::random(d, rng)
}

#[test]
fn cycle_bias_matches_brute_force_on_1000_instances() {
    let outcome = oracle::run_cycle_suite(1000, 42);
    assert_eq!(outcome.passed, 1000);
}

#[test]
fn all_foreground_reduces_to_cross_attention() {
    for t in 0..100u64 {
        let mut r = rng::stream(7, &[t]);
        let d = r.random_range(1..=4);
        let n = r.random_range(1..=4);
        let hw = r.random_range(1..=9);
        let block = random_block(&mut r, d);
        let q = rows_to_tensor(&oracle::random_rows(&mut r, n, d));
        let f = rows_to_tensor(&oracle::random_rows(&mut r, hw, d));
        let biased = attention::qcyc_attention(&block, &q, &f, &Tensor::ones(vec![hw])).unwrap();
        let plain = attention::cross_attention(&block, &q, &f).unwrap();
        assert!(biased.max_abs_diff(&plain) <= 1e-12);
        let zeros = attention::qcyc_attention(&block, &q, &f, &Tensor::zeros(vec![hw])).unwrap();
        assert!(zeros.max_abs_diff(&plain) <= 1e-12);
    }
}

#[test]
fn qcyc_attention_matches_loop_oracle() {
    for t in 0..200u64 {
        let mut r = rng::stream(8, &[t]);
        let d = r.random_range(1..=4);
        let n = r.random_range(1..=4);
        let hw = r.random_range(1..=9);
        let block = random_block(&mut r, d);
        let q = oracle::random_rows(&mut r, n, d);
        let f = oracle::random_rows(&mut r, hw, d);
        let labels: Vec<bool> = (0..hw).map(|_| r.random_bool(0.5)).collect();
        let rows = |t: &Tensor| (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect::<Rows>();
        let want = oracle::qcyc_attention(&rows(&block.wq), &rows(&block.wk), &rows(&block.wv), &q, &f, Some(&labels));
        let got = attention::qcyc_attention(&block, &rows_to_tensor(&q), &rows_to_tensor(&f), &mask_tensor(&labels)).unwrap();
        assert!(got.max_abs_diff(&rows_to_tensor(&want)) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cycle_bias_invariant_under_positive_scaling(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = rng::stream(seed, &[]);
        let (a, labels) = oracle::random_cycle_instance(&mut r, 4, 9);
        let at = rows_to_tensor(&a);
        let m = mask_tensor(&labels);
        let base = attention::cycle_bias(&at, &m).unwrap();
        let scaled = attention::cycle_bias(&at.map("scale", |v| v * c).unwrap(), &m).unwrap();
        prop_assert_eq!(base.flags(), scaled.flags());
        // complementing the mask never changes which positions are consistent
        let inv = attention::cycle_bias(&at, &mask::invert(&m)).unwrap();
        prop_assert_eq!(base.flags(), inv.flags());
    }

    #[test]
    fn qcyc_attention_permutation_equivariant(seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[1]);
        let (d, n, hw) = (3, 4, 7);
        let block = random_block(&mut r, d);
        let q = oracle::random_rows(&mut r, n, d);
        let f = oracle::random_rows(&mut r, hw, d);
        let labels: Vec<bool> = (0..hw).map(|_| r.random_bool(0.5)).collect();
        let out = attention::qcyc_attention(&block, &rows_to_tensor(&q), &rows_to_tensor(&f), &mask_tensor(&labels)).unwrap();

        let qperm: Vec<usize> = rand::seq::index::sample(&mut r, n, n).into_vec();
        let fperm: Vec<usize> = rand::seq::index::sample(&mut r, hw, hw).into_vec();
        let q2: Rows = qperm.iter().map(|&i| q[i].clone()).collect();
        let f2: Rows = fperm.iter().map(|&j| f[j].clone()).collect();
        let l2: Vec<bool> = fperm.iter().map(|&j| labels[j]).collect();
        let out2 = attention::qcyc_attention(&block, &rows_to_tensor(&q2), &rows_to_tensor(&f2), &mask_tensor(&l2)).unwrap();
        for (k, &i) in qperm.iter().enumerate() {
            for c in 0..d {
                prop_assert!((out2.at2(k, c) - out.at2(i, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_normalized(x in matrix(3, 6), masked in prop::collection::vec(any::<bool>(), 6)) {
        let mut bias: Vec<f64> = masked.iter().map(|&m| if m { MASKED } else { 0.0 }).collect();
        bias[0] = 0.0;
        let y = masked_softmax_rows(&x, &Bias::per_column(bias.clone()).unwrap()).unwrap();
        for i in 0..3 {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (v, b) in y.row(i).iter().zip(&bias) {
                if *b == MASKED {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn matmul_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
        let left = tensor::matmul(&tensor::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = tensor::matmul(&a, &tensor::matmul(&b, &c).unwrap()).unwrap();
        let scale = left.data().iter().chain(right.data()).fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
    }

    #[test]
    fn conv1x1_is_matmul_over_pixels(x in prop::collection::vec(-2.0f64..2.0, 3 * 2 * 2), w in matrix(4, 3), b in prop::collection::vec(-1.0f64..1.0, 4)) {
        let xt = Tensor::new(vec![3, 2, 2], x).unwrap();
        let bt = Tensor::new(vec![4], b.clone()).unwrap();
        let got = tensor::conv1x1(&xt, &w, &bt).unwrap();
        for (o, bo) in b.iter().enumerate() {
            for p in 0..4 {
                let mut s = *bo;
                for c in 0..3 {
                    s += w.at2(o, c) * xt.data()[c * 4 + p];
                }
                prop_assert!((got.data()[o * 4 + p] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn iou_symmetric_and_flip_invariant(a in binary(5, 6), b in binary(5, 6)) {
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        let flip = |m: &Tensor| {
            let (h, w) = m.dims2("flip").unwrap();
            Tensor::new(vec![h, w], (0..h * w).map(|k| m.data()[(k / w) * w + (w - 1 - k % w)]).collect()).unwrap()
        };
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&flip(&a), &flip(&b)).unwrap());
    }

    #[test]
    fn boundary_f_symmetric(a in binary(6, 6), b in binary(6, 6), tol in 0usize..3) {
        prop_assert_eq!(boundary_f(&a, &b, tol).unwrap(), boundary_f(&b, &a, tol).unwrap());
        prop_assert_eq!(boundary_f(&a, &a, tol).unwrap(), 1.0);
    }

    #[test]
    fn miou_invariant_under_relabeling(vals in prop::collection::vec(0.0f64..1.0, 1..8), offset in 0u32..1000) {
        let a: BTreeMap<u32, f64> = vals.iter().enumerate().map(|(k, &v)| (k as u32, v)).collect();
        // reversed key order changes map iteration order
        let b: BTreeMap<u32, f64> = vals.iter().enumerate().map(|(k, &v)| (offset + 1000 - k as u32, v)).collect();
        prop_assert!((miou(&a).unwrap() - miou(&b).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn folds_partition_classes(n in 1usize..8, index in 0usize..4) {
        let classes: Vec<u32> = (0..(4 * n) as u32).map(|c| c * 3 + 1).collect();
        let f = split_folds(&classes, index).unwrap();
        prop_assert!(f.train_classes.is_disjoint(&f.test_classes));
        prop_assert_eq!(f.train_classes.len() + f.test_classes.len(), classes.len());
        prop_assert_eq!(f.test_classes.len(), n);
        prop_assert!(classes.iter().all(|c| f.train_classes.contains(c) || f.test_classes.contains(c)));
    }

    #[test]
    fn decoder_monotone_in_alignment(f in prop::collection::vec(-1.0f64..1.0, 3), t in 0.0f64..2.0, dt in 0.01f64..1.0) {
        // moving the positive prompt toward the pixel feature raises the probability
        let feats = Tensor::new(vec![3, 1, 1], f.clone()).unwrap();
        let prob = |alpha: f64| {
            let pos = Tensor::new(vec![1, 3], f.iter().map(|v| v * alpha).collect()).unwrap();
            let neg = Tensor::zeros(vec![1, 3]);
            let ps = dcsam_core::PromptSet { pos: pos.clone(), neg: Some(neg.clone()), pos_labeled: pos, neg_labeled: Some(neg) };
            decoder::decode(&ps, &feats, &decoder::DecoderConfig::default()).unwrap().data()[0]
        };
        prop_assume!(f.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        prop_assert!(prob(t + dt) > prob(t));
    }
}

#[test]
fn decoder_low_temperature_approaches_max() {
    for t in 0..50u64 {
        let mut r = rng::stream(9, &[t]);
        let prompts = rows_to_tensor(&oracle::random_rows(&mut r, 4, 3));
        let feats = Tensor::new(vec![3, 2, 2], (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let smooth = decoder::scores(&prompts, &feats, 1e-3).unwrap();
        let flat = feats.reshape(vec![3, 4]).unwrap();
        let raw = tensor::matmul(&prompts, &flat).unwrap();
        for p in 0..4 {
            let max = (0..4).map(|i| raw.at2(i, p)).fold(f64::NEG_INFINITY, f64::max);
            assert!((smooth.data()[p] - max).abs() <= 1e-2);
        }
    }
}

#[test]
fn standard_folds_cover_all_classes() {
    let mut seen = std::collections::BTreeSet::new();
    for k in 0..4 {
        let f = standard_fold(k).unwrap();
        assert_eq!(f.test_classes.len(), 4);
        assert!(f.test_classes.iter().all(|c| seen.insert(*c)));
    }
    assert_eq!(seen.len(), NUM_CLASSES as usize);
}
