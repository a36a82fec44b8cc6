//! Kernels and fusion pieces against brute-force loop references.

mod common;

use common::{cm_matches, max_rel, oracle_errors, randn, rng};
use glpnet::tensor::kernels::{bilinear_sample, conv2d, identity_grid};
use glpnet::tensor::{ConvGeom, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-5;

#[test]
fn kernels_and_gcfm_match_loop_references() {
    for seed in 0..25 {
        let errs = oracle_errors(seed);
        for (name, e) in ["conv2d", "bilinear_sample", "extract_contexts", "attend"]
            .iter()
            .zip(errs)
        {
            assert!(e < TOL, "{name} seed {seed}: rel err {e:.3e}");
        }
    }
}

#[test]
fn confusion_update_matches_loop_reference() {
    for seed in 0..25 {
        assert!(cm_matches(seed), "seed {seed}");
    }
}

#[test]
fn strided_dilated_conv_matches_reference() {
    let mut r = rng(9);
    let x = randn(&[2, 3, 9, 7], &mut r);
    let w = randn(&[4, 3, 3, 3], &mut r);
    let b = randn(&[4], &mut r);
    for geom in [
        ConvGeom::new(2, 1, 1),
        ConvGeom::new(1, 2, 2),
        ConvGeom::new(3, 0, 2),
    ] {
        let got = conv2d(&x, &w, Some(&b), geom).unwrap();
        assert!(max_rel(got.data(), &common::conv2d(&x, &w, Some(&b), geom)) < TOL);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sampling_the_identity_grid_returns_the_input(n in 1usize..3, c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
        let x = randn(&[n, c, h, w], &mut rng(seed));
        let y = bilinear_sample(&x, &identity_grid::<f64>(n, h, w)).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn sampling_is_a_convex_combination(h in 2usize..6, w in 2usize..6, px in -3.0f64..9.0, py in -3.0f64..9.0, seed in 0u64..1000) {
        let x = randn(&[1, 1, h, w], &mut rng(seed));
        let coords = Tensor::new([1, 2, 1, 1], vec![px, py]).unwrap();
        let v = bilinear_sample(&x, &coords).unwrap().data()[0];
        let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn one_by_one_conv_is_a_channel_mix(cin in 1usize..5, cout in 1usize..5, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = randn(&[1, cin, h, w], &mut r);
        let wt = randn(&[cout, cin, 1, 1], &mut r);
        let y = conv2d(&x, &wt, None, ConvGeom::default()).unwrap();
        let p = h * w;
        for o in 0..cout {
            for i in 0..p {
                let want: f64 = (0..cin).map(|c| wt.data()[o * cin + c] * x.data()[c * p + i]).sum();
                prop_assert!((y.data()[o * p + i] - want).abs() < 1e-12);
            }
        }
    }
}
