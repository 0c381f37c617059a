mod common;

use common::{FusionCase, FD_TOLERANCE};
use evfuse::fusion::{
    combine_frequencies, concat_features, fuse, fusion_regularizer, fusion_regularizer_grad, gate_forward, gate_weights,
    FeatureMap, FusionBlock, GateParams, GateWeights, NoiseMode,
};
use evfuse::seed;
use proptest::prelude::*;
use rand::Rng;

fn random_map(s: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    let mut rng = seed::stream(s, "map");
    FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect(), 0).unwrap()
}

fn random_gate(s: u64, rows: usize, sigma: f64) -> GateParams {
    let mut rng = seed::stream(s, "gate");
    let mut g = GateParams::zeros(rows);
    g.w.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
    g.sigma = sigma;
    g
}

#[test]
fn gate_fuse_and_regularizer_match_finite_differences() {
    let mut rng = seed::stream(3, "fusion-fd");
    for lambda in [0.0, 0.01, 0.1] {
        for _ in 0..12 {
            let case = FusionCase::random(&mut rng, lambda);
            let err = case.max_rel_error();
            assert!(err <= FD_TOLERANCE, "lambda {lambda}: max relative error {err}");
        }
    }
}

#[test]
fn regularizer_hand_values() {
    let w = GateWeights {
        height: 1,
        width: 2,
        alpha: vec![0.25, 0.75],
        beta: vec![0.75, 0.25],
    };
    assert!((fusion_regularizer(&[&w], 1.0).unwrap() - 0.5).abs() < 1e-12);
    let flat = GateWeights::constant(3, 3, 0.5);
    assert_eq!(fusion_regularizer(&[&flat], 1.0).unwrap(), 0.0);
    assert_eq!(fusion_regularizer(&[&w], 0.0).unwrap(), 0.0);
    assert!(fusion_regularizer(&[], 1.0).is_err());
    let g = fusion_regularizer_grad(&[&flat], 0.3).unwrap();
    assert!(g[0].0.iter().chain(&g[0].1).all(|&v| v == 0.0));
}

#[test]
fn concat_example_shapes() {
    let a = random_map(1, 3, 4, 4);
    let b = random_map(2, 5, 4, 4);
    let c = concat_features(&a, &b).unwrap();
    assert_eq!((c.channels, c.height, c.width), (8, 4, 4));
    assert_eq!(c.channel(2), a.channel(2));
    assert_eq!(c.channel(3), b.channel(0));
    assert!(concat_features(&a, &random_map(3, 1, 4, 3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn gate_is_normalized(s in any::<u64>(), rows in 1usize..7, h in 1usize..5, w in 1usize..5, sigma in 0.0f64..2.0, training in any::<bool>()) {
        let shared = random_map(s, rows, h, w);
        let g = gate_weights(&shared, &random_gate(s, rows, sigma), training, &mut seed::stream(s, "noise")).unwrap();
        for (a, b) in g.alpha.iter().zip(&g.beta) {
            prop_assert!((a + b - 1.0).abs() <= 1e-6);
            prop_assert!(*a >= 0.0 && *a <= 1.0);
        }
    }

    #[test]
    fn eval_gate_ignores_rng_and_zero_sigma_ignores_training(s in any::<u64>(), rows in 1usize..5) {
        let shared = random_map(s, rows, 3, 2);
        let p = random_gate(s, rows, 0.7);
        let a = gate_weights(&shared, &p, false, &mut seed::stream(1, "x")).unwrap();
        let b = gate_weights(&shared, &p, false, &mut seed::stream(2, "y")).unwrap();
        prop_assert_eq!(a, b);
        let quiet = random_gate(s, rows, 0.0);
        for noise in [NoiseMode::PerLogit, NoiseMode::PerMap] {
            let t = gate_forward(&shared, &quiet, true, noise, &mut seed::stream(3, "z")).unwrap();
            let e = gate_forward(&shared, &quiet, false, noise, &mut seed::stream(3, "z")).unwrap();
            prop_assert_eq!(t.weights, e.weights);
        }
    }

    #[test]
    fn fuse_and_combine_match_scalar_loops(s in any::<u64>(), c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let (e, f) = (random_map(s, c, h, w), random_map(s ^ 1, c, h, w));
        let mut rng = seed::stream(s, "alpha");
        let alpha: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = GateWeights { height: h, width: w, beta: alpha.iter().map(|a| 1.0 - a).collect(), alpha };
        let out = fuse(&e, &f, &g).unwrap();
        let sum = combine_frequencies(&e, &f).unwrap();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let i = (ch * h + y) * w + x;
                    let p = y * w + x;
                    prop_assert_eq!(out.data[i], g.alpha[p] * e.data[i] + g.beta[p] * f.data[i]);
                    prop_assert_eq!(sum.data[i], e.data[i] + f.data[i]);
                }
            }
        }
        prop_assert_eq!(combine_frequencies(&e, &f).unwrap(), combine_frequencies(&f, &e).unwrap());
    }

    #[test]
    fn regularizer_is_nonnegative_and_zero_only_when_flat(s in any::<u64>(), n in 1usize..12) {
        let mut rng = seed::stream(s, "reg");
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let g = GateWeights { height: 1, width: n, beta: alpha.iter().map(|a| 1.0 - a).collect(), alpha: alpha.clone() };
        let r = fusion_regularizer(&[&g], 1.0).unwrap();
        prop_assert!(r >= 0.0);
        let flat = alpha.iter().all(|a| (a - alpha[0]).abs() < 1e-12);
        prop_assert_eq!(r < 1e-15, flat);
    }

    #[test]
    fn saturated_event_gate_ignores_frame(s in any::<u64>()) {
        let e = random_map(s, 2, 3, 3);
        let forced = GateWeights::constant(3, 3, 1.0);
        let a = fuse(&e, &random_map(s ^ 2, 2, 3, 3), &forced).unwrap();
        let b = fuse(&e, &random_map(s ^ 3, 2, 3, 3), &forced).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &e);
    }

    #[test]
    fn block_output_has_event_shape(s in any::<u64>(), slots in 1usize..3) {
        let (c_e, c_f) = (2, 3);
        let he: Vec<_> = (0..slots).map(|k| random_map(s ^ (k as u64 + 10), c_e, 3, 3)).collect();
        let p = random_gate(s, c_e + c_f, 0.3);
        let mut block = FusionBlock::new();
        let out = block
            .forward(&p, &he, &random_map(s ^ 4, c_f, 3, 3), &random_map(s ^ 5, c_e, 3, 3), false, NoiseMode::PerLogit, &mut seed::stream(0, "n"))
            .unwrap();
        prop_assert_eq!((out.channels, out.height, out.width), (c_e, 3, 3));
    }
}
