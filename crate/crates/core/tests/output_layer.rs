mod common;

use common::{brute_force_posterior, finite_difference_check, naive_softmax, GRAD_TOL};
use ksoftmax::kernels::KernelSpec;
use ksoftmax::output_layer::{backward, loss, posterior, MixtureConfig, OutputParams, VarianceMode};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(s: &str) -> KernelSpec<f64> {
    s.parse().unwrap()
}

fn random_h(rng: &mut ChaCha8Rng, b: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((b, d), || rng.random_range(-scale..scale))
}

fn setup(
    kinds: &[&str],
    d: usize,
    v: usize,
    rho: f64,
    seed: u64,
) -> (MixtureConfig<f64>, OutputParams<f64>, ChaCha8Rng) {
    let config = MixtureConfig::new(kinds.iter().map(|s| spec(s)).collect(), d, v).with_rho(rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = OutputParams::init(&config, &mut rng);
    // move the log-variances off their symmetric starting point
    for a in params
        .word_log_vars
        .iter_mut()
        .chain(params.component_log_vars.iter_mut())
    {
        a.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    (config, params, rng)
}

#[test]
fn posterior_matches_brute_force_mixture() {
    let (config, params, mut rng) = setup(&["lin", "pow"], 4, 7, 0.1, 11);
    let h = random_h(&mut rng, 3, 4, 1.0);
    let (p, _) = posterior(&config, &params, h.view()).unwrap();
    let oracle = brute_force_posterior(&config, &params, &h);
    for (a, b) in p.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn brute_force_agrees_for_every_kernel() {
    for kind in ["log", "pol", "rbf", "ssg", "mog", "wav"] {
        let (config, params, mut rng) = setup(&["lin", kind], 4, 6, 0.1, 5);
        let h = random_h(&mut rng, 2, 4, 1.0);
        let (p, _) = posterior(&config, &params, h.view()).unwrap();
        let oracle = brute_force_posterior(&config, &params, &h);
        for (a, b) in p.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn single_lin_component_is_textbook_softmax() {
    let (config, params, mut rng) = setup(&["lin"], 5, 9, 0.0, 2);
    let h = random_h(&mut rng, 4, 5, 2.0);
    let (p, _) = posterior(&config, &params, h.view()).unwrap();
    let logits = h.dot(&params.w);
    for (b, row) in logits.rows().into_iter().enumerate() {
        for (v, q) in naive_softmax(&row.to_vec()).into_iter().enumerate() {
            assert!((p[[b, v]] - q).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_components_reduce_to_one() {
    let (config2, mut params2, mut rng) = setup(&["rbf", "rbf"], 3, 5, 0.1, 4);
    params2.transforms[1] = params2.transforms[0].clone();
    let h = random_h(&mut rng, 3, 3, 1.0);
    let (p2, cache2) = posterior(&config2, &params2, h.view()).unwrap();

    let config1 = MixtureConfig::new(vec![spec("rbf")], 3, 5);
    let params1 = OutputParams {
        w: params2.w.clone(),
        word_log_vars: None,
        gating: None,
        transforms: vec![],
        component_log_vars: None,
    };
    let (p1, _) = posterior(&config1, &params1, cache2.transformed[0].view()).unwrap();
    for (a, b) in p2.iter().zip(&p1) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_rho_is_plain_cross_entropy() {
    let (config, params, mut rng) = setup(&["lin", "log"], 3, 5, 0.0, 8);
    let h = random_h(&mut rng, 4, 3, 1.0);
    let targets = [0, 4, 2, 2];
    let (value, cache) = loss(&config, &params, h.view(), &targets).unwrap();
    let p = cache.posterior();
    let ce: f64 = targets.iter().enumerate().map(|(b, &t)| -p[[b, t]].ln()).sum::<f64>() / 4.0;
    assert_eq!(value.regularizer, 0.0);
    assert!((value.total - ce).abs() < 1e-12);
}

#[test]
fn regularizer_is_scaled_per_datum_variance() {
    let (config, params, mut rng) = setup(&["lin", "log", "rbf"], 3, 5, 0.7, 21);
    let h = random_h(&mut rng, 4, 3, 3.0);
    let (value, cache) = loss(&config, &params, h.view(), &[0, 1, 2, 3]).unwrap();
    let mut total = 0.0;
    for row in cache.mixture.rows() {
        let mean = row.sum() / 3.0;
        total += row.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 3.0;
    }
    assert!((value.regularizer - 0.7 * total / 4.0).abs() < 1e-15);
}

#[test]
fn lin_gradient_matches_textbook_softmax() {
    let (config, params, mut rng) = setup(&["lin"], 4, 6, 0.0, 3);
    let h = random_h(&mut rng, 5, 4, 1.0);
    let targets = [0, 5, 1, 1, 3];
    let (_, cache) = loss(&config, &params, h.view(), &targets).unwrap();
    let g = backward(&config, &params, &cache, &targets).unwrap();

    let mut delta = Array2::zeros((5, 6));
    for (b, row) in h.dot(&params.w).rows().into_iter().enumerate() {
        for (v, q) in naive_softmax(&row.to_vec()).into_iter().enumerate() {
            delta[[b, v]] = (q - f64::from(u8::from(v == targets[b]))) / 5.0;
        }
    }
    let d_w = h.t().dot(&delta);
    let d_h = delta.dot(&params.w.t());
    for (a, b) in g.params.w.iter().zip(&d_w) {
        assert!((a - b).abs() < 1e-14);
    }
    for (a, b) in g.d_inputs.iter().zip(&d_h) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn check_all_grads(kinds: &[&str], rho: f64, mode: VarianceMode, seed: u64) {
    let (mut config, params, mut rng) = setup(kinds, 3, 5, rho, seed);
    config.variance_mode = mode;
    let h = random_h(&mut rng, 2, 3, 0.9);
    let targets = [1, 4];
    let (_, cache) = loss(&config, &params, h.view(), &targets).unwrap();
    let g = backward(&config, &params, &cache, &targets).unwrap();
    let objective = |p: &OutputParams<f64>| loss(&config, p, h.view(), &targets).unwrap().0.total;
    let bad = finite_difference_check(&params, &g.params, objective, 1e-6, GRAD_TOL);
    assert!(bad.is_empty(), "{kinds:?} rho={rho} {mode:?}: {bad:#?}");

    let eps = 1e-6;
    for i in 0..h.len() {
        let mut up = h.clone();
        let mut down = h.clone();
        up.as_slice_mut().unwrap()[i] += eps;
        down.as_slice_mut().unwrap()[i] -= eps;
        let n = (loss(&config, &params, up.view(), &targets).unwrap().0.total
            - loss(&config, &params, down.view(), &targets).unwrap().0.total)
            / (2.0 * eps);
        let a = g.d_inputs.as_slice().unwrap()[i];
        assert!(GRAD_TOL.accepts(a, n), "{kinds:?} dH[{i}]: {a} vs {n}");
    }
}

#[test]
fn gradients_match_finite_differences_for_one_two_three_components() {
    check_all_grads(&["lin"], 0.0, VarianceMode::PerDatum, 1);
    check_all_grads(&["lin", "rbf"], 0.5, VarianceMode::PerDatum, 2);
    check_all_grads(&["lin", "log", "ssg"], 0.5, VarianceMode::PerDatum, 3);
    check_all_grads(&["lin", "log", "ssg"], 0.5, VarianceMode::AcrossData, 4);
}

#[test]
fn every_kernel_passes_gradient_check_inside_a_pair() {
    let kinds = [
        "lin",
        "log",
        "pow:p=3",
        "pol:p=3",
        "rbf",
        "ssg",
        "mog:gauss=3",
        "mog:gauss=3:mog=log-of-sum",
        "hpb",
        "wav",
    ];
    for (i, kind) in kinds.iter().enumerate() {
        check_all_grads(&["lin", kind], 0.3, VarianceMode::PerDatum, 100 + i as u64);
        check_all_grads(&[kind], 0.0, VarianceMode::PerDatum, 200 + i as u64);
    }
}

#[test]
fn fixed_variances_get_no_gradient() {
    let (config, params, mut rng) = setup(&["ssg:learn_var=false"], 3, 4, 0.0, 6);
    let h = random_h(&mut rng, 2, 3, 1.0);
    let (_, cache) = loss(&config, &params, h.view(), &[0, 1]).unwrap();
    let g = backward(&config, &params, &cache, &[0, 1]).unwrap();
    assert!(g.params.word_log_vars.unwrap().iter().all(|&x| x == 0.0));
    assert!(g.params.component_log_vars.unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn uniform_mixture_has_zero_regularizer_gradient() {
    let (config, mut params, mut rng) = setup(&["lin", "lin"], 3, 4, 10.0, 7);
    params.gating.as_mut().unwrap().fill(0.0);
    let h = random_h(&mut rng, 3, 3, 1.0);
    let targets = [0, 1, 2];
    let (_, cache) = loss(&config, &params, h.view(), &targets).unwrap();
    let with_reg = backward(&config, &params, &cache, &targets).unwrap();
    let config0 = config.clone().with_rho(0.0);
    let without = backward(&config0, &params, &cache, &targets).unwrap();
    assert_eq!(with_reg.params.gating, without.params.gating);
}

const KINDS: [&str; 9] = ["lin", "log", "pow", "pol", "rbf", "ssg", "mog", "hpb", "wav"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_stochastic_at_large_magnitudes(
        kind in 0usize..9,
        second in 0usize..9,
        scale in 0.01f64..50.0,
        seed in any::<u64>(),
    ) {
        let (config, mut params, mut rng) = setup(&[KINDS[kind], KINDS[second]], 4, 6, 0.1, seed);
        let magnitude = |a: &mut Array2<f64>| {
            let m = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            a.mapv_inplace(|x| x * scale / m);
        };
        magnitude(&mut params.w);
        magnitude(params.gating.as_mut().unwrap());
        for c in &mut params.transforms {
            magnitude(c);
        }
        params.project(&config);
        let h = random_h(&mut rng, 3, 4, scale);
        match posterior(&config, &params, h.view()) {
            Ok((p, cache)) => {
                for row in p.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
                for row in cache.mixture.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
                for ls in &cache.log_softmax {
                    for row in ls.rows() {
                        prop_assert!((row.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
                    }
                }
            }
            Err(e) => prop_assert!(matches!(e, ksoftmax::Error::NonFiniteScore { .. }), "{e}"),
        }
    }

    #[test]
    fn posterior_is_a_convex_combination(kind in 0usize..9, seed in any::<u64>()) {
        let (config, params, mut rng) = setup(&["lin", KINDS[kind], "rbf"], 4, 5, 0.1, seed);
        let h = random_h(&mut rng, 3, 4, 2.0);
        let (p, cache) = posterior(&config, &params, h.view()).unwrap();
        for ((b, v), &x) in p.indexed_iter() {
            let qs: Vec<f64> = cache.log_softmax.iter().map(|ls| ls[[b, v]].exp()).collect();
            let lo = qs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(x >= lo - 1e-15 && x <= hi + 1e-15);
        }
    }

    #[test]
    fn shifting_one_component_logits_is_invisible(shift in -30.0f64..30.0, seed in any::<u64>()) {
        let (config, params, mut rng) = setup(&["rbf", "pol:p=1:c=0"], 3, 6, 0.1, seed);
        let h = random_h(&mut rng, 3, 3, 1.0);
        let (p, _) = posterior(&config, &params, h.view()).unwrap();
        let mut shifted = config.clone();
        shifted.components[1] = shifted.components[1].with_c(shift);
        let (q, cache) = posterior(&shifted, &params, h.view()).unwrap();
        let diff = &cache.logits[1] - &posterior(&config, &params, h.view()).unwrap().1.logits[1];
        prop_assert!(diff.iter().all(|x| (x - shift).abs() < 1e-9));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(p.sum_axis(Axis(1)).iter().all(|s| (s - 1.0).abs() < 1e-12));
    }
}
