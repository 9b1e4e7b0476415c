use cmflow::rng;
use cmflow::stats::normal_quantile;
use cmflow::tailbound::*;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn zero_net(d0: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![Dense {
            weight: Array2::zeros((1, d0)),
            bias: Array1::zeros(1),
        }],
        Activation::Identity,
    )
    .unwrap()
}

#[test]
fn lemma_is_an_equality_for_one_coordinate() {
    let prior = NoisePrior::standard_gaussian(1);
    let grid = linear_grid(-2.0, 3.0, 11);
    let r = check_lemma_sum_bound(1.5, 0.2, &prior, XGrid::Fixed(&grid), 200_000, 1).unwrap();
    assert_eq!(r.violations, 0);
    for k in 0..grid.len() {
        let exact = 1.0 - normal_cdf((grid[k] - 0.2) / 1.5);
        assert!((r.lhs[k] - exact).abs() <= r.lhs_band && (r.rhs[k] - exact).abs() <= r.rhs_band);
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[test]
fn lemma_gaussian_example() {
    // P(Z1 + Z2 > 2) = 0.0786 against 2 P(2 Z1 > 2) = 0.3173
    let prior = NoisePrior::standard_gaussian(2);
    let r = check_lemma_sum_bound(1.0, 0.0, &prior, XGrid::Fixed(&[2.0]), 1_000_000, 2).unwrap();
    assert!((r.lhs[0] - 0.078_65).abs() < 3e-3, "{}", r.lhs[0]);
    assert!((2.0 * r.rhs[0] - 0.317_31).abs() < 6e-3, "{}", r.rhs[0]);
    assert_eq!(r.violations, 0);
}

#[test]
fn lemma_irwin_hall_example() {
    // three U(0,1): P(ΣU > 2.9) = 0.1^3 / 6 ≈ 1.667e-4 against 3 P(3 U > 2.9) = 0.1
    let prior = NoisePrior::unit_uniform(3);
    let r = check_lemma_sum_bound(1.0, 0.0, &prior, XGrid::Fixed(&[2.9, 1.5]), 1_000_000, 3).unwrap();
    assert!((r.lhs[0] - 1.0e-3 / 6.0).abs() <= r.lhs_band, "{}", r.lhs[0]);
    assert!((r.factor * r.rhs[0] - 0.1).abs() < 3e-3, "{}", r.rhs[0]);
    assert!((r.lhs[1] - 0.5).abs() <= r.lhs_band);
    assert_eq!(r.violations, 0);
}

#[test]
fn standard_normal_survival_at_two() {
    let z = NoisePrior::standard_gaussian(1).sample_component(100_000, 4);
    let s = survival_estimate(&z, &[2.0]).unwrap();
    assert!((s.survival[0] - 0.022_750).abs() <= s.band, "{}", s.survival[0]);
    assert!((-normal_quantile(0.022_750) - 2.0).abs() < 1e-4);
}

#[test]
fn zero_generator_has_empty_tail() {
    let prior = NoisePrior::standard_gaussian(3);
    let r = check_generator_tail_bound(&zero_net(3), &prior, 0, XGrid::Fixed(&linear_grid(0.0, 2.0, 5)), 10_000, 5).unwrap();
    assert!(r.lhs.iter().all(|&v| v == 0.0));
    assert_eq!(r.violations, 0);
    assert_eq!(r.envelope.unwrap().slope, 0.0);
}

#[test]
fn identity_generator_satisfies_bound() {
    let prior = NoisePrior::standard_gaussian(2);
    let r = check_generator_tail_bound(&NetworkSpec::identity(2), &prior, 1, XGrid::Fixed(&linear_grid(0.0, 4.0, 21)), 200_000, 6)
        .unwrap();
    assert_eq!(r.violations, 0);
    let env = r.envelope.unwrap();
    assert_eq!((env.slope, env.intercept), (2.0, 0.0));
}

#[test]
fn random_networks_never_violate() {
    let prior = NoisePrior::standard_gaussian(2);
    for seed in 0..20 {
        let net = NetworkSpec::random(&[2, 8, 2], Activation::Tanh, 0.5, &mut rng::stream(seed, 9)).unwrap();
        let grid = linear_grid(0.0, 5.0, 26);
        let all = check_generator_tail_bounds(&net, &prior, XGrid::Fixed(&grid), 50_000, seed).unwrap();
        for (i, r) in all.iter().enumerate() {
            assert_eq!(r.violations, 0, "seed {seed} coordinate {i}");
            let single = check_generator_tail_bound(&net, &prior, i, XGrid::Fixed(&grid), 50_000, seed).unwrap();
            assert_eq!(&single, r);
        }
    }
}

#[test]
fn sampled_difference_quotients_respect_lipschitz_bound() {
    let mut r = rng::stream(7, 0);
    let zs = NoisePrior::standard_gaussian(3).sample(2000, 8);
    for act in [Activation::Tanh, Activation::LeakyRelu { slope: 0.1 }, Activation::Identity] {
        let net = NetworkSpec::random(&[3, 6, 6, 2], act, 0.3, &mut r).unwrap();
        let l = lipschitz_upper_bound(&net);
        for k in 0..1000 {
            let (a, b) = (zs.row(2 * k).to_vec(), zs.row(2 * k + 1).to_vec());
            let (ga, gb) = (net.eval(&a), net.eval(&b));
            let num: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum();
            let den: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            assert!(num <= l * den * (1.0 + 1e-12), "{act:?}");
        }
    }
}

#[test]
fn moment_bounds_hold() {
    let mut r = rng::stream(10, 0);
    for p in [1, 2, 4] {
        for prior in [NoisePrior::standard_gaussian(2), NoisePrior::unit_uniform(2)] {
            let net = NetworkSpec::random(&[2, 6, 2], Activation::Tanh, 0.5, &mut r).unwrap();
            let rep = check_moment_bound(&net, &prior, p, 100_000, p as u64).unwrap();
            assert!(rep.holds && !rep.premise_violated, "{rep:?}");
            assert!(rep.estimate <= rep.bound.unwrap() + rep.band);
        }
    }
}

#[test]
fn cauchy_prior_violates_the_premise() {
    let prior = NoisePrior::new(PriorFamily::Cauchy { scale: 1.0 }, 2).unwrap();
    let rep = check_moment_bound(&NetworkSpec::identity(2), &prior, 2, 10_000, 1).unwrap();
    assert!(rep.premise_violated && rep.bound.is_none());
}

#[test]
fn mismatched_prior_dimension_is_rejected() {
    let prior = NoisePrior::standard_gaussian(3);
    assert!(matches!(
        check_generator_tail_bound(&NetworkSpec::identity(2), &prior, 0, XGrid::Fixed(&[1.0]), 1000, 0),
        Err(TailError::BadPrior(_))
    ));
    assert!(matches!(
        check_generator_tail_bound(&NetworkSpec::identity(3), &prior, 3, XGrid::Fixed(&[1.0]), 1000, 0),
        Err(TailError::BadCoordinate { index: 3, width: 3 })
    ));
}

#[test]
fn reports_are_reproducible_and_serialise() {
    let prior = NoisePrior::unit_uniform(2);
    let net = NetworkSpec::new(
        vec![Dense {
            weight: array![[1.0, -1.0]],
            bias: array![0.5],
        }],
        Activation::Identity,
    )
    .unwrap();
    let a = check_generator_tail_bound(&net, &prior, 0, XGrid::Span(9), 5000, 3).unwrap();
    let b = check_generator_tail_bound(&net, &prior, 0, XGrid::Span(9), 5000, 3).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let back: BoundReport = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn bounded_generator_has_a_lighter_tail_than_laplace() {
    let cfg = DemoConfig {
        steps: 400,
        eval_samples: 100_000,
        ..DemoConfig::default()
    };
    let rep = tail_comparison_demo(&cfg).unwrap();
    assert!(rep.final_loss < 0.2, "{}", rep.final_loss);
    assert!(rep.slope < 0.0, "{}", rep.slope);
    assert_eq!(rep.support_bound, None);
    let json = serde_json::to_string(&rep).unwrap();
    let back: DemoReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.curve.x, rep.curve.x);
}

#[test]
fn uniform_prior_bounds_generator_support() {
    let cfg = DemoConfig {
        prior: NoisePrior::unit_uniform(1),
        hidden: vec![8],
        steps: 400,
        eval_samples: 1_000_000,
        ..DemoConfig::default()
    };
    let rep = tail_comparison_demo(&cfg).unwrap();
    let bound = rep.support_bound.unwrap();
    assert!(rep.model_max <= bound);
    assert!(rep.target_exceedance.unwrap() > 0.0);
    assert!(rep.target_max > bound);
    // beyond the model maximum the ratio is -inf
    let last = rep.curve.x.iter().rposition(|&x| x < rep.model_max).map_or(0, |k| k + 1);
    assert!(rep.curve.ratio[last..].iter().all(|&r| r == f64::NEG_INFINITY));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn survival_is_monotone(xs in prop::collection::vec(-10f64..10.0, 100..300), lo in -5f64..0.0) {
        let grid = linear_grid(lo, lo + 8.0, 17);
        let s = survival_estimate(&xs, &grid).unwrap();
        prop_assert!(s.survival.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.survival.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scaling_multiplies_bound(c in 0.1f64..4.0, seed in 0u64..50) {
        let net = NetworkSpec::random(&[2, 4, 3], Activation::Tanh, 0.2, &mut rng::stream(seed, 0)).unwrap();
        let base = lipschitz_upper_bound(&net);
        let scaled = lipschitz_upper_bound(&net.scaled(c));
        prop_assert!((scaled - base * c * c).abs() <= 1e-12 * scaled.max(1.0));
    }
}
