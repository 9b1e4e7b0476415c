use cmflow::metrics::{
    jsd_grid, jsd_pointwise_map, metric_report, uniformity_m, uniformity_t, BinSpec, MetricConfig,
};
use cmflow::ref_copulas::ReferenceCopula;
use proptest::prelude::*;

fn floor(n: usize, bins: usize) -> f64 {
    let p = 1.0 / bins as f64;
    (2.0 / std::f64::consts::PI).sqrt() * ((1.0 - p) / (p * n as f64)).sqrt()
}

fn mean_tm(n: usize, seeds: std::ops::Range<u64>) -> (f64, f64) {
    let uni = ReferenceCopula::independence();
    let k = seeds.end - seeds.start;
    let (mut t, mut m) = (0.0, 0.0);
    for seed in seeds {
        let s = uni.sample(n, seed).unwrap();
        let bins = BinSpec::default();
        t += uniformity_t(&s, 1, bins).unwrap();
        m += uniformity_m(&s, 1, bins).unwrap();
    }
    (t / k as f64, m / k as f64)
}

#[test]
fn jsd_is_stable_under_refinement() {
    let ind = ReferenceCopula::independence();
    let cl = ReferenceCopula::clayton(2.0).unwrap();
    let coarse = jsd_grid(&ind, &cl, 300).unwrap();
    let fine = jsd_grid(&ind, &cl, 1200).unwrap();
    assert!(coarse > 0.01);
    assert!((coarse - fine).abs() <= 0.1 * fine, "{coarse} {fine}");
    let sym = jsd_grid(&cl, &ind, 300).unwrap();
    assert!((coarse - sym).abs() < 1e-14);
}

#[test]
fn uniform_sampler_sits_at_monte_carlo_floor() {
    let n = 500_000;
    let (t, m) = mean_tm(n, 0..6);
    let expected = floor(n, 25);
    assert!((expected - 5.528e-3).abs() < 1e-5);
    assert!((t - expected).abs() <= 0.2 * expected, "T {t} vs {expected}");
    let per_bin = 6.9e-3;
    assert!(m >= 1.5 * per_bin && m <= 3.0 * per_bin, "M {m}");
}

#[test]
fn floor_scales_as_inverse_root_n() {
    let ns = [10_000usize, 100_000, 500_000, 2_000_000];
    for &n in &ns {
        let (t, m) = mean_tm(n, 10..14);
        let ratio = t / floor(n, 25);
        assert!((0.75..1.25).contains(&ratio), "n {n}: T ratio {ratio}");
        assert!(m >= t);
    }
}

#[test]
fn report_on_independence_meets_thresholds() {
    let cfg = MetricConfig {
        seed: 7,
        ..MetricConfig::default()
    };
    let ind = ReferenceCopula::independence();
    let (r, stop) = metric_report(&ind, &ind, &cfg).unwrap();
    assert_eq!(r.jsd, 0.0);
    assert_eq!(r.nll, 0.0);
    assert!(stop, "{r:?}");
    let (again, _) = metric_report(&ind, &ind, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn report_on_mismatched_target_does_not_stop() {
    let cfg = MetricConfig {
        mc_samples: 50_000,
        ..MetricConfig::default()
    };
    let ind = ReferenceCopula::independence();
    let cl = ReferenceCopula::clayton(2.0).unwrap();
    let (r, stop) = metric_report(&ind, &cl, &cfg).unwrap();
    assert!(r.jsd > 1e-2, "{}", r.jsd);
    assert!(!stop);
    assert_eq!(r.nll, 0.0);
}

#[test]
fn pointwise_map_of_mismatch_peaks_in_lower_corner() {
    let ind = ReferenceCopula::independence();
    let cl = ReferenceCopula::clayton(2.0).unwrap();
    let map = jsd_pointwise_map(&ind, &cl, 100).unwrap();
    let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
    for i in 0..100 {
        for j in 0..100 {
            if let Some(v) = map.get(i, j) {
                if v > best {
                    best = v;
                    at = (i, j);
                }
            }
        }
    }
    assert!(at.0 < 10 && at.1 < 10, "{at:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn t_never_exceeds_m(seed in 0u64..1000, n in 25usize..5000, bins in 1usize..25) {
        let bins = bins.min(n);
        let s = ReferenceCopula::clayton(2.0).unwrap().sample(n, seed).unwrap();
        let spec = BinSpec { n: bins };
        for c in 1..=2 {
            let t = uniformity_t(&s, c, spec).unwrap();
            let m = uniformity_m(&s, c, spec).unwrap();
            prop_assert!(t >= 0.0 && t <= m);
        }
    }

    #[test]
    fn jsd_bounded_and_symmetric(t1 in 0.5f64..8.0, t2 in 1.0f64..6.0) {
        let p = ReferenceCopula::clayton(t1).unwrap();
        let q = ReferenceCopula::gumbel(t2).unwrap();
        let a = jsd_grid(&p, &q, 40).unwrap();
        let b = jsd_grid(&q, &p, 40).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }
}
