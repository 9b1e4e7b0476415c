use cmflow::cm_flow::{pseudo_observations, train_cm_flow, CmError, CmFlow, CmTrainConfig, model_pseudo_observations};
use cmflow::copula_flow::{CopulaFlow, DEFAULT_EPS};
use cmflow::coupling::RealNvp2;
use cmflow::marginal::{
    train_marginal, BivariateMarginalFlow, MarginalError, MarginalTrainConfig, TailBelief, UnivariateMarginalFlow,
};
use cmflow::ref_copulas::ReferenceCopula;
use cmflow::rng;
use cmflow::stats::{kendall_tau, normal_quantile, pearson};
use proptest::prelude::*;

fn gaussian_marginal(seed: u64) -> BivariateMarginalFlow {
    let mut r = rng::stream(seed, 0);
    let b = || TailBelief::gaussian(0.0, 1.0, -2.0, 2.0).unwrap();
    BivariateMarginalFlow::new(
        UnivariateMarginalFlow::with_default_body(b(), &mut r).unwrap(),
        UnivariateMarginalFlow::with_default_body(b(), &mut r).unwrap(),
    )
}

fn random_copula(seed: u64) -> CopulaFlow {
    let net = RealNvp2::new(4, 16, false, 5.0, 0.15, &mut rng::stream(seed, 1));
    CopulaFlow::new(net, DEFAULT_EPS).unwrap()
}

#[test]
fn identity_copula_reduces_to_marginals() {
    let m = gaussian_marginal(0);
    let model = CmFlow::new(m.clone(), CopulaFlow::identity(false));
    for &u in &[[0.3, 0.6], [0.9, 0.1], [0.5, 0.5]] {
        let x = model.sample_point(u).unwrap();
        let y = m.forward(u).unwrap();
        assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        let ld = model.ln_density(x).unwrap();
        assert!((ld - m.ln_pdf(x).unwrap()).abs() < 1e-9);
    }
    // both coordinates deep in the tails: exact gaussian quantiles
    let x = model.sample_point([0.001, 0.995]).unwrap();
    assert!((x[0] - normal_quantile(0.001)).abs() < 1e-9, "{x:?}");
    assert!((x[1] - normal_quantile(0.995)).abs() < 1e-9, "{x:?}");
}

#[test]
fn seam_is_rejected() {
    let model = CmFlow::new(gaussian_marginal(1), random_copula(1));
    assert!(matches!(model.ln_density([2.0, 0.0]), Err(CmError::Marginal(MarginalError::Seam(..)))));
    assert!(model.ln_density([1.999, 0.0]).is_ok());
    assert!(model.ln_density([2.001, 0.0]).is_ok());
}

#[test]
fn density_integrates_over_a_high_mass_box() {
    let model = CmFlow::new(gaussian_marginal(2), random_copula(2));
    // marginal quantiles at 1e-4 and 1 - 1e-4 bound the box mass below by 1 - 4e-4
    let lo = model.marginal.forward([1e-4, 1e-4]).unwrap();
    let hi = model.marginal.forward([1.0 - 1e-4, 1.0 - 1e-4]).unwrap();
    let n = 500;
    let (dx, dy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [lo[0] + (i as f64 + 0.5) * dx, lo[1] + (j as f64 + 0.5) * dy];
            total += model.ln_density(x).unwrap().exp() * dx * dy;
        }
    }
    assert!(total > 1.0 - 4e-4 - 1e-2 && total < 1.0 + 1e-2, "{total}");
}

#[test]
fn trained_marginals_with_identity_copula_are_uncorrelated() {
    let data: Vec<f64> = rng::par_chunks(20_000, 5000, 3, |_, len, r| {
        use rand_distr::{Distribution, StandardNormal};
        (0..len).map(|_| StandardNormal.sample(r)).collect::<Vec<f64>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let cfg = MarginalTrainConfig {
        epochs: 8,
        ..MarginalTrainConfig::default()
    };
    let mut r = rng::stream(4, 0);
    let b = TailBelief::gaussian(0.0, 1.0, -2.0, 2.0).unwrap();
    let m = UnivariateMarginalFlow::with_default_body(b, &mut r).unwrap();
    let (m, _) = train_marginal(&m, &data, &cfg).unwrap();
    let model = CmFlow::new(BivariateMarginalFlow::new(m.clone(), m), CopulaFlow::identity(false));

    let xs = model.sample(100_000, 11).unwrap();
    let rho = pearson(&xs.iter().map(|x| (x[0], x[1])).collect::<Vec<_>>());
    assert!(rho.abs() <= 0.02, "{rho}");

    // NLL on own samples approximates the entropy of two standard normals
    let nll = -xs[..3000].iter().map(|&x| model.ln_density(x).unwrap()).sum::<f64>() / 3000.0;
    let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln();
    assert!((nll - entropy).abs() < 0.1, "{nll} vs {entropy}");
}

#[test]
fn rank_pseudo_observations_keep_kendall_tau() {
    let cop = ReferenceCopula::clayton(2.0).unwrap();
    let data: Vec<[f64; 2]> = cop
        .sample(100_000, 5)
        .unwrap()
        .into_iter()
        .map(|u| [normal_quantile(u[0]) * 3.0 + 1.0, (u[1] / (1.0 - u[1])).ln()])
        .collect();
    let p = pseudo_observations(&data).unwrap();
    assert!(p.iter().all(|c| c[0] > 0.0 && c[0] < 1.0 && c[1] > 0.0 && c[1] < 1.0));
    let tau = kendall_tau(&p.iter().map(|c| (c[0], c[1])).collect::<Vec<_>>());
    assert!((tau - 0.5).abs() <= 0.02, "{tau}");
}

#[test]
fn staged_training_runs_end_to_end() {
    let cop = ReferenceCopula::frank(5.0).unwrap();
    let data: Vec<[f64; 2]> = cop
        .sample(3000, 6)
        .unwrap()
        .into_iter()
        .map(|u| [normal_quantile(u[0]), normal_quantile(u[1])])
        .collect();
    let mut cfg = CmTrainConfig::default();
    cfg.marginal.epochs = 2;
    cfg.copula.max_steps = 60;
    cfg.copula.batch_size = 500;
    cfg.copula.eval_every = 20;
    cfg.copula.adam.lr = 5e-3;
    let b = || TailBelief::gaussian(0.0, 1.0, -2.0, 2.0).unwrap();
    let (model, report) = train_cm_flow(&data, [b(), b()], &cfg).unwrap();
    assert_eq!(report.copula_history.len(), 3);
    assert!(report.copula_history[2].train_nll < report.copula_history[0].train_nll);
    let x = model.sample(200, 1).unwrap();
    assert!(x.iter().all(|x| model.ln_density(*x).map(f64::is_finite).unwrap_or(false)));
    let mp = model_pseudo_observations(&model.marginal, &data).unwrap();
    assert!(mp.iter().all(|c| c[0] > 0.0 && c[0] < 1.0));
    let back: CmFlow = serde_json::from_str(&serde_json::to_string(&model).unwrap()).unwrap();
    assert_eq!(back, model);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inverse_chain_recovers_u(u1 in 0.001f64..0.999, u2 in 0.001f64..0.999, seed in 0u64..4) {
        let model = CmFlow::new(gaussian_marginal(seed), random_copula(seed));
        let x = model.sample_point([u1, u2]).unwrap();
        let back = model.inverse_point(x).unwrap();
        prop_assert!((back[0] - u1).abs() < 1e-8 && (back[1] - u2).abs() < 1e-8, "{:?}", back);
        prop_assert!(model.ln_density(x).unwrap().is_finite());
    }
}
