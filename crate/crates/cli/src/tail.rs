//! Tail-bound verification over random networks.

use cmflow::metrics::sub_seed;
use cmflow::rng;
use cmflow::tailbound::{
    check_generator_tail_bounds, check_lemma_sum_bound, check_moment_bound, lipschitz_upper_bound, Activation,
    BoundReport, MomentReport, NetworkSpec, NoisePrior, PriorFamily, XGrid,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::output::OutDir;
use crate::svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Gaussian,
    Uniform,
    Laplace,
    Cauchy,
}

impl PriorKind {
    /// Standard member of the family: `N(0,1)`, `U(0,1)`, Laplace(0,1),
    /// Cauchy(0,1).
    pub fn family(self) -> PriorFamily {
        match self {
            Self::Gaussian => PriorFamily::Gaussian { sd: 1.0 },
            Self::Uniform => PriorFamily::Uniform { lo: 0.0, hi: 1.0 },
            Self::Laplace => PriorFamily::Laplace { scale: 1.0 },
            Self::Cauchy => PriorFamily::Cauchy { scale: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailConfig {
    pub prior: PriorKind,
    pub d0: usize,
    pub moments: Vec<u32>,
    pub samples: usize,
    pub moment_samples: usize,
    pub nets: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            prior: PriorKind::Gaussian,
            d0: 2,
            moments: vec![1, 2, 4],
            samples: 1_000_000,
            moment_samples: 200_000,
            nets: 20,
            hidden: vec![16, 16],
            outputs: 2,
            grid_points: 41,
            seed: 0,
        }
    }
}

impl TailConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.d0 == 0 || self.outputs == 0 || self.grid_points == 0 || self.hidden.contains(&0) {
            return Err(CliError::usage("dimensions and grid size must be positive"));
        }
        if self.samples < 100 || self.moment_samples < 100 {
            return Err(CliError::usage("at least 100 samples are required"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.d0];
        w.extend(&self.hidden);
        w.push(self.outputs);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCase {
    pub d0: usize,
    pub a: f64,
    pub b: f64,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub index: usize,
    pub lipschitz: f64,
    pub outputs: Vec<BoundReport>,
    pub moments: Vec<MomentReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub config: TailConfig,
    pub lemma: Vec<LemmaCase>,
    pub networks: Vec<NetworkCase>,
    pub violations: usize,
    pub moment_failures: usize,
    pub premise_violations: usize,
    pub passed: bool,
    pub artifacts: Vec<String>,
}

fn survival_csv(r: &BoundReport) -> String {
    let mut out = String::from("x,lhs,lhs_upper,bound,bound_lower\n");
    for k in 0..r.x.len() {
        let bound = r.factor * r.rhs[k];
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.x[k],
            r.lhs[k],
            (r.lhs[k] + r.lhs_band).min(1.0),
            bound,
            (r.factor * (r.rhs[k] - r.rhs_band)).max(0.0)
        ));
    }
    out
}

fn write_curve(out: &mut OutDir, stem: &str, r: &BoundReport, title: &str) -> Result<(), CliError> {
    let csv = survival_csv(r);
    out.write(&format!("{stem}.csv"), &csv)?;
    let curves = svg::curves_from_csv(&csv)?;
    out.write(&format!("{stem}.svg"), svg::render_curves(&curves, title, true))
}

/// Runs every check and writes `survival_*.csv` with their plots. The caller
/// writes `tail_report.json`.
pub fn run(cfg: &TailConfig, out: &mut OutDir) -> Result<TailReport, CliError> {
    cfg.validate()?;
    let family = cfg.prior.family();
    let prior = NoisePrior::new(family, cfg.d0).map_err(CliError::usage)?;
    let grid = XGrid::Span(cfg.grid_points);

    let mut lemma = Vec::new();
    let mut dims = vec![cfg.d0];
    if cfg.d0 != 1 {
        dims.push(1);
    }
    for (k, &d) in dims.iter().enumerate() {
        let p = NoisePrior::new(family, d).map_err(CliError::usage)?;
        let report = check_lemma_sum_bound(1.0, 0.0, &p, grid, cfg.samples, sub_seed(cfg.seed, 100 + k as u64))
            .map_err(CliError::numeric)?;
        write_curve(out, &format!("survival_lemma_d{d}"), &report, &format!("sum bound, d0 = {d}"))?;
        lemma.push(LemmaCase {
            d0: d,
            a: 1.0,
            b: 0.0,
            report,
        });
    }

    let mut networks = Vec::new();
    for k in 0..cfg.nets {
        let net = NetworkSpec::random(&cfg.widths(), Activation::Tanh, 0.5, &mut rng::stream(cfg.seed, 1000 + k as u64))
            .map_err(CliError::usage)?;
        let seed = sub_seed(cfg.seed, 2000 + k as u64);
        let outputs = check_generator_tail_bounds(&net, &prior, grid, cfg.samples, seed).map_err(CliError::numeric)?;
        for (i, r) in outputs.iter().enumerate() {
            write_curve(out, &format!("survival_net{k}_out{i}"), r, &format!("network {k}, output {i}"))?;
        }
        let moments = cfg
            .moments
            .iter()
            .map(|&p| check_moment_bound(&net, &prior, p, cfg.moment_samples, sub_seed(seed, p as u64)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::numeric)?;
        networks.push(NetworkCase {
            index: k,
            lipschitz: lipschitz_upper_bound(&net),
            outputs,
            moments,
        });
    }

    let violations = lemma.iter().map(|c| c.report.violations).sum::<usize>()
        + networks
            .iter()
            .flat_map(|n| &n.outputs)
            .map(|r| r.violations)
            .sum::<usize>();
    let all_moments = || networks.iter().flat_map(|n| &n.moments);
    let moment_failures = all_moments().filter(|m| !m.holds).count();
    let premise_violations = all_moments().filter(|m| m.premise_violated).count();
    Ok(TailReport {
        config: cfg.clone(),
        passed: violations == 0 && moment_failures == 0,
        lemma,
        networks,
        violations,
        moment_failures,
        premise_violations,
        artifacts: out.artifacts(&["tail_report.json"]),
    })
}
