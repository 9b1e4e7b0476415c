//! Evaluation metrics for bivariate copula models: mesh JSD and its pointwise
//! map, marginal uniformity `T` and `M`, and NLL.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ref_copulas::ReferenceCopula;
use crate::rng;

pub const DEFAULT_MESH: usize = 300;
pub const DEFAULT_BINS: usize = 25;
pub const DEFAULT_MC_SAMPLES: usize = 500_000;
pub const DEFAULT_NLL_SAMPLES: usize = 3000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("every grid cell has an invalid density evaluation")]
    AllCellsInvalid,
    #[error("coordinate must be 1 or 2, got {0}")]
    BadCoordinate(usize),
    #[error("{n} samples cannot fill {bins} bins")]
    TooFewSamples { n: usize, bins: usize },
    #[error("non-finite log density at sample {index}")]
    NonFiniteNll { index: usize },
    #[error("model error: {0}")]
    Model(String),
}

/// Log density on `(0,1)²`, evaluated in batches. `None` marks an invalid
/// evaluation.
pub trait Density: Sync {
    fn ln_density_batch(&self, points: &[[f64; 2]]) -> Vec<Option<f64>>;
}

/// Generative copula model under evaluation.
pub trait CopulaModel: Density {
    fn sample_pairs(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, MetricsError>;
}

impl Density for ReferenceCopula {
    fn ln_density_batch(&self, points: &[[f64; 2]]) -> Vec<Option<f64>> {
        points.iter().map(|&u| self.ln_density(u).ok()).collect()
    }
}

impl CopulaModel for ReferenceCopula {
    fn sample_pairs(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, MetricsError> {
        self.sample(n, seed).map_err(|e| MetricsError::Model(e.to_string()))
    }
}

/// Pointwise log density given as a closure.
pub struct FnDensity<F>(pub F);

impl<F> Density for FnDensity<F>
where
    F: Fn([f64; 2]) -> Option<f64> + Sync,
{
    fn ln_density_batch(&self, points: &[[f64; 2]]) -> Vec<Option<f64>> {
        points.iter().map(|&u| (self.0)(u)).collect()
    }
}

/// `n` equal half-open bins `[(k-1)/n, k/n)` on `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    pub n: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self { n: DEFAULT_BINS }
    }
}

impl BinSpec {
    /// Zero-based bin of `x`, or `None` outside `[0, 1)`.
    pub fn index(&self, x: f64) -> Option<usize> {
        if (0.0..1.0).contains(&x) {
            Some(((x * self.n as f64) as usize).min(self.n - 1))
        } else {
            None
        }
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        (k as f64 / self.n as f64, (k + 1) as f64 / self.n as f64)
    }
}

/// Values on the `mesh x mesh` cell centres, row-major with `x` outer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub mesh: usize,
    pub values: Vec<Option<f64>>,
}

pub fn cell_center(mesh: usize, k: usize) -> f64 {
    (k as f64 + 0.5) / mesh as f64
}

impl Grid {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.mesh + j]
    }

    /// CSV with header `x,y,value`; invalid cells are written as `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        for i in 0..self.mesh {
            for j in 0..self.mesh {
                let v = match self.get(i, j) {
                    Some(v) => format!("{v:e}"),
                    None => "nan".to_string(),
                };
                out.push_str(&format!(
                    "{},{},{}\n",
                    cell_center(self.mesh, i),
                    cell_center(self.mesh, j),
                    v
                ));
            }
        }
        out
    }
}

/// Log densities on the cell centres, one batch per grid row.
pub fn ln_density_grid(d: &dyn Density, mesh: usize) -> Grid {
    let rows: Vec<usize> = (0..mesh).collect();
    let values = rng::par_map(&rows, |&i| {
        let x = cell_center(mesh, i);
        let pts: Vec<[f64; 2]> = (0..mesh).map(|j| [x, cell_center(mesh, j)]).collect();
        d.ln_density_batch(&pts)
    })
    .into_iter()
    .flatten()
    .map(|v| v.filter(|x| x.is_finite()))
    .collect();
    Grid { mesh, values }
}

/// Normalised cell masses over the cells valid in both grids.
fn masses(lp: &Grid, lq: &Grid) -> Result<(Vec<Option<(f64, f64)>>, usize), MetricsError> {
    let valid: Vec<Option<(f64, f64)>> = lp
        .values
        .iter()
        .zip(&lq.values)
        .map(|(a, b)| a.zip(*b))
        .collect();
    let kept = valid.iter().flatten().count();
    if kept == 0 {
        return Err(MetricsError::AllCellsInvalid);
    }
    let max_p = valid.iter().flatten().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let max_q = valid.iter().flatten().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut zp, mut zq) = (0.0, 0.0);
    for &(a, b) in valid.iter().flatten() {
        zp += (a - max_p).exp();
        zq += (b - max_q).exp();
    }
    let out = valid
        .iter()
        .map(|v| v.map(|(a, b)| ((a - max_p).exp() / zp, (b - max_q).exp() / zq)))
        .collect();
    Ok((out, kept))
}

fn xlogx_over(x: f64, m: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / m).ln()
    }
}

fn jsd_terms(lp: &Grid, lq: &Grid) -> Result<Vec<Option<f64>>, MetricsError> {
    let (mass, _) = masses(lp, lq)?;
    Ok(mass
        .into_iter()
        .map(|v| {
            v.map(|(p, q)| {
                let m = 0.5 * (p + q);
                0.5 * xlogx_over(p, m) + 0.5 * xlogx_over(q, m)
            })
        })
        .collect())
}

/// JSD (natural log) between two densities discretised on a midpoint mesh,
/// renormalised over cells where both evaluations are valid.
pub fn jsd_grid(p: &dyn Density, q: &dyn Density, mesh: usize) -> Result<f64, MetricsError> {
    jsd_from_grids(&ln_density_grid(p, mesh), &ln_density_grid(q, mesh))
}

pub fn jsd_from_grids(lp: &Grid, lq: &Grid) -> Result<f64, MetricsError> {
    Ok(jsd_terms(lp, lq)?.iter().flatten().sum::<f64>().clamp(0.0, std::f64::consts::LN_2))
}

/// Per-cell JSD integrand: each value times the cell area `1/mesh²` is the
/// cell's contribution to [`jsd_grid`].
pub fn jsd_pointwise_map(p: &dyn Density, q: &dyn Density, mesh: usize) -> Result<Grid, MetricsError> {
    jsd_map_from_grids(&ln_density_grid(p, mesh), &ln_density_grid(q, mesh))
}

pub fn jsd_map_from_grids(lp: &Grid, lq: &Grid) -> Result<Grid, MetricsError> {
    let area = (lp.mesh * lp.mesh) as f64;
    let values = jsd_terms(lp, lq)?.into_iter().map(|v| v.map(|c| c * area)).collect();
    Ok(Grid {
        mesh: lp.mesh,
        values,
    })
}

/// Empirical bin frequencies of coordinate `coord` (1 or 2).
pub fn bin_frequencies(samples: &[[f64; 2]], coord: usize, bins: BinSpec) -> Result<Vec<f64>, MetricsError> {
    if !(1..=2).contains(&coord) {
        return Err(MetricsError::BadCoordinate(coord));
    }
    if samples.len() < bins.n {
        return Err(MetricsError::TooFewSamples {
            n: samples.len(),
            bins: bins.n,
        });
    }
    let mut counts = vec![0usize; bins.n];
    for s in samples {
        if let Some(k) = bins.index(s[coord - 1]) {
            counts[k] += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// `(T, M)` from bin probabilities: mean and max of `|ln p_k + ln n|`.
/// An empty bin gives infinity.
pub fn uniformity_from_probs(probs: &[f64]) -> (f64, f64) {
    let ln_n = (probs.len() as f64).ln();
    let dev: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { (p.ln() + ln_n).abs() } else { f64::INFINITY })
        .collect();
    let t = dev.iter().sum::<f64>() / dev.len() as f64;
    let m = dev.iter().copied().fold(0.0, f64::max);
    (t, m)
}

pub fn uniformity_t(samples: &[[f64; 2]], coord: usize, bins: BinSpec) -> Result<f64, MetricsError> {
    Ok(uniformity_from_probs(&bin_frequencies(samples, coord, bins)?).0)
}

pub fn uniformity_m(samples: &[[f64; 2]], coord: usize, bins: BinSpec) -> Result<f64, MetricsError> {
    Ok(uniformity_from_probs(&bin_frequencies(samples, coord, bins)?).1)
}

/// Mean negative log density over `samples`.
pub fn eval_nll(model: &dyn Density, samples: &[[f64; 2]]) -> Result<f64, MetricsError> {
    let ld = model.ln_density_batch(samples);
    let mut total = 0.0;
    for (index, v) in ld.iter().enumerate() {
        match v {
            Some(v) if v.is_finite() => total -= v,
            _ => return Err(MetricsError::NonFiniteNll { index }),
        }
    }
    Ok(total / samples.len() as f64)
}

/// One evaluation of a model against a target. Non-finite values are written
/// as `null` and read back as infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "crate::nullable::scalar")]
    pub jsd: f64,
    #[serde(with = "crate::nullable::pair")]
    pub t: [f64; 2],
    #[serde(with = "crate::nullable::pair")]
    pub m: [f64; 2],
    #[serde(with = "crate::nullable::scalar")]
    pub nll: f64,
    pub eval_samples: usize,
    pub nll_samples: usize,
    pub mesh: usize,
    pub bins: usize,
    pub seed: u64,
}

/// Stopping thresholds; all must hold on both coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub jsd: f64,
    pub t: f64,
    pub m: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            jsd: 1e-3,
            t: 1e-2,
            m: 8e-2,
        }
    }
}

impl Thresholds {
    pub fn met(&self, r: &MetricReport) -> bool {
        r.jsd <= self.jsd
            && r.t.iter().all(|&t| t <= self.t)
            && r.m.iter().all(|&m| m <= self.m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub mesh: usize,
    pub bins: usize,
    pub mc_samples: usize,
    pub nll_samples: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mesh: DEFAULT_MESH,
            bins: DEFAULT_BINS,
            mc_samples: DEFAULT_MC_SAMPLES,
            nll_samples: DEFAULT_NLL_SAMPLES,
            seed: 0,
            thresholds: Thresholds::default(),
        }
    }
}

/// Seed for an independent purpose `tag` derived from `seed`.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Full metric suite and the stop decision under `cfg.thresholds`.
pub fn metric_report(
    model: &dyn CopulaModel,
    target: &ReferenceCopula,
    cfg: &MetricConfig,
) -> Result<(MetricReport, bool), MetricsError> {
    let jsd = jsd_grid(target, model, cfg.mesh)?;
    let samples = model.sample_pairs(cfg.mc_samples, sub_seed(cfg.seed, 1))?;
    let bins = BinSpec { n: cfg.bins };
    let (t1, m1) = uniformity_from_probs(&bin_frequencies(&samples, 1, bins)?);
    let (t2, m2) = uniformity_from_probs(&bin_frequencies(&samples, 2, bins)?);
    let held_out = target
        .sample(cfg.nll_samples, sub_seed(cfg.seed, 2))
        .map_err(|e| MetricsError::Model(e.to_string()))?;
    let nll = eval_nll(model, &held_out)?;
    let report = MetricReport {
        jsd,
        t: [t1, t2],
        m: [m1, m2],
        nll,
        eval_samples: cfg.mc_samples,
        nll_samples: cfg.nll_samples,
        mesh: cfg.mesh,
        bins: cfg.bins,
        seed: cfg.seed,
    };
    let stop = cfg.thresholds.met(&report);
    Ok((report, stop))
}
