//! Copula-marginal flow: a copula flow on the unit square followed by a
//! marginal flow per coordinate.
//!
//! Sampling runs `u -> copula -> marginals`; the density is the pair-copula
//! product `c(F1(x1), F2(x2)) p1(x1) p2(x2)`.

use rand::Rng as _;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copula_flow::{train_copula_flow, CopulaFlow, CopulaFlowError, CopulaTrainConfig, HistoryEntry, SampleSource};
use crate::marginal::{
    train_marginal, BivariateMarginalFlow, MarginalError, MarginalTrainConfig, MarginalTrainReport, TailBelief,
    UnivariateMarginalFlow,
};
use crate::rng;

const SAMPLE_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmError {
    #[error(transparent)]
    Marginal(#[from] MarginalError),
    #[error(transparent)]
    Copula(#[from] CopulaFlowError),
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite data in row {0}")]
    NonFiniteData(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmFlow {
    pub marginal: BivariateMarginalFlow,
    pub copula: CopulaFlow,
}

impl CmFlow {
    pub fn new(marginal: BivariateMarginalFlow, copula: CopulaFlow) -> Self {
        Self { marginal, copula }
    }

    /// `m(h(u))` for a uniform pair `u`.
    pub fn sample_point(&self, u: [f64; 2]) -> Result<[f64; 2], CmError> {
        let c = self.copula.sample_point(u)?;
        Ok(self.marginal.forward(c)?)
    }

    /// `n` draws from Open(0,1) uniforms drawn with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, CmError> {
        let u: Vec<[f64; 2]> = rng::par_chunks(n, SAMPLE_CHUNK, seed, |_, len, r| {
            (0..len).map(|_| [r.sample(Open01), r.sample(Open01)]).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        let c = self.copula.sample_batch(&u)?;
        let chunks: Vec<&[[f64; 2]]> = c.chunks(SAMPLE_CHUNK).collect();
        let parts = rng::par_map(&chunks, |ch| {
            ch.iter().map(|&c| self.marginal.forward(c)).collect::<Result<Vec<_>, _>>()
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Recovers the uniform pair behind `x`: `h⁻¹(F(x))`.
    pub fn inverse_point(&self, x: [f64; 2]) -> Result<[f64; 2], CmError> {
        let c = self.marginal.cdf(x)?;
        Ok(self.copula.inverse_point(c)?)
    }

    /// Log density at `x`. Points on a body/tail seam are rejected.
    pub fn ln_density(&self, x: [f64; 2]) -> Result<f64, CmError> {
        let marginal = self.marginal.ln_pdf(x)?;
        let c = self.marginal.cdf(x)?;
        let copula = self.copula.ln_density(c)?;
        Ok(copula + marginal)
    }
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn check_rows(data: &[[f64; 2]]) -> Result<(), CmError> {
    if data.len() < 2 {
        return Err(CmError::TooFewRows(data.len()));
    }
    if let Some(i) = data.iter().position(|r| !(r[0].is_finite() && r[1].is_finite())) {
        return Err(CmError::NonFiniteData(i));
    }
    Ok(())
}

/// Rank pseudo-observations `rank / (n + 1)` per coordinate.
pub fn pseudo_observations(data: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, CmError> {
    check_rows(data)?;
    let n1 = data.len() as f64 + 1.0;
    let r0 = average_ranks(&data.iter().map(|r| r[0]).collect::<Vec<_>>());
    let r1 = average_ranks(&data.iter().map(|r| r[1]).collect::<Vec<_>>());
    Ok(r0.into_iter().zip(r1).map(|(a, b)| [a / n1, b / n1]).collect())
}

/// Pseudo-observations through the fitted marginal CDFs.
pub fn model_pseudo_observations(
    marginal: &BivariateMarginalFlow,
    data: &[[f64; 2]],
) -> Result<Vec<[f64; 2]>, CmError> {
    check_rows(data)?;
    Ok(data.iter().map(|&x| marginal.cdf(x)).collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoMode {
    #[default]
    Rank,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmTrainConfig {
    pub marginal: MarginalTrainConfig,
    pub copula: CopulaTrainConfig,
    pub pseudo: PseudoMode,
    pub constrained: bool,
    pub seed: u64,
}

impl Default for CmTrainConfig {
    fn default() -> Self {
        Self {
            marginal: MarginalTrainConfig::default(),
            copula: CopulaTrainConfig::default(),
            pseudo: PseudoMode::Rank,
            constrained: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmTrainReport {
    pub marginals: [MarginalTrainReport; 2],
    pub copula_history: Vec<HistoryEntry>,
    pub copula_steps: usize,
}

/// Staged fit: each marginal on its column, then the copula flow on
/// pseudo-observations.
pub fn train_cm_flow(
    data: &[[f64; 2]],
    beliefs: [TailBelief; 2],
    cfg: &CmTrainConfig,
) -> Result<(CmFlow, CmTrainReport), CmError> {
    check_rows(data)?;
    let mut r = rng::stream(cfg.seed, 0);
    let [b1, b2] = beliefs;
    let m1 = UnivariateMarginalFlow::with_default_body(b1, &mut r)?;
    let m2 = UnivariateMarginalFlow::with_default_body(b2, &mut r)?;
    let col = |k: usize| data.iter().map(|x| x[k]).collect::<Vec<_>>();
    let (m1, rep1) = train_marginal(&m1, &col(0), &cfg.marginal)?;
    let (m2, rep2) = train_marginal(&m2, &col(1), &cfg.marginal)?;
    let marginal = BivariateMarginalFlow::new(m1, m2);

    let pseudo = match cfg.pseudo {
        PseudoMode::Rank => pseudo_observations(data)?,
        PseudoMode::Model => model_pseudo_observations(&marginal, data)?,
    };
    let copula = CopulaFlow::with_seed(cfg.constrained, cfg.seed);
    let outcome = train_copula_flow(&copula, &SampleSource::Pairs(pseudo), &cfg.copula)?;
    Ok((
        CmFlow::new(marginal, outcome.flow),
        CmTrainReport {
            marginals: [rep1, rep2],
            copula_history: outcome.history,
            copula_steps: outcome.steps,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_over_n_plus_one() {
        let p = pseudo_observations(&[[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]).unwrap();
        assert_eq!(p.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn ties_share_average_rank() {
        let p = pseudo_observations(&[[1.0, 0.0], [1.0, 1.0], [0.0, 2.0], [5.0, 2.0]]).unwrap();
        assert_eq!(p.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0.5, 0.5, 0.2, 0.8]);
        assert_eq!(p.iter().map(|r| r[1]).collect::<Vec<_>>(), vec![0.2, 0.4, 0.7, 0.7]);
    }

    #[test]
    fn rejects_short_or_non_finite_data() {
        assert!(matches!(pseudo_observations(&[[1.0, 2.0]]), Err(CmError::TooFewRows(1))));
        assert!(matches!(
            pseudo_observations(&[[1.0, 2.0], [f64::NAN, 0.0]]),
            Err(CmError::NonFiniteData(1))
        ));
    }
}
