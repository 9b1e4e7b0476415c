//! Copula flow on the unit square: `sigmoid ∘ RealNVP ∘ logit`.
//!
//! Inputs are clamped to `[eps, 1 - eps]` before the logit and outputs after
//! the sigmoid. In constrained mode the second coordinate is passed through
//! unchanged, so its marginal is exactly uniform.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{CouplingError, RealNvp2};
use crate::grad::{cosine_lr, logit, sigmoid, softplus, AdamConfig, AdamState, GradError, Tape};
use crate::metrics::{metric_report, sub_seed, CopulaModel, Density, MetricConfig, MetricReport, MetricsError};
use crate::ref_copulas::ReferenceCopula;
use crate::rng;

pub const DEFAULT_EPS: f64 = 1e-7;
const BATCH_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CopulaFlowError {
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite log density at point {index}")]
    NonFinite { index: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<TrainOutcome> },
    #[error("sample source is empty")]
    EmptySource,
    #[error("sampler failed: {0}")]
    Sampler(String),
    #[error("clamp epsilon must lie in (0, 0.5), got {0}")]
    BadEps(f64),
}

/// `ln σ'(x) = ln σ(x) + ln σ(-x)`.
fn ln_dsigmoid(x: f64) -> f64 {
    -softplus(x) - softplus(-x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaFlow {
    net: RealNvp2,
    eps: f64,
}

impl CopulaFlow {
    pub fn new(net: RealNvp2, eps: f64) -> Result<Self, CopulaFlowError> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(CopulaFlowError::BadEps(eps));
        }
        Ok(Self { net, eps })
    }

    /// Default architecture at the identity map.
    pub fn identity(constrained: bool) -> Self {
        let net = RealNvp2::identity_init(constrained, &mut rng::stream(0, 0));
        Self { net, eps: DEFAULT_EPS }
    }

    /// Default architecture with Glorot hidden layers seeded by `seed`.
    pub fn with_seed(constrained: bool, seed: u64) -> Self {
        let net = RealNvp2::identity_init(constrained, &mut rng::stream(seed, 0));
        Self { net, eps: DEFAULT_EPS }
    }

    pub fn net(&self) -> &RealNvp2 {
        &self.net
    }

    pub fn set_net(&mut self, net: RealNvp2) {
        self.net = net;
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_constrained(&self) -> bool {
        self.net.is_constrained()
    }

    fn to_latent(&self, u: [f64; 2]) -> [f64; 2] {
        u.map(|x| logit(x.clamp(self.eps, 1.0 - self.eps)))
    }

    fn from_latent(&self, y: f64) -> f64 {
        sigmoid(y).clamp(self.eps, 1.0 - self.eps)
    }

    fn active(&self) -> usize {
        if self.is_constrained() {
            1
        } else {
            2
        }
    }

    /// Maps a uniform pair to a copula sample.
    pub fn sample_point(&self, u: [f64; 2]) -> Result<[f64; 2], CopulaFlowError> {
        let (y, _) = self.net.forward(self.to_latent(u))?;
        Ok(self.finish_forward(u, y))
    }

    fn finish_forward(&self, u: [f64; 2], y: [f64; 2]) -> [f64; 2] {
        if self.is_constrained() {
            [self.from_latent(y[0]), u[1]]
        } else {
            [self.from_latent(y[0]), self.from_latent(y[1])]
        }
    }

    /// Inverse map: recovers the uniform pair behind `c`.
    pub fn inverse_point(&self, c: [f64; 2]) -> Result<[f64; 2], CopulaFlowError> {
        let (w, _) = self.net.inverse(self.to_latent(c))?;
        Ok(if self.is_constrained() {
            [sigmoid(w[0]), c[1]]
        } else {
            [sigmoid(w[0]), sigmoid(w[1])]
        })
    }

    fn ln_density_from(&self, v: [f64; 2], w: [f64; 2], logdet: f64) -> f64 {
        (0..self.active())
            .map(|i| ln_dsigmoid(w[i]) - ln_dsigmoid(v[i]))
            .sum::<f64>()
            + logdet
    }

    /// Exact log density of the model at `c`, clamped into the interior.
    pub fn ln_density(&self, c: [f64; 2]) -> Result<f64, CopulaFlowError> {
        let v = self.to_latent(c);
        let (w, logdet) = self.net.inverse(v)?;
        let out = self.ln_density_from(v, w, logdet);
        if out.is_finite() {
            Ok(out)
        } else {
            Err(CopulaFlowError::NonFinite { index: 0 })
        }
    }

    fn latent_batch(&self, pts: &[[f64; 2]]) -> Array2<f64> {
        let mut a = Array2::zeros((pts.len(), 2));
        for (mut row, &p) in a.rows_mut().into_iter().zip(pts) {
            let v = self.to_latent(p);
            row[0] = v[0];
            row[1] = v[1];
        }
        a
    }

    fn sample_chunk(&self, u: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, CouplingError> {
        let (y, _) = self.net.forward_batch(&self.latent_batch(u))?;
        Ok(u.iter()
            .zip(y.rows())
            .map(|(&u, y)| self.finish_forward(u, [y[0], y[1]]))
            .collect())
    }

    fn ln_density_chunk(&self, c: &[[f64; 2]]) -> Result<Vec<f64>, CouplingError> {
        let v = self.latent_batch(c);
        let (w, logdet) = self.net.inverse_batch(&v)?;
        Ok((0..c.len())
            .map(|k| self.ln_density_from([v[[k, 0]], v[[k, 1]]], [w[[k, 0]], w[[k, 1]]], logdet[k]))
            .collect())
    }

    /// [`Self::sample_point`] over many inputs.
    pub fn sample_batch(&self, u: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, CopulaFlowError> {
        let chunks: Vec<&[[f64; 2]]> = u.chunks(BATCH_CHUNK).collect();
        let parts = rng::par_map(&chunks, |c| self.sample_chunk(c));
        let mut out = Vec::with_capacity(u.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// [`Self::ln_density`] over many points; fails on the first non-finite
    /// value.
    pub fn ln_density_batch(&self, c: &[[f64; 2]]) -> Result<Vec<f64>, CopulaFlowError> {
        let out: Vec<f64> = Density::ln_density_batch(self, c)
            .into_iter()
            .enumerate()
            .map(|(index, v)| v.ok_or(CopulaFlowError::NonFinite { index }))
            .collect::<Result<_, _>>()?;
        Ok(out)
    }

    /// `n` model samples from Open(0,1) uniforms drawn with `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, CopulaFlowError> {
        let u: Vec<[f64; 2]> = rng::par_chunks(n, BATCH_CHUNK * 4, seed, |_, len, r| {
            (0..len).map(|_| [r.sample(Open01), r.sample(Open01)]).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        self.sample_batch(&u)
    }
}

impl Density for CopulaFlow {
    fn ln_density_batch(&self, points: &[[f64; 2]]) -> Vec<Option<f64>> {
        let chunks: Vec<&[[f64; 2]]> = points.chunks(BATCH_CHUNK).collect();
        rng::par_map(&chunks, |c| -> Vec<Option<f64>> {
            match self.ln_density_chunk(c) {
                Ok(v) => v.into_iter().map(|x| x.is_finite().then_some(x)).collect(),
                Err(_) => c.iter().map(|&p| self.ln_density(p).ok()).collect(),
            }
        })
        .into_iter()
        .flatten()
        .collect()
    }
}

impl CopulaModel for CopulaFlow {
    fn sample_pairs(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, MetricsError> {
        self.sample(n, seed).map_err(|e| MetricsError::Model(e.to_string()))
    }
}

/// Where training batches come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    /// Fresh draws from a reference copula every step; also the metric target.
    Copula(ReferenceCopula),
    /// Minibatches drawn with replacement from fixed pairs.
    Pairs(Vec<[f64; 2]>),
}

impl SampleSource {
    fn batch(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, CopulaFlowError> {
        match self {
            Self::Copula(c) => c.sample(n, seed).map_err(|e| CopulaFlowError::Sampler(e.to_string())),
            Self::Pairs(p) => {
                if p.is_empty() {
                    return Err(CopulaFlowError::EmptySource);
                }
                let mut r = rng::stream(seed, 0);
                Ok((0..n).map(|_| p[r.random_range(0..p.len())]).collect())
            }
        }
    }

    fn target(&self) -> Option<&ReferenceCopula> {
        match self {
            Self::Copula(c) => Some(c),
            Self::Pairs(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CopulaTrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub adam: AdamConfig,
    /// Learning rate at `max_steps` as a fraction of `adam.lr` under cosine
    /// decay.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub metrics: MetricConfig,
}

impl Default for CopulaTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 3000,
            max_steps: 50_000,
            eval_every: 500,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.01,
            seed: 0,
            metrics: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    /// Mean training NLL over the steps since the previous entry.
    pub train_nll: f64,
    pub report: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub flow: CopulaFlow,
    pub history: Vec<HistoryEntry>,
    pub steps: usize,
    /// Whether every threshold was met at an evaluation.
    pub converged: bool,
}

impl TrainOutcome {
    /// `step,train_nll,jsd,t1,t2,m1,m2,nll`; missing metrics are empty.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,train_nll,jsd,t1,t2,m1,m2,nll\n");
        for h in &self.history {
            let metrics = match &h.report {
                Some(r) => format!("{},{},{},{},{},{}", r.jsd, r.t[0], r.t[1], r.m[0], r.m[1], r.nll),
                None => ",,,,,".to_string(),
            };
            out.push_str(&format!("{},{},{}\n", h.step, h.train_nll, metrics));
        }
        out
    }
}

/// Mean training NLL of `batch` for the flow with parameters `params`,
/// built on `tape`.
pub fn batch_nll(tape: &mut Tape, flow: &CopulaFlow, params: &[f64], batch: &[[f64; 2]]) -> crate::grad::Var {
    let mut net = flow.net.clone();
    net.set_flat_params(params).expect("parameter count");
    let bound = net.bind(tape);
    let v: Vec<[f64; 2]> = batch.iter().map(|&c| flow.to_latent(c)).collect();
    let active = flow.active();
    let offset = v
        .iter()
        .map(|v| (0..active).map(|i| ln_dsigmoid(v[i])).sum::<f64>())
        .sum::<f64>()
        / v.len() as f64;
    let cols = [
        tape.column(&v.iter().map(|v| v[0]).collect::<Vec<_>>()),
        tape.column(&v.iter().map(|v| v[1]).collect::<Vec<_>>()),
    ];
    let (w, logdet) = bound.inverse(tape, cols);
    let mut ll = logdet;
    for &wi in &w[..active] {
        let sp = tape.softplus(wi);
        let neg = tape.neg(wi);
        let sn = tape.softplus(neg);
        ll = tape.sub(ll, sp);
        ll = tape.sub(ll, sn);
    }
    let mean = tape.mean(ll);
    tape.affine(mean, -1.0, offset)
}

/// Adam on the batch NLL with cosine learning-rate decay. With a reference
/// copula source, metrics are evaluated every `eval_every` steps and training
/// stops once all thresholds hold.
pub fn train_copula_flow(
    flow: &CopulaFlow,
    source: &SampleSource,
    cfg: &CopulaTrainConfig,
) -> Result<TrainOutcome, CopulaFlowError> {
    train_copula_flow_with(flow, source, cfg, |_| {})
}

/// [`train_copula_flow`] calling `on_eval` with every new history entry.
pub fn train_copula_flow_with(
    flow: &CopulaFlow,
    source: &SampleSource,
    cfg: &CopulaTrainConfig,
    mut on_eval: impl FnMut(&HistoryEntry),
) -> Result<TrainOutcome, CopulaFlowError> {
    let mut current = flow.clone();
    let mut params = flow.net.flat_params();
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut history = Vec::new();
    let mut window = (0.0, 0usize);
    let eval_every = cfg.eval_every.max(1);

    for step in 0..cfg.max_steps {
        let batch = source.batch(cfg.batch_size.max(1), sub_seed(cfg.seed, step as u64 + 3))?;
        let mut tape = Tape::new();
        let loss = batch_nll(&mut tape, &current, &params, &batch);
        let value = tape.scalar(loss);
        let grads = match tape.backward(loss) {
            Ok(g) if value.is_finite() => g,
            _ => {
                return Err(CopulaFlowError::Diverged {
                    step,
                    last_good: Box::new(TrainOutcome {
                        flow: current,
                        history,
                        steps: step,
                        converged: false,
                    }),
                })
            }
        };
        adam.config.lr = cosine_lr(cfg.adam.lr, cfg.final_lr_fraction, step, cfg.max_steps);
        adam.step(&mut params, &grads.flat())?;
        current.net.set_flat_params(&params)?;
        window.0 += value;
        window.1 += 1;

        let done = step + 1;
        if done % eval_every == 0 || done == cfg.max_steps {
            let report = match source.target() {
                Some(t) => Some(metric_report(&current, t, &cfg.metrics)?),
                None => None,
            };
            let stop = report.as_ref().is_some_and(|r| r.1);
            history.push(HistoryEntry {
                step: done,
                train_nll: window.0 / window.1 as f64,
                report: report.map(|r| r.0),
            });
            on_eval(history.last().expect("just pushed"));
            window = (0.0, 0);
            if stop {
                return Ok(TrainOutcome {
                    flow: current,
                    history,
                    steps: done,
                    converged: true,
                });
            }
        }
    }
    Ok(TrainOutcome {
        flow: current,
        history,
        steps: cfg.max_steps,
        converged: false,
    })
}
