//! Monte Carlo checks of tail and moment bounds for Lipschitz generators.
//!
//! A generator `g` fed with i.i.d. noise `Z ∈ R^d0` satisfies
//! `P(|g_i(Z)| > x) <= d0 P(w(|Z_1|) > x)` with the affine envelope
//! `w(z) = d0 L z + |g_i(0)|`. The checks here estimate both sides from
//! samples and flag a violation only when it survives joint DKW bands.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::grad::{cosine_lr, tanh, AdamConfig, AdamState, GradError, Tape, Var};
use crate::metrics::sub_seed;
use crate::rng::{self, Rng};

/// Confidence level of every band.
pub const LEVEL: f64 = 0.99;
const MIN_SAMPLES: usize = 100;
const CHUNK: usize = 1 << 15;
/// Two-sided 99% standard normal quantile.
const Z99: f64 = 2.575_829_303_548_901;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TailError {
    #[error("evaluation grid is empty")]
    EmptyGrid,
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid network: {0}")]
    BadNetwork(String),
    #[error("invalid prior: {0}")]
    BadPrior(String),
    #[error("no grid point lies in the tail region")]
    EmptyTail,
    #[error("output coordinate {index} out of range for width {width}")]
    BadCoordinate { index: usize, width: usize },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Monotone activation with `φ(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Tanh,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Tanh => tanh(x),
            Self::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    pub fn lipschitz(self) -> f64 {
        match self {
            Self::Identity | Self::Tanh => 1.0,
            Self::LeakyRelu { slope } => slope.abs().max(1.0),
        }
    }
}

/// Affine layer `x -> W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Feed-forward network; the activation follows every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layers: Vec<Dense>,
    activation: Activation,
}

impl NetworkSpec {
    pub fn new(layers: Vec<Dense>, activation: Activation) -> Result<Self, TailError> {
        if layers.is_empty() {
            return Err(TailError::BadNetwork("no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(TailError::BadNetwork(format!("layer {k}: bias length")));
            }
            if k > 0 && layers[k - 1].weight.nrows() != l.weight.ncols() {
                return Err(TailError::BadNetwork(format!("layer {k}: input width")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(TailError::BadNetwork(format!("layer {k}: non-finite parameter")));
            }
        }
        if let Activation::LeakyRelu { slope } = activation {
            if !(slope >= 0.0 && slope.is_finite()) {
                return Err(TailError::BadNetwork("leaky slope must be finite and >= 0".into()));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Gaussian weights with standard deviation `1/sqrt(fan_in)` and biases
    /// with standard deviation `bias_sd`.
    pub fn random(widths: &[usize], activation: Activation, bias_sd: f64, rng: &mut Rng) -> Result<Self, TailError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(TailError::BadNetwork(format!("widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let sd = 1.0 / (w[0] as f64).sqrt();
                let nw = Normal::new(0.0, sd).expect("positive sd");
                Dense {
                    weight: Array2::from_shape_fn((w[1], w[0]), |_| nw.sample(rng)),
                    bias: Array1::from_shape_fn(w[1], |_| bias_sd * Distribution::<f64>::sample(&StandardNormal, rng)),
                }
            })
            .collect();
        Self::new(layers, activation)
    }

    /// `x -> x` on `R^d`.
    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![Dense {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
            }],
            activation: Activation::Identity,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    /// The same network with every weight matrix multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.layers.iter_mut().for_each(|l| l.weight *= c);
        out
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut h = Array1::from(z.to_vec());
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            h = l.weight.dot(&h) + &l.bias;
            if k < last {
                h.mapv_inplace(|x| self.activation.apply(x));
            }
        }
        h.to_vec()
    }

    /// Row-wise evaluation of an `n x d0` batch.
    pub fn eval_batch(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut h = z.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weight.t());
            h += &l.bias.view().insert_axis(Axis(0));
            if k < last {
                h.mapv_inplace(|x| self.activation.apply(x));
            }
        }
        h
    }

    fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = it.next().expect("length"));
        }
    }

    /// Forward pass on a tape with fresh parameter leaves; `z` is `n x d0`.
    fn forward_tape(&self, tape: &mut Tape, z: Var) -> Var {
        let mut h = z;
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let w = tape.param(l.weight.clone());
            let b = tape.param(l.bias.clone().insert_axis(Axis(0)));
            h = tape.linear(h, w, b);
            if k < last {
                h = match self.activation {
                    Activation::Identity => h,
                    Activation::Tanh => tape.tanh(h),
                    Activation::LeakyRelu { slope } => {
                        // max(x, 0) + slope * min(x, 0)
                        let pos = tape.clamp(h, 0.0, f64::INFINITY);
                        let neg = tape.clamp(h, f64::NEG_INFINITY, 0.0);
                        let neg = tape.scale(neg, slope);
                        tape.add(pos, neg)
                    }
                };
            }
        }
        h
    }
}

/// Max absolute column sum: the operator norm induced by `‖·‖₁`.
fn l1_operator_norm(w: &Array2<f64>) -> f64 {
    w.columns().into_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Upper bound on the `‖·‖₁ -> ‖·‖₁` Lipschitz constant: product of layer
/// operator norms and activation constants.
pub fn lipschitz_upper_bound(net: &NetworkSpec) -> f64 {
    let hidden = net.layers.len() - 1;
    net.layers.iter().map(|l| l1_operator_norm(&l.weight)).product::<f64>()
        * net.activation.lipschitz().powi(hidden as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum PriorFamily {
    Gaussian { sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Laplace { scale: f64 },
    Cauchy { scale: f64 },
}

/// `d0` i.i.d. components from one family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    pub family: PriorFamily,
    pub d0: usize,
}

impl NoisePrior {
    pub fn new(family: PriorFamily, d0: usize) -> Result<Self, TailError> {
        let ok = match family {
            PriorFamily::Gaussian { sd } => sd > 0.0 && sd.is_finite(),
            PriorFamily::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            PriorFamily::Laplace { scale } | PriorFamily::Cauchy { scale } => scale > 0.0 && scale.is_finite(),
        };
        if !ok || d0 == 0 {
            return Err(TailError::BadPrior(format!("{family:?} with d0 = {d0}")));
        }
        Ok(Self { family, d0 })
    }

    pub fn standard_gaussian(d0: usize) -> Self {
        Self {
            family: PriorFamily::Gaussian { sd: 1.0 },
            d0,
        }
    }

    pub fn unit_uniform(d0: usize) -> Self {
        Self {
            family: PriorFamily::Uniform { lo: 0.0, hi: 1.0 },
            d0,
        }
    }

    fn draw(&self, r: &mut Rng) -> f64 {
        match self.family {
            PriorFamily::Gaussian { sd } => sd * Distribution::<f64>::sample(&StandardNormal, r),
            PriorFamily::Uniform { lo, hi } => lo + (hi - lo) * r.sample::<f64, _>(Open01),
            PriorFamily::Laplace { scale } => laplace(scale, r),
            PriorFamily::Cauchy { scale } => {
                let u: f64 = r.sample(Open01);
                scale * (std::f64::consts::PI * (u - 0.5)).tan()
            }
        }
    }

    /// `n x d0` draws.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let d = self.d0;
        let flat: Vec<f64> = rng::par_chunks(n, CHUNK, seed, |_, len, r| {
            (0..len * d).map(|_| self.draw(r)).collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        Array2::from_shape_vec((n, d), flat).expect("shape")
    }

    /// `n` draws of a single component.
    pub fn sample_component(&self, n: usize, seed: u64) -> Vec<f64> {
        rng::par_chunks(n, CHUNK, seed, |_, len, r| (0..len).map(|_| self.draw(r)).collect::<Vec<_>>())
            .into_iter()
            .flatten()
            .collect()
    }

    /// `sup ‖z‖₁` over the support, or `None` when unbounded.
    pub fn support_radius(&self) -> Option<f64> {
        match self.family {
            PriorFamily::Uniform { lo, hi } => Some(self.d0 as f64 * lo.abs().max(hi.abs())),
            _ => None,
        }
    }

    /// `E|Z_1|^r`, or `None` when infinite.
    pub fn abs_moment(&self, r: u32) -> Option<f64> {
        let rf = r as f64;
        match self.family {
            PriorFamily::Gaussian { sd } => {
                Some(sd.powf(rf) * 2f64.powf(rf / 2.0) * gamma((rf + 1.0) / 2.0) / std::f64::consts::PI.sqrt())
            }
            PriorFamily::Uniform { lo, hi } => {
                let f = |z: f64| z.signum() * z.abs().powf(rf + 1.0) / (rf + 1.0);
                Some((f(hi) - f(lo)) / (hi - lo))
            }
            PriorFamily::Laplace { scale } => Some(scale.powf(rf) * gamma(rf + 1.0)),
            PriorFamily::Cauchy { .. } => (r == 0).then_some(1.0),
        }
    }

    /// `E‖Z‖₁^k` for `k = 0..=p`, or `None` if any is infinite.
    pub fn l1_norm_moments(&self, p: u32) -> Option<Vec<f64>> {
        let m: Vec<f64> = (0..=p).map(|r| self.abs_moment(r)).collect::<Option<_>>()?;
        // moments of a sum of independent terms, one component at a time
        let mut acc = vec![0.0; p as usize + 1];
        acc[0] = 1.0;
        for _ in 0..self.d0 {
            acc = (0..=p as usize)
                .map(|k| (0..=k).map(|r| binomial(k as u32, r as u32) * acc[k - r] * m[r]).sum())
                .collect();
        }
        Some(acc)
    }
}

fn laplace(scale: f64, r: &mut Rng) -> f64 {
    let u: f64 = r.sample::<f64, _>(Open01) - 0.5;
    -scale * u.signum() * (-2.0 * u.abs()).ln_1p()
}

/// `n` standard Laplace draws scaled by `scale`.
pub fn laplace_samples(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    rng::par_chunks(n, CHUNK, seed, |_, len, r| (0..len).map(|_| laplace(scale, r)).collect::<Vec<_>>())
        .into_iter()
        .flatten()
        .collect()
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// `w(z) = slope z + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineEnvelope {
    pub slope: f64,
    pub intercept: f64,
}

impl AffineEnvelope {
    /// Envelope of output coordinate `i`: slope `d0 L`, intercept `|g_i(0)|`.
    pub fn for_network(net: &NetworkSpec, i: usize) -> Result<Self, TailError> {
        let width = net.output_dim();
        if i >= width {
            return Err(TailError::BadCoordinate { index: i, width });
        }
        let d0 = net.input_dim();
        Ok(Self {
            slope: d0 as f64 * lipschitz_upper_bound(net),
            intercept: net.eval(&vec![0.0; d0])[i].abs(),
        })
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.slope * z + self.intercept
    }
}

/// DKW half-width for `n` samples at confidence `1 - alpha`.
pub fn dkw_half_width(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

/// Empirical survival `P(X > x)` on a grid with a uniform DKW band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub x: Vec<f64>,
    pub survival: Vec<f64>,
    pub band: f64,
    pub samples: usize,
    pub level: f64,
}

impl SurvivalCurve {
    pub fn lower(&self, k: usize) -> f64 {
        (self.survival[k] - self.band).max(0.0)
    }

    pub fn upper(&self, k: usize) -> f64 {
        (self.survival[k] + self.band).min(1.0)
    }

    /// CSV `x,survival,lower,upper`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,survival,lower,upper\n");
        for k in 0..self.x.len() {
            out.push_str(&format!("{},{},{},{}\n", self.x[k], self.survival[k], self.lower(k), self.upper(k)));
        }
        out
    }
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn survival_sorted(sorted: &[f64], grid: &[f64], alpha: f64) -> SurvivalCurve {
    let n = sorted.len();
    let survival = grid
        .iter()
        .map(|&x| (n - sorted.partition_point(|&v| v <= x)) as f64 / n as f64)
        .collect();
    SurvivalCurve {
        x: grid.to_vec(),
        survival,
        band: dkw_half_width(n, alpha),
        samples: n,
        level: 1.0 - alpha,
    }
}

/// Survival estimate with a 99% band.
pub fn survival_estimate(samples: &[f64], grid: &[f64]) -> Result<SurvivalCurve, TailError> {
    survival_estimate_at(samples, grid, 1.0 - LEVEL)
}

/// Survival estimate with a `1 - alpha` band.
pub fn survival_estimate_at(samples: &[f64], grid: &[f64], alpha: f64) -> Result<SurvivalCurve, TailError> {
    if grid.is_empty() {
        return Err(TailError::EmptyGrid);
    }
    if samples.len() < MIN_SAMPLES {
        return Err(TailError::TooFewSamples(samples.len()));
    }
    Ok(survival_sorted(&sorted(samples), grid, alpha))
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Where to evaluate survival curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XGrid<'a> {
    Fixed(&'a [f64]),
    /// `n` points from the 0.1% quantile to the maximum of the left-hand
    /// samples.
    Span(usize),
}

impl XGrid<'_> {
    fn resolve(&self, samples: &[f64]) -> Result<Vec<f64>, TailError> {
        match *self {
            Self::Fixed(g) => Ok(g.to_vec()),
            Self::Span(n) => {
                if samples.is_empty() {
                    return Err(TailError::TooFewSamples(0));
                }
                let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Ok(linear_grid(empirical_quantile(samples, 1e-3), hi, n))
            }
        }
    }
}

/// Comparison of `lhs(x) <= factor * rhs(x)` from two survival curves with
/// bands at `alpha / 2` each, so both hold jointly at level `1 - alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub x: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub factor: f64,
    pub lhs_band: f64,
    pub rhs_band: f64,
    /// `factor (rhs + rhs_band) - (lhs - lhs_band)`; negative is a violation.
    pub margin: Vec<f64>,
    pub violations: usize,
    pub samples: usize,
    pub envelope: Option<AffineEnvelope>,
}

impl BoundReport {
    fn build(lhs: &[f64], rhs: &[f64], factor: f64, grid: &XGrid) -> Result<Self, TailError> {
        let grid = &grid.resolve(lhs)?;
        let alpha = (1.0 - LEVEL) / 2.0;
        let l = survival_estimate_at(lhs, grid, alpha)?;
        let r = survival_estimate_at(rhs, grid, alpha)?;
        let margin: Vec<f64> = (0..grid.len())
            .map(|k| factor * (r.survival[k] + r.band) - (l.survival[k] - l.band))
            .collect();
        Ok(Self {
            x: grid.to_vec(),
            violations: margin.iter().filter(|&&m| m < 0.0).count(),
            lhs: l.survival,
            rhs: r.survival,
            factor,
            lhs_band: l.band,
            rhs_band: r.band,
            margin,
            samples: lhs.len(),
            envelope: None,
        })
    }

    /// Smallest gap between the banded sides, `min_x (factor rhs - lhs)`,
    /// without bands.
    pub fn raw_gap(&self) -> f64 {
        self.lhs
            .iter()
            .zip(&self.rhs)
            .map(|(l, r)| self.factor * r - l)
            .fold(f64::INFINITY, f64::min)
    }
}

/// `P(a ΣZ_j + b > x)` against `d0 P(d0 a Z_1 + b > x)`.
pub fn check_lemma_sum_bound(
    a: f64,
    b: f64,
    prior: &NoisePrior,
    grid: XGrid,
    n: usize,
    seed: u64,
) -> Result<BoundReport, TailError> {
    let d0 = prior.d0;
    let lhs: Vec<f64> = prior
        .sample(n, sub_seed(seed, 1))
        .rows()
        .into_iter()
        .map(|z| a * z.sum() + b)
        .collect();
    let rhs: Vec<f64> = prior
        .sample_component(n, sub_seed(seed, 2))
        .into_iter()
        .map(|z| d0 as f64 * a * z + b)
        .collect();
    BoundReport::build(&lhs, &rhs, d0 as f64, &grid)
}

fn check_dims(net: &NetworkSpec, prior: &NoisePrior) -> Result<(), TailError> {
    if prior.d0 != net.input_dim() {
        return Err(TailError::BadPrior(format!(
            "prior dimension {} does not match network input {}",
            prior.d0,
            net.input_dim()
        )));
    }
    Ok(())
}

/// `P(|g_i(Z)| > x)` against `d0 P(w(|Z_1|) > x)`.
pub fn check_generator_tail_bound(
    net: &NetworkSpec,
    prior: &NoisePrior,
    i: usize,
    grid: XGrid,
    n: usize,
    seed: u64,
) -> Result<BoundReport, TailError> {
    check_dims(net, prior)?;
    let env = AffineEnvelope::for_network(net, i)?;
    let lhs = generator_abs_outputs(net, prior, i, n, sub_seed(seed, 1));
    envelope_report(&lhs, env, prior, grid, n, seed)
}

fn envelope_report(
    lhs: &[f64],
    env: AffineEnvelope,
    prior: &NoisePrior,
    grid: XGrid,
    n: usize,
    seed: u64,
) -> Result<BoundReport, TailError> {
    let rhs: Vec<f64> = prior
        .sample_component(n, sub_seed(seed, 2))
        .into_iter()
        .map(|z| env.eval(z.abs()))
        .collect();
    let mut report = BoundReport::build(lhs, &rhs, prior.d0 as f64, &grid)?;
    report.envelope = Some(env);
    Ok(report)
}

/// [`check_generator_tail_bound`] for every output coordinate, sharing one
/// set of network evaluations. Coordinate `i` gets the same result as the
/// single-coordinate check with the same seed.
pub fn check_generator_tail_bounds(
    net: &NetworkSpec,
    prior: &NoisePrior,
    grid: XGrid,
    n: usize,
    seed: u64,
) -> Result<Vec<BoundReport>, TailError> {
    check_dims(net, prior)?;
    let outputs = generator_output_matrix(net, prior, n, sub_seed(seed, 1));
    (0..net.output_dim())
        .map(|i| {
            let lhs: Vec<f64> = outputs.column(i).iter().map(|x| x.abs()).collect();
            envelope_report(&lhs, AffineEnvelope::for_network(net, i)?, prior, grid, n, seed)
        })
        .collect()
}

/// `|g_i(Z)|` for `n` prior draws, evaluated chunk by chunk.
pub fn generator_abs_outputs(net: &NetworkSpec, prior: &NoisePrior, i: usize, n: usize, seed: u64) -> Vec<f64> {
    generator_outputs(net, prior, i, n, seed).into_iter().map(f64::abs).collect()
}

/// `g_i(Z)` for `n` prior draws.
pub fn generator_outputs(net: &NetworkSpec, prior: &NoisePrior, i: usize, n: usize, seed: u64) -> Vec<f64> {
    generator_output_matrix(net, prior, n, seed).column(i).to_vec()
}

/// `g(Z)` for `n` prior draws as an `n x out` matrix.
pub fn generator_output_matrix(net: &NetworkSpec, prior: &NoisePrior, n: usize, seed: u64) -> Array2<f64> {
    let d = prior.d0;
    let parts = rng::par_chunks(n, CHUNK, seed, |_, len, r| {
        let z = Array2::from_shape_fn((len, d), |_| prior.draw(r));
        net.eval_batch(&z)
    });
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Array2::zeros((0, net.output_dim()));
    }
    ndarray::concatenate(Axis(0), &views).expect("matching widths")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub p: u32,
    pub estimate: f64,
    /// 99% normal-approximation half-width of the estimate.
    pub band: f64,
    /// `Σ_k C(p,k) L^k E‖Z‖₁^k ‖g(0)‖₁^(p-k)`; absent when the prior lacks
    /// the moments.
    pub bound: Option<f64>,
    pub premise_violated: bool,
    pub holds: bool,
    pub samples: usize,
}

/// Monte Carlo `E‖g(Z)‖₁^p` against the binomial bound.
pub fn check_moment_bound(
    net: &NetworkSpec,
    prior: &NoisePrior,
    p: u32,
    n: usize,
    seed: u64,
) -> Result<MomentReport, TailError> {
    check_dims(net, prior)?;
    if n < MIN_SAMPLES {
        return Err(TailError::TooFewSamples(n));
    }
    let d = prior.d0;
    let vals: Vec<f64> = rng::par_chunks(n, CHUNK, seed, |_, len, r| {
        let z = Array2::from_shape_fn((len, d), |_| prior.draw(r));
        net.eval_batch(&z)
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|x| x.abs()).sum::<f64>().powi(p as i32))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let band = Z99 * (var / n as f64).sqrt();

    let bound = prior.l1_norm_moments(p).map(|ez| {
        let l = lipschitz_upper_bound(net);
        let g0: f64 = net.eval(&vec![0.0; d]).iter().map(|x| x.abs()).sum();
        (0..=p)
            .map(|k| binomial(p, k) * l.powi(k as i32) * ez[k as usize] * g0.powi((p - k) as i32))
            .sum::<f64>()
    });
    Ok(MomentReport {
        p,
        estimate: mean,
        band,
        premise_violated: bound.is_none(),
        holds: bound.is_none_or(|b| mean <= b + band),
        bound,
        samples: n,
    })
}

/// `ln F̄_model(x) - ln F̄_target(x)` with a band from both DKW bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCurve {
    pub x: Vec<f64>,
    #[serde(with = "crate::nullable::seq")]
    pub ratio: Vec<f64>,
    #[serde(with = "crate::nullable::seq")]
    pub lower: Vec<f64>,
    #[serde(with = "crate::nullable::seq")]
    pub upper: Vec<f64>,
}

impl RatioCurve {
    /// Least-squares slope of the finite part of the curve.
    pub fn slope(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .x
            .iter()
            .zip(&self.ratio)
            .filter(|(_, r)| r.is_finite())
            .map(|(&x, &r)| (x, r))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
        Some(sxy / sxx)
    }

    /// CSV `x,ratio,lower,upper`; non-finite values are written as-is.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,ratio,lower,upper\n");
        for k in 0..self.x.len() {
            out.push_str(&format!("{},{},{},{}\n", self.x[k], self.ratio[k], self.lower[k], self.upper[k]));
        }
        out
    }
}

/// Empirical quantile by the order statistic at `ceil(q n)`.
pub fn empirical_quantile(samples: &[f64], q: f64) -> f64 {
    let s = sorted(samples);
    let k = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    s[k]
}

/// Log survival ratio of model to target samples on `grid`. Grid points
/// where the target has no exceedances are dropped.
pub fn log_survival_ratio(model: &[f64], target: &[f64], grid: &[f64]) -> Result<RatioCurve, TailError> {
    let m = survival_estimate(model, grid)?;
    let t = survival_estimate(target, grid)?;
    let mut out = RatioCurve {
        x: vec![],
        ratio: vec![],
        lower: vec![],
        upper: vec![],
    };
    for k in 0..grid.len() {
        if t.survival[k] == 0.0 {
            continue;
        }
        out.x.push(grid[k]);
        out.ratio.push(m.survival[k].ln() - t.survival[k].ln());
        out.lower.push(m.lower(k).ln() - t.upper(k).ln());
        out.upper.push(m.upper(k).ln() - t.lower(k).ln());
    }
    if out.x.is_empty() {
        return Err(TailError::EmptyTail);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub prior: NoisePrior,
    /// Hidden widths between the prior dimension and the scalar output.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub laplace_scale: f64,
    /// Samples per side for the evaluation curves.
    pub eval_samples: usize,
    pub grid_points: usize,
    /// The tail region starts at this target quantile.
    pub tail_quantile: f64,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            prior: NoisePrior::standard_gaussian(1),
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            steps: 2000,
            batch: 512,
            lr: 1e-2,
            laplace_scale: 1.0,
            eval_samples: 200_000,
            grid_points: 40,
            tail_quantile: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub network: NetworkSpec,
    pub lipschitz: f64,
    /// `L sup‖z‖₁ + |g(0)|` over the prior support, which is `d0 L + |g(0)|`
    /// for `U(0,1)` noise; absent for unbounded priors.
    pub support_bound: Option<f64>,
    /// Exact `P(X > support_bound)` under the Laplace target.
    pub target_exceedance: Option<f64>,
    pub model_max: f64,
    pub target_max: f64,
    pub curve: RatioCurve,
    #[serde(with = "crate::nullable::scalar")]
    pub slope: f64,
    pub final_loss: f64,
}

/// Trains a scalar generator by sorted-sample MSE (one-dimensional optimal
/// transport) toward Laplace data.
pub fn train_generator(cfg: &DemoConfig) -> Result<(NetworkSpec, f64), TailError> {
    let mut widths = vec![cfg.prior.d0];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut net = NetworkSpec::random(&widths, cfg.activation, 0.1, &mut rng::stream(cfg.seed, 0))?;
    let mut params = net.flat_params();
    let mut adam = AdamState::new(
        params.len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let z = cfg.prior.sample(cfg.batch, sub_seed(cfg.seed, 2 * step as u64 + 10));
        let target = sorted(&laplace_samples(cfg.batch, cfg.laplace_scale, sub_seed(cfg.seed, 2 * step as u64 + 11)));
        let out = net.eval_batch(&z);
        let mut order: Vec<usize> = (0..cfg.batch).collect();
        order.sort_by(|&a, &b| out[[a, 0]].total_cmp(&out[[b, 0]]));
        let mut aligned = vec![0.0; cfg.batch];
        for (rank, &i) in order.iter().enumerate() {
            aligned[i] = target[rank];
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let g = net.forward_tape(&mut tape, zv);
        let t = tape.column(&aligned);
        let diff = tape.sub(g, t);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss)?;
        last = tape.scalar(loss);
        adam.config.lr = cosine_lr(cfg.lr, 0.05, step, cfg.steps);
        adam.step(&mut params, &grads.flat())?;
        net.set_flat_params(&params);
    }
    Ok((net, last))
}

/// Trains a generator and compares its upper tail with the Laplace target
/// beyond the target's `tail_quantile`.
pub fn tail_comparison_demo(cfg: &DemoConfig) -> Result<DemoReport, TailError> {
    let (net, final_loss) = train_generator(cfg)?;
    let model = generator_outputs(&net, &cfg.prior, 0, cfg.eval_samples, sub_seed(cfg.seed, 1));
    let target = laplace_samples(cfg.eval_samples, cfg.laplace_scale, sub_seed(cfg.seed, 3));
    let lo = empirical_quantile(&target, cfg.tail_quantile);
    let hi = empirical_quantile(&target, 1.0 - 50.0 / cfg.eval_samples as f64);
    let curve = log_survival_ratio(&model, &target, &linear_grid(lo, hi, cfg.grid_points))?;
    let lipschitz = lipschitz_upper_bound(&net);
    let g0 = net.eval(&vec![0.0; cfg.prior.d0])[0].abs();
    let support_bound = cfg.prior.support_radius().map(|r| r * lipschitz + g0);
    Ok(DemoReport {
        support_bound,
        target_exceedance: support_bound.map(|b| 0.5 * (-b / cfg.laplace_scale).exp()),
        lipschitz,
        model_max: model.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        target_max: target.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        slope: curve.slope().unwrap_or(f64::NAN),
        curve,
        network: net,
        final_loss,
    })
}
