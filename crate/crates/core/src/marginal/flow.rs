use std::cell::Cell;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{MarginalError, TailBelief};
use crate::ddsf::{CompiledDdsf, Ddsf};
use crate::rng::{self, Rng};
use crate::stats::bisect_increasing;

/// Bisection tolerance on the data scale.
pub const BISECT_TOL: f64 = 1e-12;
pub const BISECT_MAX_ITER: usize = 200;

const SAMPLE_CHUNK: usize = 8192;

/// Fixed increasing map from the body interval onto a bounded coordinate `t`
/// where the network is evaluated. Finite cut points give an affine map onto
/// `(-1, 1)`; an open side is closed off with an exponential or tanh squash.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Coord {
    Affine { mid: f64, half: f64 },
    BelowBeta { beta: f64 },
    AboveAlpha { alpha: f64 },
    Line,
}

impl Coord {
    pub(crate) fn new(alpha: f64, beta: f64) -> Self {
        match (alpha.is_finite(), beta.is_finite()) {
            (true, true) => Coord::Affine {
                mid: 0.5 * (alpha + beta),
                half: 0.5 * (beta - alpha),
            },
            (false, true) => Coord::BelowBeta { beta },
            (true, false) => Coord::AboveAlpha { alpha },
            (false, false) => Coord::Line,
        }
    }

    pub(crate) fn bounds(&self) -> (f64, f64) {
        match self {
            Coord::Affine { .. } | Coord::Line => (-1.0, 1.0),
            Coord::BelowBeta { .. } => (-1.0, 0.0),
            Coord::AboveAlpha { .. } => (0.0, 1.0),
        }
    }

    pub(crate) fn to_t(&self, x: f64) -> f64 {
        match *self {
            Coord::Affine { mid, half } => (x - mid) / half,
            Coord::BelowBeta { beta } => (x - beta).exp_m1(),
            Coord::AboveAlpha { alpha } => -(alpha - x).exp_m1(),
            Coord::Line => (0.5 * x).tanh(),
        }
    }

    /// `ln dt/dx`.
    pub(crate) fn ln_dt(&self, x: f64) -> f64 {
        match *self {
            Coord::Affine { half, .. } => -half.ln(),
            Coord::BelowBeta { beta } => x - beta,
            Coord::AboveAlpha { alpha } => alpha - x,
            Coord::Line => -x.abs() - 2.0 * (-x.abs()).exp().ln_1p() + std::f64::consts::LN_2,
        }
    }

    pub(crate) fn to_x(&self, t: f64) -> f64 {
        match *self {
            Coord::Affine { mid, half } => mid + half * t,
            Coord::BelowBeta { beta } => beta + t.ln_1p(),
            Coord::AboveAlpha { alpha } => alpha - (-t).ln_1p(),
            Coord::Line => 2.0 * t.atanh(),
        }
    }

    /// Tolerance in `t` equivalent to `tol` on the data scale. Open sides
    /// have no uniform conversion and use `tol` directly.
    fn t_tol(&self, tol: f64) -> f64 {
        match *self {
            Coord::Affine { half, .. } => tol / half,
            _ => tol,
        }
    }
}

#[derive(Debug, Clone)]
struct CompiledBody {
    coord: Coord,
    net: CompiledDdsf,
    f_lo: f64,
    f_hi: f64,
    ln_span: f64,
}

impl CompiledBody {
    fn new(body: &Ddsf, belief: &TailBelief) -> Result<Self, MarginalError> {
        let coord = Coord::new(belief.alpha(), belief.beta());
        let net = body.compile();
        let (t_lo, t_hi) = coord.bounds();
        let f_lo = net.value(t_lo)?;
        let f_hi = net.value(t_hi)?;
        if !(f_hi > f_lo) {
            return Err(MarginalError::DegenerateBody);
        }
        Ok(Self {
            coord,
            net,
            f_lo,
            f_hi,
            ln_span: (f_hi - f_lo).ln(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FlowJson {
    belief: TailBelief,
    body: Ddsf,
    tolerance: f64,
}

/// Quantile function spliced from a tail belief and a learned body.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "FlowJson", into = "FlowJson")]
pub struct UnivariateMarginalFlow {
    belief: TailBelief,
    body: Ddsf,
    tol: f64,
    compiled: CompiledBody,
}

impl TryFrom<FlowJson> for UnivariateMarginalFlow {
    type Error = MarginalError;

    fn try_from(j: FlowJson) -> Result<Self, Self::Error> {
        Ok(Self::new(j.belief, j.body)?.with_tolerance(j.tolerance))
    }
}

impl From<UnivariateMarginalFlow> for FlowJson {
    fn from(f: UnivariateMarginalFlow) -> Self {
        FlowJson {
            belief: f.belief,
            body: f.body,
            tolerance: f.tol,
        }
    }
}

impl PartialEq for UnivariateMarginalFlow {
    fn eq(&self, other: &Self) -> bool {
        self.belief == other.belief && self.body == other.body && self.tol == other.tol
    }
}

impl UnivariateMarginalFlow {
    pub fn new(belief: TailBelief, body: Ddsf) -> Result<Self, MarginalError> {
        let compiled = CompiledBody::new(&body, &belief)?;
        Ok(Self {
            belief,
            body,
            tol: BISECT_TOL,
            compiled,
        })
    }

    /// Flow with a freshly initialised default body.
    pub fn with_default_body(belief: TailBelief, rng: &mut Rng) -> Result<Self, MarginalError> {
        Self::new(belief, Ddsf::default_init(rng))
    }

    /// Overrides the bisection tolerance (data scale for finite cut points).
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn belief(&self) -> &TailBelief {
        &self.belief
    }

    pub fn body(&self) -> &Ddsf {
        &self.body
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    pub fn set_body(&mut self, body: Ddsf) -> Result<(), MarginalError> {
        self.compiled = CompiledBody::new(&body, &self.belief)?;
        self.body = body;
        Ok(())
    }

    pub(crate) fn coord(&self) -> Coord {
        self.compiled.coord
    }

    pub fn in_body(&self, x: f64) -> bool {
        self.belief.alpha() < x && x < self.belief.beta()
    }

    /// `m^{-1}(x)`: the tail CDF on the tails, the rescaled body in between.
    pub fn cdf(&self, x: f64) -> Result<f64, MarginalError> {
        if x.is_nan() {
            return Err(MarginalError::NonFiniteInput(x));
        }
        if x == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        if x == f64::INFINITY {
            return Ok(1.0);
        }
        if !self.in_body(x) {
            return self.belief.cdf(x);
        }
        let c = &self.compiled;
        let f = c.net.value(c.coord.to_t(x))?;
        let (a, b) = (self.belief.a(), self.belief.b());
        let g = a + (b - a) * (f - c.f_lo) / (c.f_hi - c.f_lo);
        Ok(g.clamp(a, b))
    }

    /// `m(u)`.
    pub fn forward(&self, u: f64) -> Result<f64, MarginalError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(MarginalError::OutOfUnitInterval(u));
        }
        let (a, b) = (self.belief.a(), self.belief.b());
        if u <= a || u >= b {
            return self.belief.quantile(u);
        }
        let c = &self.compiled;
        let target = (c.f_lo + (u - a) / (b - a) * (c.f_hi - c.f_lo)).clamp(c.f_lo, c.f_hi);
        let (t_lo, t_hi) = c.coord.bounds();
        let failure = Cell::new(None);
        let eval = |t: f64| {
            if t == t_lo {
                return c.f_lo;
            }
            if t == t_hi {
                return c.f_hi;
            }
            c.net.value(t).unwrap_or_else(|e| {
                failure.set(Some(e));
                f64::NAN
            })
        };
        let t_tol = c.coord.t_tol(self.tol);
        let t = bisect_increasing(eval, target, t_lo, t_hi, t_tol, BISECT_MAX_ITER)?;
        if let Some(e) = failure.take() {
            return Err(e.into());
        }
        let x = c.coord.to_x(t);
        // keep the body image strictly inside the open interval
        Ok(x.clamp(self.belief.alpha().next_up(), self.belief.beta().next_down()))
    }

    /// `ln d(m^{-1})/dx` for `x` strictly inside the body.
    pub fn log_density(&self, x: f64) -> Result<f64, MarginalError> {
        if !self.in_body(x) {
            return Err(MarginalError::OutsideBody(x));
        }
        let c = &self.compiled;
        let (_, ln_slope) = c.net.eval(c.coord.to_t(x))?;
        let (a, b) = (self.belief.a(), self.belief.b());
        Ok((b - a).ln() + ln_slope + c.coord.ln_dt(x) - c.ln_span)
    }

    /// Log density of the whole spliced law; undefined on the splice points.
    pub fn ln_pdf(&self, x: f64) -> Result<f64, MarginalError> {
        if !x.is_finite() {
            return Err(MarginalError::NonFiniteInput(x));
        }
        if x == self.belief.alpha() || x == self.belief.beta() {
            return Err(MarginalError::Seam(x));
        }
        if self.in_body(x) {
            self.log_density(x)
        } else {
            self.belief.ln_pdf(x)
        }
    }

    /// Mean body NLL over the samples strictly inside `(alpha, beta)`, with
    /// the number kept.
    pub fn body_nll(&self, samples: &[f64]) -> Result<(f64, usize), MarginalError> {
        let mut total = 0.0;
        let mut kept = 0usize;
        for &x in samples.iter().filter(|&&x| self.in_body(x)) {
            total -= self.log_density(x)?;
            kept += 1;
        }
        if kept == 0 {
            return Err(MarginalError::NoBodySamples);
        }
        Ok((total / kept as f64, kept))
    }

    /// `n` draws of `m(U)`, reproducible for a given seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>, MarginalError> {
        let chunks = rng::par_chunks(n, SAMPLE_CHUNK, seed, |_, len, r| {
            (0..len)
                .map(|_| self.forward(r.random::<f64>()))
                .collect::<Result<Vec<f64>, _>>()
        });
        let mut out = Vec::with_capacity(n);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Two univariate marginal flows acting coordinatewise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariateMarginalFlow {
    pub first: UnivariateMarginalFlow,
    pub second: UnivariateMarginalFlow,
}

impl BivariateMarginalFlow {
    pub fn new(first: UnivariateMarginalFlow, second: UnivariateMarginalFlow) -> Self {
        Self { first, second }
    }

    pub fn forward(&self, u: [f64; 2]) -> Result<[f64; 2], MarginalError> {
        Ok([self.first.forward(u[0])?, self.second.forward(u[1])?])
    }

    pub fn cdf(&self, x: [f64; 2]) -> Result<[f64; 2], MarginalError> {
        Ok([self.first.cdf(x[0])?, self.second.cdf(x[1])?])
    }

    /// Sum of the two marginal log densities.
    pub fn ln_pdf(&self, x: [f64; 2]) -> Result<f64, MarginalError> {
        Ok(self.first.ln_pdf(x[0])? + self.second.ln_pdf(x[1])?)
    }
}
