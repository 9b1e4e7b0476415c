//! Reference bivariate copulas: Clayton, Frank, Gumbel and independence.
//!
//! Densities are evaluated in log space. Sampling uses the conditional
//! distribution method: `u2 ~ U(0,1)`, then `u1` inverts `∂C/∂u2` at an
//! independent uniform.

use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::stats::{bisect_increasing, chi_square_sf, BisectError};

const SAMPLE_CHUNK: usize = 16_384;
pub const CONDITIONAL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CopulaError {
    #[error("invalid parameter {theta} for {family}")]
    InvalidTheta { family: Family, theta: f64 },
    #[error("unknown copula family '{0}'")]
    UnknownFamily(String),
    #[error("point ({0}, {1}) is not strictly inside the unit square")]
    Boundary(f64, f64),
    #[error("point ({0}, {1}) is outside the unit square")]
    OutOfRange(f64, f64),
    #[error("density evaluation at ({0}, {1}) is not finite")]
    InvalidEvaluation(f64, f64),
    #[error(transparent)]
    Bisect(#[from] BisectError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Clayton,
    Frank,
    Gumbel,
    Independence,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Family::Clayton => "clayton",
            Family::Frank => "frank",
            Family::Gumbel => "gumbel",
            Family::Independence => "independence",
        };
        f.write_str(name)
    }
}

impl FromStr for Family {
    type Err = CopulaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "clayton" => Ok(Family::Clayton),
            "frank" => Ok(Family::Frank),
            "gumbel" => Ok(Family::Gumbel),
            "independence" | "independent" => Ok(Family::Independence),
            _ => Err(CopulaError::UnknownFamily(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CopulaJson", into = "CopulaJson")]
pub struct ReferenceCopula {
    family: Family,
    theta: f64,
}

#[derive(Serialize, Deserialize)]
struct CopulaJson {
    family: Family,
    #[serde(default)]
    theta: f64,
}

impl TryFrom<CopulaJson> for ReferenceCopula {
    type Error = CopulaError;

    fn try_from(j: CopulaJson) -> Result<Self, Self::Error> {
        Self::new(j.family, j.theta)
    }
}

impl From<ReferenceCopula> for CopulaJson {
    fn from(c: ReferenceCopula) -> Self {
        CopulaJson {
            family: c.family,
            theta: c.theta,
        }
    }
}

impl fmt::Display for ReferenceCopula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Independence => write!(f, "independence"),
            fam => write!(f, "{fam}({})", self.theta),
        }
    }
}

/// `ln(exp(a) + exp(b) - 1)` for `a, b >= 0`.
fn ln_sum_exp_minus_one(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp() - (-m).exp()).ln()
}

impl ReferenceCopula {
    pub fn new(family: Family, theta: f64) -> Result<Self, CopulaError> {
        let ok = match family {
            Family::Clayton => theta > 0.0 && theta.is_finite(),
            Family::Frank => theta != 0.0 && theta.is_finite(),
            Family::Gumbel => theta >= 1.0 && theta.is_finite(),
            Family::Independence => true,
        };
        if !ok {
            return Err(CopulaError::InvalidTheta { family, theta });
        }
        let theta = if family == Family::Independence { 0.0 } else { theta };
        Ok(Self { family, theta })
    }

    pub fn clayton(theta: f64) -> Result<Self, CopulaError> {
        Self::new(Family::Clayton, theta)
    }

    pub fn frank(theta: f64) -> Result<Self, CopulaError> {
        Self::new(Family::Frank, theta)
    }

    pub fn gumbel(theta: f64) -> Result<Self, CopulaError> {
        Self::new(Family::Gumbel, theta)
    }

    pub fn independence() -> Self {
        Self {
            family: Family::Independence,
            theta: 0.0,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    fn interior(u: [f64; 2]) -> Result<(), CopulaError> {
        if u.iter().all(|&x| x > 0.0 && x < 1.0) {
            Ok(())
        } else {
            Err(CopulaError::Boundary(u[0], u[1]))
        }
    }

    /// `ln c(u1, u2)`.
    pub fn ln_density(&self, u: [f64; 2]) -> Result<f64, CopulaError> {
        Self::interior(u)?;
        let th = self.theta;
        let (lu, lv) = (u[0].ln(), u[1].ln());
        let value = match self.family {
            Family::Independence => 0.0,
            Family::Clayton => {
                let ln_a = ln_sum_exp_minus_one(-th * lu, -th * lv);
                (1.0 + th).ln() - (th + 1.0) * (lu + lv) - (2.0 + 1.0 / th) * ln_a
            }
            Family::Frank => {
                let em = -(-th).exp_m1();
                let d = em - (-(-th * u[0]).exp_m1()) * (-(-th * u[1]).exp_m1());
                (th * em).ln() - th * (u[0] + u[1]) - 2.0 * d.abs().ln()
            }
            Family::Gumbel => {
                let (x, y) = (-lu, -lv);
                let ln_a = ln_sum_exp_minus_one_free(th * x.ln(), th * y.ln());
                let w = (ln_a / th).exp();
                -w - lu - lv + (th - 1.0) * (x.ln() + y.ln()) + (2.0 / th - 2.0) * ln_a
                    + ((th - 1.0) / w).ln_1p()
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(CopulaError::InvalidEvaluation(u[0], u[1]))
        }
    }

    pub fn density(&self, u: [f64; 2]) -> Result<f64, CopulaError> {
        let v = self.ln_density(u)?.exp();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CopulaError::InvalidEvaluation(u[0], u[1]))
        }
    }

    /// `C(u1, u2)` on the closed square.
    pub fn cdf(&self, u: [f64; 2]) -> Result<f64, CopulaError> {
        let (a, b) = (u[0], u[1]);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
            return Err(CopulaError::OutOfRange(a, b));
        }
        if a == 0.0 || b == 0.0 {
            return Ok(0.0);
        }
        if a == 1.0 {
            return Ok(b);
        }
        if b == 1.0 {
            return Ok(a);
        }
        let th = self.theta;
        Ok(match self.family {
            Family::Independence => a * b,
            Family::Clayton => {
                let ln_a = ln_sum_exp_minus_one(-th * a.ln(), -th * b.ln());
                (-ln_a / th).exp()
            }
            Family::Frank => {
                let num = (-th * a).exp_m1() * (-th * b).exp_m1();
                -(num / (-th).exp_m1()).ln_1p() / th
            }
            Family::Gumbel => {
                let (x, y) = (-a.ln(), -b.ln());
                let ln_a = ln_sum_exp_minus_one_free(th * x.ln(), th * y.ln());
                (-(ln_a / th).exp()).exp()
            }
        })
    }

    /// `∂C/∂u2 (u1, u2)`: the distribution function of `U1` given `U2 = u2`.
    pub fn conditional(&self, u1: f64, u2: f64) -> Result<f64, CopulaError> {
        if !(u2 > 0.0 && u2 < 1.0) || !(0.0..=1.0).contains(&u1) {
            return Err(CopulaError::Boundary(u1, u2));
        }
        if u1 == 0.0 {
            return Ok(0.0);
        }
        if u1 == 1.0 {
            return Ok(1.0);
        }
        let th = self.theta;
        Ok(match self.family {
            Family::Independence => u1,
            Family::Clayton => {
                let ln_a = ln_sum_exp_minus_one(-th * u1.ln(), -th * u2.ln());
                ((-th - 1.0) * u2.ln() + (-1.0 / th - 1.0) * ln_a).exp()
            }
            Family::Frank => {
                let a = (-th * u2).exp();
                let x = (-th * u1).exp_m1();
                let d = (-th).exp_m1();
                a * x / (d + x * (-th * u2).exp_m1())
            }
            Family::Gumbel => {
                let c = self.cdf([u1, u2])?;
                let (x, y) = (-u1.ln(), -u2.ln());
                let ln_a = ln_sum_exp_minus_one_free(th * x.ln(), th * y.ln());
                c / u2 * ((th - 1.0) * y.ln() + (1.0 / th - 1.0) * ln_a).exp()
            }
        }
        .clamp(0.0, 1.0))
    }

    /// `u1` with `conditional(u1, u2) = t`.
    pub fn conditional_inverse(&self, t: f64, u2: f64) -> Result<f64, CopulaError> {
        if !(u2 > 0.0 && u2 < 1.0) || !(0.0..=1.0).contains(&t) {
            return Err(CopulaError::Boundary(t, u2));
        }
        if t == 0.0 || t == 1.0 {
            return Ok(t);
        }
        let th = self.theta;
        Ok(match self.family {
            Family::Independence => t,
            Family::Clayton => {
                let inner = (-th / (th + 1.0)) * (t.ln() + (th + 1.0) * u2.ln());
                let rest = -(-th * u2.ln()).exp_m1();
                let ln_base = inner.exp() + rest;
                (-ln_base.ln() / th).exp()
            }
            Family::Frank => {
                let a = (-th * u2).exp();
                let d = (-th).exp_m1();
                let x = t * d / (t + a * (1.0 - t));
                -x.ln_1p() / th
            }
            Family::Gumbel => {
                let f = |u: f64| self.conditional(u, u2).unwrap_or(f64::NAN);
                bisect_increasing(f, t, 0.0, 1.0, CONDITIONAL_TOL, 200)?
            }
        }
        .clamp(0.0, 1.0))
    }

    /// `n` i.i.d. pairs, reproducible by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<[f64; 2]>, CopulaError> {
        let chunks = rng::par_chunks(n, SAMPLE_CHUNK, seed, |_, len, r| {
            (0..len)
                .map(|_| {
                    let u2: f64 = r.sample(Open01);
                    let t: f64 = r.sample(Open01);
                    Ok([self.conditional_inverse(t, u2)?, u2])
                })
                .collect::<Result<Vec<_>, CopulaError>>()
        });
        let mut out = Vec::with_capacity(n);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Population Kendall's tau.
    pub fn kendall_tau(&self) -> f64 {
        let th = self.theta;
        match self.family {
            Family::Independence => 0.0,
            Family::Clayton => th / (th + 2.0),
            Family::Gumbel => 1.0 - 1.0 / th,
            Family::Frank => 1.0 - 4.0 / th * (1.0 - debye1(th)),
        }
    }

    /// Probability of the rectangle `[a1, b1) x [a2, b2)`.
    pub fn rect_prob(&self, lo: [f64; 2], hi: [f64; 2]) -> Result<f64, CopulaError> {
        Ok(self.cdf([hi[0], hi[1]])? - self.cdf([lo[0], hi[1]])? - self.cdf([hi[0], lo[1]])?
            + self.cdf([lo[0], lo[1]])?)
    }
}

/// `ln(exp(a) + exp(b))`.
fn ln_sum_exp_minus_one_free(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Debye function `D1(x) = (1/x) ∫_0^x t / (e^t - 1) dt` by composite Simpson.
pub fn debye1(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let n = 2000;
    let h = x / n as f64;
    let f = |t: f64| if t == 0.0 { 1.0 } else { t / t.exp_m1() };
    let mut sum = f(0.0) + f(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(i as f64 * h);
    }
    sum * h / 3.0 / x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square goodness of fit of `samples` against `cop` on a
/// `bins x bins` grid. Cells with expected count below `min_expected` are
/// pooled into one cell.
pub fn chi_square_gof(
    cop: &ReferenceCopula,
    samples: &[[f64; 2]],
    bins: usize,
    min_expected: f64,
) -> Result<GofResult, CopulaError> {
    let n = samples.len() as f64;
    let mut counts = vec![0usize; bins * bins];
    for s in samples {
        let i = ((s[0] * bins as f64) as usize).min(bins - 1);
        let j = ((s[1] * bins as f64) as usize).min(bins - 1);
        counts[i * bins + j] += 1;
    }
    let edge = |k: usize| k as f64 / bins as f64;
    let mut stat = 0.0;
    let mut cells = 0usize;
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for i in 0..bins {
        for j in 0..bins {
            let p = cop.rect_prob([edge(i), edge(j)], [edge(i + 1), edge(j + 1)])?;
            let expected = n * p.max(0.0);
            let observed = counts[i * bins + j] as f64;
            if expected < min_expected {
                pooled_obs += observed;
                pooled_exp += expected;
            } else {
                stat += (observed - expected).powi(2) / expected;
                cells += 1;
            }
        }
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        cells += 1;
    }
    let dof = cells.saturating_sub(1).max(1);
    Ok(GofResult {
        statistic: stat,
        dof,
        p_value: chi_square_sf(stat, dof as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all() -> Vec<ReferenceCopula> {
        vec![
            ReferenceCopula::independence(),
            ReferenceCopula::clayton(2.0).unwrap(),
            ReferenceCopula::frank(5.0).unwrap(),
            ReferenceCopula::frank(-3.0).unwrap(),
            ReferenceCopula::gumbel(5.0).unwrap(),
            ReferenceCopula::gumbel(1.0).unwrap(),
        ]
    }

    #[test]
    fn clayton_reference_values() {
        let c = ReferenceCopula::clayton(2.0).unwrap();
        let expected = 3.0 * 0.25f64.powf(-3.0) * 7f64.powf(-2.5);
        assert!((c.density([0.5, 0.5]).unwrap() - expected).abs() < 1e-13);
        assert!((expected - 1.4810).abs() < 1e-4);
        assert!((c.cdf([0.5, 0.5]).unwrap() - 7f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn gumbel_diagonal() {
        let c = ReferenceCopula::gumbel(5.0).unwrap();
        let v = c.cdf([0.5, 0.5]).unwrap();
        assert!((v - 0.5f64.powf(2f64.powf(0.2))).abs() < 1e-15);
        assert!((v - 0.451_031_983_077_137_9).abs() < 1e-15);
    }

    #[test]
    fn uniform_margins_in_cdf() {
        for c in all() {
            assert!((c.cdf([0.4, 1.0]).unwrap() - 0.4).abs() < 1e-15);
            assert!((c.cdf([1.0, 0.4]).unwrap() - 0.4).abs() < 1e-15);
            assert_eq!(c.cdf([0.4, 0.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(ReferenceCopula::clayton(0.0).is_err());
        assert!(ReferenceCopula::frank(0.0).is_err());
        assert!(ReferenceCopula::gumbel(0.5).is_err());
        assert!(ReferenceCopula::clayton(2.0).unwrap().density([0.0, 0.5]).is_err());
    }

    #[test]
    fn conditional_round_trip() {
        for c in all() {
            for i in 1..40 {
                for j in 1..40 {
                    let (t, u2) = (i as f64 / 40.0, j as f64 / 40.0);
                    let u1 = c.conditional_inverse(t, u2).unwrap();
                    let back = c.conditional(u1, u2).unwrap();
                    assert!((back - t).abs() < 1e-10, "{c} t {t} u2 {u2}: {back}");
                }
            }
        }
    }

    #[test]
    fn clayton_inverse_matches_bisection() {
        let c = ReferenceCopula::clayton(2.0).unwrap();
        let analytic = c.conditional_inverse(0.5, 0.5).unwrap();
        let numeric = bisect_increasing(
            |u| c.conditional(u, 0.5).unwrap(),
            0.5,
            0.0,
            1.0,
            1e-14,
            200,
        )
        .unwrap();
        assert!((analytic - numeric).abs() < 1e-10);
    }

    #[test]
    fn independence_conditional_is_identity() {
        let c = ReferenceCopula::independence();
        assert_eq!(c.conditional(0.3, 0.8).unwrap(), 0.3);
        assert_eq!(c.conditional_inverse(0.3, 0.8).unwrap(), 0.3);
    }

    #[test]
    fn density_is_mixed_difference_of_cdf() {
        let h = 1e-4;
        for c in all() {
            for &(a, b) in &[(0.2, 0.3), (0.5, 0.5), (0.7, 0.4), (0.85, 0.9), (0.1, 0.8)] {
                let mixed = (c.cdf([a + h, b + h]).unwrap() - c.cdf([a + h, b - h]).unwrap()
                    - c.cdf([a - h, b + h]).unwrap()
                    + c.cdf([a - h, b - h]).unwrap())
                    / (4.0 * h * h);
                let d = c.density([a, b]).unwrap();
                assert!((mixed - d).abs() <= 1e-4 * d.max(1.0), "{c} ({a},{b}): {mixed} vs {d}");
            }
        }
    }

    #[test]
    fn debye_and_frank_tau() {
        assert!((debye1(1e-9) - 1.0).abs() < 1e-9);
        assert!((debye1(5.0) - 0.320_876_197_700_146_1).abs() < 1e-12);
        let tau = ReferenceCopula::frank(5.0).unwrap().kendall_tau();
        assert!((tau - 0.456_700_958_160_116_8).abs() < 1e-12, "{tau}");
    }

    #[test]
    fn json_shape() {
        let c = ReferenceCopula::clayton(2.0).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"family":"clayton","theta":2.0}"#);
        assert!(serde_json::from_str::<ReferenceCopula>(r#"{"family":"gumbel","theta":0.2}"#).is_err());
        assert_eq!("Gumbel".parse::<Family>().unwrap(), Family::Gumbel);
    }
}
