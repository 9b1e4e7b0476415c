use serde::{Deserialize, Serialize};

use super::MarginalError;
use crate::stats::{normal_cdf, normal_ln_pdf, normal_quantile, normal_sf};

/// Parametric law assumed on one tail.
///
/// `Gaussian` is a full CDF evaluated on the tail. `Exponential` and `Gpd`
/// model the excess beyond the cut point and are scaled by the tail mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "lowercase")]
pub enum TailFamily {
    Gaussian { mean: f64, sd: f64 },
    Exponential { rate: f64 },
    Gpd { shape: f64, scale: f64 },
}

/// One side of a belief as it appears in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    #[serde(flatten)]
    pub family: TailFamily,
    /// Probability assigned to this tail. Derived from the cut point for
    /// gaussian tails; if given it must agree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BeliefJson {
    alpha: Option<f64>,
    beta: Option<f64>,
    left: Option<TailSpec>,
    right: Option<TailSpec>,
}

/// A CDF trusted on `(-inf, alpha] ∪ [beta, inf)`.
///
/// A side without a spec has an infinite cut point and zero mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BeliefJson", into = "BeliefJson")]
pub struct TailBelief {
    alpha: f64,
    beta: f64,
    left: Option<TailFamily>,
    right: Option<TailFamily>,
    a: f64,
    b: f64,
    upper: f64,
}

const MASS_AGREEMENT: f64 = 1e-9;

fn check_family(f: &TailFamily) -> Result<(), MarginalError> {
    let ok = match *f {
        TailFamily::Gaussian { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
        TailFamily::Exponential { rate } => rate > 0.0 && rate.is_finite(),
        TailFamily::Gpd { shape, scale } => shape.is_finite() && scale > 0.0 && scale.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(MarginalError::InvalidBelief(format!(
            "invalid tail parameters {f:?}"
        )))
    }
}

fn side_mass(
    spec: &TailSpec,
    cut: f64,
    left: bool,
) -> Result<f64, MarginalError> {
    check_family(&spec.family)?;
    let implied = match spec.family {
        TailFamily::Gaussian { mean, sd } => Some(if left {
            normal_cdf((cut - mean) / sd)
        } else {
            normal_sf((cut - mean) / sd)
        }),
        _ => None,
    };
    match (implied, spec.mass) {
        (Some(m), None) => Ok(m),
        (Some(m), Some(given)) if (m - given).abs() <= MASS_AGREEMENT => Ok(m),
        (Some(m), Some(given)) => Err(MarginalError::InvalidBelief(format!(
            "gaussian tail mass {given} disagrees with cut point (implies {m})"
        ))),
        (None, Some(given)) if given > 0.0 && given < 1.0 => Ok(given),
        (None, Some(given)) => Err(MarginalError::InvalidBelief(format!(
            "tail mass {given} outside (0, 1)"
        ))),
        (None, None) => Err(MarginalError::InvalidBelief(
            "tail mass required for exponential and gpd tails".into(),
        )),
    }
}

impl TryFrom<BeliefJson> for TailBelief {
    type Error = MarginalError;

    fn try_from(j: BeliefJson) -> Result<Self, Self::Error> {
        let alpha = j.alpha.unwrap_or(f64::NEG_INFINITY);
        let beta = j.beta.unwrap_or(f64::INFINITY);
        if !(alpha < beta) {
            return Err(MarginalError::InvalidBelief(format!(
                "need alpha < beta, got {alpha} >= {beta}"
            )));
        }
        let a = match (&j.left, alpha.is_finite()) {
            (Some(spec), true) => side_mass(spec, alpha, true)?,
            (None, false) => 0.0,
            (Some(_), false) => {
                return Err(MarginalError::InvalidBelief(
                    "left tail requires a finite alpha".into(),
                ))
            }
            (None, true) => {
                return Err(MarginalError::InvalidBelief(
                    "finite alpha requires a left tail".into(),
                ))
            }
        };
        let upper = match (&j.right, beta.is_finite()) {
            (Some(spec), true) => side_mass(spec, beta, false)?,
            (None, false) => 0.0,
            (Some(_), false) => {
                return Err(MarginalError::InvalidBelief(
                    "right tail requires a finite beta".into(),
                ))
            }
            (None, true) => {
                return Err(MarginalError::InvalidBelief(
                    "finite beta requires a right tail".into(),
                ))
            }
        };
        let b = 1.0 - upper;
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(MarginalError::InvalidBelief(format!(
                "tail masses leave no body: a = {a}, b = {b}"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            left: j.left.map(|s| s.family),
            right: j.right.map(|s| s.family),
            a,
            b,
            upper,
        })
    }
}

impl From<TailBelief> for BeliefJson {
    fn from(t: TailBelief) -> Self {
        let spec = |f: TailFamily, mass: f64| TailSpec {
            family: f,
            mass: match f {
                TailFamily::Gaussian { .. } => None,
                _ => Some(mass),
            },
        };
        BeliefJson {
            alpha: t.alpha.is_finite().then_some(t.alpha),
            beta: t.beta.is_finite().then_some(t.beta),
            left: t.left.map(|f| spec(f, t.a)),
            right: t.right.map(|f| spec(f, t.upper)),
        }
    }
}

impl TailBelief {
    /// Belief built from cut points and optional tail specs.
    pub fn new(
        alpha: Option<f64>,
        beta: Option<f64>,
        left: Option<TailSpec>,
        right: Option<TailSpec>,
    ) -> Result<Self, MarginalError> {
        BeliefJson {
            alpha,
            beta,
            left,
            right,
        }
        .try_into()
    }

    /// Gaussian `N(mean, sd²)` belief on both tails.
    pub fn gaussian(mean: f64, sd: f64, alpha: f64, beta: f64) -> Result<Self, MarginalError> {
        let g = TailSpec {
            family: TailFamily::Gaussian { mean, sd },
            mass: None,
        };
        Self::new(Some(alpha), Some(beta), Some(g), Some(g))
    }

    /// No tail belief at all: the body covers the whole line.
    pub fn none() -> Self {
        Self {
            alpha: f64::NEG_INFINITY,
            beta: f64::INFINITY,
            left: None,
            right: None,
            a: 0.0,
            b: 1.0,
            upper: 0.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `A(alpha)`.
    pub fn a(&self) -> f64 {
        self.a
    }

    /// `A(beta)`.
    pub fn b(&self) -> f64 {
        self.b
    }

    /// `1 - b`, stored exactly as given.
    pub fn upper_mass(&self) -> f64 {
        self.upper
    }

    pub fn left(&self) -> Option<TailFamily> {
        self.left
    }

    pub fn right(&self) -> Option<TailFamily> {
        self.right
    }

    pub fn in_left(&self, x: f64) -> bool {
        x <= self.alpha
    }

    pub fn in_right(&self, x: f64) -> bool {
        x >= self.beta
    }

    /// `A(x)` for `x` in the tail region.
    pub fn cdf(&self, x: f64) -> Result<f64, MarginalError> {
        if x == self.alpha {
            return Ok(self.a);
        }
        if x == self.beta {
            return Ok(self.b);
        }
        if x < self.alpha {
            let fam = self.left.expect("finite alpha has a left tail");
            let d = self.alpha - x;
            Ok(match fam {
                TailFamily::Gaussian { mean, sd } => normal_cdf((x - mean) / sd),
                TailFamily::Exponential { rate } => self.a * (-rate * d).exp(),
                TailFamily::Gpd { shape, scale } => self.a * gpd_sf(d, shape, scale),
            })
        } else if x > self.beta {
            let fam = self.right.expect("finite beta has a right tail");
            let d = x - self.beta;
            let upper = self.upper;
            Ok(match fam {
                TailFamily::Gaussian { mean, sd } => 1.0 - normal_sf((x - mean) / sd),
                TailFamily::Exponential { rate } => 1.0 - upper * (-rate * d).exp(),
                TailFamily::Gpd { shape, scale } => 1.0 - upper * gpd_sf(d, shape, scale),
            })
        } else {
            Err(MarginalError::NotInTail(x))
        }
    }

    /// `1 - A(x)` on the right tail, without cancellation.
    pub fn sf_right(&self, x: f64) -> Result<f64, MarginalError> {
        if !(x >= self.beta) {
            return Err(MarginalError::NotInTail(x));
        }
        let upper = self.upper;
        if x == self.beta {
            return Ok(upper);
        }
        let d = x - self.beta;
        Ok(match self.right.expect("finite beta has a right tail") {
            TailFamily::Gaussian { mean, sd } => normal_sf((x - mean) / sd),
            TailFamily::Exponential { rate } => upper * (-rate * d).exp(),
            TailFamily::Gpd { shape, scale } => upper * gpd_sf(d, shape, scale),
        })
    }

    /// `A^{-1}(u)` for `u` in `[0, a] ∪ [b, 1]`.
    pub fn quantile(&self, u: f64) -> Result<f64, MarginalError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(MarginalError::OutOfUnitInterval(u));
        }
        if u == self.a && self.alpha.is_finite() {
            return Ok(self.alpha);
        }
        if u == self.b && self.beta.is_finite() {
            return Ok(self.beta);
        }
        if u == 0.0 && self.a == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if u == 1.0 && self.b == 1.0 {
            return Ok(f64::INFINITY);
        }
        if u < self.a {
            let fam = self.left.expect("positive left mass has a family");
            let ratio = u / self.a;
            Ok(match fam {
                TailFamily::Gaussian { mean, sd } => mean + sd * normal_quantile(u),
                TailFamily::Exponential { rate } => self.alpha + ratio.ln() / rate,
                TailFamily::Gpd { shape, scale } => self.alpha - gpd_excess_quantile(ratio, shape, scale),
            })
        } else if u > self.b {
            let fam = self.right.expect("positive right mass has a family");
            let upper = self.upper;
            let ratio = (1.0 - u) / upper;
            Ok(match fam {
                TailFamily::Gaussian { mean, sd } => mean - sd * normal_quantile(1.0 - u),
                TailFamily::Exponential { rate } => self.beta - ratio.ln() / rate,
                TailFamily::Gpd { shape, scale } => self.beta + gpd_excess_quantile(ratio, shape, scale),
            })
        } else {
            Err(MarginalError::InBody(u))
        }
    }

    /// `ln A'(x)` on the tail region (seams excluded).
    pub fn ln_pdf(&self, x: f64) -> Result<f64, MarginalError> {
        if x < self.alpha {
            let d = self.alpha - x;
            Ok(match self.left.expect("finite alpha has a left tail") {
                TailFamily::Gaussian { mean, sd } => normal_ln_pdf((x - mean) / sd) - sd.ln(),
                TailFamily::Exponential { rate } => self.a.ln() + rate.ln() - rate * d,
                TailFamily::Gpd { shape, scale } => self.a.ln() + gpd_ln_pdf(d, shape, scale),
            })
        } else if x > self.beta {
            let d = x - self.beta;
            let upper = self.upper;
            Ok(match self.right.expect("finite beta has a right tail") {
                TailFamily::Gaussian { mean, sd } => normal_ln_pdf((x - mean) / sd) - sd.ln(),
                TailFamily::Exponential { rate } => upper.ln() + rate.ln() - rate * d,
                TailFamily::Gpd { shape, scale } => upper.ln() + gpd_ln_pdf(d, shape, scale),
            })
        } else {
            Err(MarginalError::NotInTail(x))
        }
    }
}

/// Survival function of a GPD excess `d >= 0`.
fn gpd_sf(d: f64, shape: f64, scale: f64) -> f64 {
    if shape == 0.0 {
        return (-d / scale).exp();
    }
    let t = 1.0 + shape * d / scale;
    if t <= 0.0 {
        0.0
    } else {
        t.powf(-1.0 / shape)
    }
}

fn gpd_ln_pdf(d: f64, shape: f64, scale: f64) -> f64 {
    if shape == 0.0 {
        return -scale.ln() - d / scale;
    }
    let t = 1.0 + shape * d / scale;
    if t <= 0.0 {
        f64::NEG_INFINITY
    } else {
        -scale.ln() - (1.0 / shape + 1.0) * t.ln()
    }
}

/// Excess `d` with `gpd_sf(d) = ratio`.
fn gpd_excess_quantile(ratio: f64, shape: f64, scale: f64) -> f64 {
    if shape == 0.0 {
        -scale * ratio.ln()
    } else {
        scale / shape * (ratio.powf(-shape) - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_right() -> TailBelief {
        let left = TailSpec {
            family: TailFamily::Exponential { rate: 1.0 },
            mass: Some(0.05),
        };
        let right = TailSpec {
            family: TailFamily::Exponential { rate: 1.0 },
            mass: Some(0.1),
        };
        TailBelief::new(Some(-1.0), Some(2.0), Some(left), Some(right)).unwrap()
    }

    #[test]
    fn exponential_right_quantile() {
        let t = exp_right();
        assert_eq!(t.b(), 0.9);
        let x = t.quantile(0.99).unwrap();
        assert!((x - (2.0 + (0.1f64 / 0.01).ln())).abs() < 1e-12);
        assert!((x - 4.30259).abs() < 1e-5);
        assert!((t.cdf(x).unwrap() - 0.99).abs() < 1e-14);
    }

    #[test]
    fn cut_points_are_pinned() {
        let t = exp_right();
        assert_eq!(t.quantile(t.b()).unwrap(), 2.0);
        assert_eq!(t.quantile(t.a()).unwrap(), -1.0);
        let g = TailBelief::gaussian(0.0, 1.0, -1.3, 0.7).unwrap();
        assert_eq!(g.quantile(g.a()).unwrap(), -1.3);
        assert_eq!(g.quantile(g.b()).unwrap(), 0.7);
        assert_eq!(g.cdf(-1.3).unwrap(), g.a());
    }

    #[test]
    fn gaussian_left_quantile() {
        let q = normal_quantile(0.025);
        let g = TailBelief::gaussian(0.0, 1.0, q, 1.0).unwrap();
        assert!((g.a() - 0.025).abs() < 1e-15);
        let x = g.quantile(0.025).unwrap();
        assert!((x + 1.95996).abs() < 1e-5);
    }

    #[test]
    fn body_probability_is_rejected() {
        let t = exp_right();
        assert!(matches!(t.quantile(0.5), Err(MarginalError::InBody(_))));
        assert!(matches!(t.quantile(1.5), Err(MarginalError::OutOfUnitInterval(_))));
        assert!(matches!(t.cdf(0.0), Err(MarginalError::NotInTail(_))));
    }

    #[test]
    fn gpd_quantile_inverts_cdf() {
        let spec = TailSpec {
            family: TailFamily::Gpd {
                shape: 0.3,
                scale: 2.0,
            },
            mass: Some(0.04),
        };
        let t = TailBelief::new(Some(-5.0), Some(5.0), Some(spec), Some(spec)).unwrap();
        for u in [1e-6, 0.001, 0.02, 0.97, 0.999, 1.0 - 1e-7] {
            let x = t.quantile(u).unwrap();
            assert!((t.cdf(x).unwrap() - u).abs() < 1e-12 * u.max(1e-3), "{u}");
        }
    }

    #[test]
    fn json_round_trip_and_shape() {
        let t = exp_right();
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(json["right"]["family"], "exponential");
        assert_eq!(json["right"]["params"]["rate"], 1.0);
        assert_eq!(json["right"]["mass"], 0.1);
        let back: TailBelief = serde_json::from_value(json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn degenerate_body_is_rejected() {
        let spec = TailSpec {
            family: TailFamily::Exponential { rate: 1.0 },
            mass: Some(0.6),
        };
        let res = TailBelief::new(Some(0.0), Some(1.0), Some(spec), Some(spec));
        assert!(matches!(res, Err(MarginalError::InvalidBelief(_))));
        let json = r#"{"alpha": 0.0, "beta": 1.0,
            "left": {"family": "exponential", "params": {"rate": 1.0}, "mass": 1.0},
            "right": null}"#;
        assert!(serde_json::from_str::<TailBelief>(json).is_err());
    }

    #[test]
    fn gaussian_mass_must_agree() {
        let json = r#"{"alpha": -1.0, "beta": 1.0,
            "left": {"family": "gaussian", "params": {"mean": 0.0, "sd": 1.0}, "mass": 0.3},
            "right": {"family": "gaussian", "params": {"mean": 0.0, "sd": 1.0}}}"#;
        assert!(serde_json::from_str::<TailBelief>(json).is_err());
    }

    #[test]
    fn one_sided_belief() {
        let right = TailSpec {
            family: TailFamily::Exponential { rate: 2.0 },
            mass: Some(0.2),
        };
        let t = TailBelief::new(None, Some(3.0), None, Some(right)).unwrap();
        assert_eq!(t.a(), 0.0);
        assert_eq!(t.alpha(), f64::NEG_INFINITY);
        assert!((t.b() - 0.8).abs() < 1e-15);
    }
}
