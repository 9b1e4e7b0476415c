//! Bivariate Real NVP: a stack of affine coupling layers.
//!
//! Layer with active coordinate `j` maps `x_j -> x_j * exp(s(x_p)) + t(x_p)`
//! and leaves the passive coordinate `x_p` unchanged. `s` and `t` come from a
//! scalar MLP conditioner; the log-scale is bounded as `S * tanh(s_raw / S)`.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{tanh, Tape, Var};

pub const DEFAULT_DEPTH: usize = 6;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_S_MAX: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("non-finite value in coupling layer {layer}")]
    NonFinite { layer: usize },
    #[error("expected {expected} parameters, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("expected an n x 2 batch, got {rows} x {cols}")]
    BadBatch { rows: usize, cols: usize },
}

/// Which coordinate a layer transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Active {
    First,
    Second,
}

impl Active {
    pub fn index(self) -> usize {
        match self {
            Active::First => 0,
            Active::Second => 1,
        }
    }

    pub fn passive(self) -> usize {
        1 - self.index()
    }
}

/// Scalar-input MLP producing `(s_raw, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioner {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ws: Array2<f64>,
    pub bs: Array2<f64>,
    pub wt: Array2<f64>,
    pub bt: Array2<f64>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl Conditioner {
    /// Glorot hidden layers; heads drawn from `N(0, head_std²)` (zero when
    /// `head_std` is 0).
    pub fn new<R: Rng + ?Sized>(hidden: usize, head_std: f64, rng: &mut R) -> Self {
        let w1 = glorot(hidden, 1, rng);
        let w2 = glorot(hidden, hidden, rng);
        let head = |rows: usize, cols: usize, rng: &mut R| {
            if head_std == 0.0 {
                Array2::zeros((rows, cols))
            } else {
                let n = Normal::new(0.0, head_std).expect("valid std");
                Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
            }
        };
        let ws = head(1, hidden, rng);
        let bs = head(1, 1, rng);
        let wt = head(1, hidden, rng);
        let bt = head(1, 1, rng);
        Self {
            w1,
            b1: Array2::zeros((1, hidden)),
            w2,
            b2: Array2::zeros((1, hidden)),
            ws,
            bs,
            wt,
            bt,
        }
    }

    /// Conditioner that ignores its input.
    pub fn constant(hidden: usize, s_raw: f64, t: f64) -> Self {
        let mut c = Self {
            w1: Array2::zeros((hidden, 1)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array2::zeros((1, hidden)),
            ws: Array2::zeros((1, hidden)),
            bs: Array2::zeros((1, 1)),
            wt: Array2::zeros((1, hidden)),
            bt: Array2::zeros((1, 1)),
        };
        c.bs[[0, 0]] = s_raw;
        c.bt[[0, 0]] = t;
        c
    }

    fn leaves(&self) -> [&Array2<f64>; 8] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.ws, &self.bs, &self.wt, &self.bt,
        ]
    }

    fn leaves_mut(&mut self) -> [&mut Array2<f64>; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ws,
            &mut self.bs,
            &mut self.wt,
            &mut self.bt,
        ]
    }

    fn eval(&self, x: f64) -> (f64, f64) {
        let h1: Vec<f64> = self
            .w1
            .column(0)
            .iter()
            .zip(self.b1.row(0))
            .map(|(w, b)| tanh(w * x + b))
            .collect();
        let h2: Vec<f64> = self
            .w2
            .rows()
            .into_iter()
            .zip(self.b2.row(0))
            .map(|(row, b)| tanh(row.iter().zip(&h1).map(|(w, h)| w * h).sum::<f64>() + b))
            .collect();
        let head = |w: &Array2<f64>, b: &Array2<f64>| {
            w.row(0).iter().zip(&h2).map(|(w, h)| w * h).sum::<f64>() + b[[0, 0]]
        };
        (head(&self.ws, &self.bs), head(&self.wt, &self.bt))
    }

    /// Column inputs `n x 1` to `(s_raw, t)`, each `n x 1`.
    fn eval_batch(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut h1 = x.dot(&self.w1.t());
        h1 += &self.b1;
        h1.mapv_inplace(tanh);
        let mut h2 = h1.dot(&self.w2.t());
        h2 += &self.b2;
        h2.mapv_inplace(tanh);
        let s = h2.dot(&self.ws.t()) + &self.bs;
        let t = h2.dot(&self.wt.t()) + &self.bt;
        (s, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub active: Active,
    pub s_max: f64,
    pub conditioner: Conditioner,
}

impl CouplingLayer {
    fn log_scale(&self, s_raw: f64) -> f64 {
        self.s_max * tanh(s_raw / self.s_max)
    }

    /// `(y, log-scale)` for one point.
    pub fn forward(&self, x: [f64; 2]) -> ([f64; 2], f64) {
        let (j, p) = (self.active.index(), self.active.passive());
        let (s_raw, t) = self.conditioner.eval(x[p]);
        let s = self.log_scale(s_raw);
        let mut y = x;
        y[j] = x[j] * s.exp() + t;
        (y, s)
    }

    /// `(x, -log-scale)` for one point.
    pub fn inverse(&self, y: [f64; 2]) -> ([f64; 2], f64) {
        let (j, p) = (self.active.index(), self.active.passive());
        let (s_raw, t) = self.conditioner.eval(y[p]);
        let s = self.log_scale(s_raw);
        let mut x = y;
        x[j] = (y[j] - t) * (-s).exp();
        (x, -s)
    }
}

/// Coupling stack on `R²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealNvp2 {
    layers: Vec<CouplingLayer>,
    constrained: bool,
}

impl RealNvp2 {
    /// `depth` layers alternating the active coordinate, or all acting on the
    /// first coordinate when `constrained`.
    pub fn new<R: Rng + ?Sized>(
        depth: usize,
        hidden: usize,
        constrained: bool,
        s_max: f64,
        head_std: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| CouplingLayer {
                active: if constrained || i % 2 == 0 {
                    Active::First
                } else {
                    Active::Second
                },
                s_max,
                conditioner: Conditioner::new(hidden, head_std, rng),
            })
            .collect();
        Self {
            layers,
            constrained,
        }
    }

    /// Default architecture, starting at the identity map.
    pub fn identity_init<R: Rng + ?Sized>(constrained: bool, rng: &mut R) -> Self {
        Self::new(
            DEFAULT_DEPTH,
            DEFAULT_HIDDEN,
            constrained,
            DEFAULT_S_MAX,
            0.0,
            rng,
        )
    }

    /// Explicit layers. `constrained` requires every layer to act on the
    /// first coordinate.
    pub fn from_layers(layers: Vec<CouplingLayer>, constrained: bool) -> Option<Self> {
        if constrained && layers.iter().any(|l| l.active != Active::First) {
            return None;
        }
        Some(Self {
            layers,
            constrained,
        })
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn forward(&self, x: [f64; 2]) -> Result<([f64; 2], f64), CouplingError> {
        let mut y = x;
        let mut logdet = 0.0;
        for (i, l) in self.layers.iter().enumerate() {
            let (next, s) = l.forward(y);
            if !(next[0].is_finite() && next[1].is_finite() && s.is_finite()) {
                return Err(CouplingError::NonFinite { layer: i + 1 });
            }
            y = next;
            logdet += s;
        }
        Ok((y, logdet))
    }

    pub fn inverse(&self, y: [f64; 2]) -> Result<([f64; 2], f64), CouplingError> {
        let mut x = y;
        let mut logdet = 0.0;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (prev, s) = l.inverse(x);
            if !(prev[0].is_finite() && prev[1].is_finite() && s.is_finite()) {
                return Err(CouplingError::NonFinite { layer: i + 1 });
            }
            x = prev;
            logdet += s;
        }
        Ok((x, logdet))
    }

    fn check_batch(x: &Array2<f64>) -> Result<(), CouplingError> {
        if x.ncols() != 2 {
            return Err(CouplingError::BadBatch {
                rows: x.nrows(),
                cols: x.ncols(),
            });
        }
        Ok(())
    }

    fn batch_pass(&self, x: &Array2<f64>, inverse: bool) -> Result<(Array2<f64>, Array1<f64>), CouplingError> {
        Self::check_batch(x)?;
        let mut cols = [x.slice(s![.., 0..1]).to_owned(), x.slice(s![.., 1..2]).to_owned()];
        let mut logdet = Array2::zeros((x.nrows(), 1));
        let order: Vec<usize> = if inverse {
            (0..self.layers.len()).rev().collect()
        } else {
            (0..self.layers.len()).collect()
        };
        for i in order {
            let l = &self.layers[i];
            let (j, p) = (l.active.index(), l.active.passive());
            let (s_raw, t) = l.conditioner.eval_batch(&cols[p]);
            let s = s_raw.mapv(|r| l.log_scale(r));
            if inverse {
                cols[j] = (&cols[j] - &t) * &s.mapv(|s| (-s).exp());
                logdet -= &s;
            } else {
                cols[j] = &cols[j] * &s.mapv(f64::exp) + &t;
                logdet += &s;
            }
            if cols[j].iter().chain(s.iter()).any(|v| !v.is_finite()) {
                return Err(CouplingError::NonFinite { layer: i + 1 });
            }
        }
        let out = concatenate(Axis(1), &[cols[0].view(), cols[1].view()]).expect("matching rows");
        Ok((out, logdet.column(0).to_owned()))
    }

    /// Row-wise forward over an `n x 2` batch.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), CouplingError> {
        self.batch_pass(x, false)
    }

    /// Row-wise inverse over an `n x 2` batch.
    pub fn inverse_batch(&self, y: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), CouplingError> {
        self.batch_pass(y, true)
    }

    /// Leaf shapes in flattening order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| l.conditioner.leaves().map(|a| a.dim()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.conditioner.leaves().into_iter().flat_map(|a| a.iter().copied()))
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), CouplingError> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(CouplingError::ParamCount {
                expected,
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for leaf in l.conditioner.leaves_mut() {
                leaf.iter_mut().for_each(|x| *x = it.next().unwrap());
            }
        }
        Ok(())
    }

    /// Registers all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundNvp {
        let vars = tape.params_from_flat(&self.flat_params(), &self.shapes());
        let layers = self
            .layers
            .iter()
            .zip(vars.chunks(8))
            .map(|(l, v)| BoundLayer {
                active: l.active,
                s_max: l.s_max,
                leaves: v.try_into().expect("eight leaves per layer"),
            })
            .collect();
        BoundNvp { layers }
    }
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    active: Active,
    s_max: f64,
    leaves: [Var; 8],
}

impl BoundLayer {
    /// `(log-scale, shift)` for an `n x 1` passive column.
    fn conditioner(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let [w1, b1, w2, b2, ws, bs, wt, bt] = self.leaves;
        let h1 = tape.linear(x, w1, b1);
        let h1 = tape.tanh(h1);
        let h2 = tape.linear(h1, w2, b2);
        let h2 = tape.tanh(h2);
        let s_raw = tape.linear(h2, ws, bs);
        let t = tape.linear(h2, wt, bt);
        let s = tape.scale(s_raw, 1.0 / self.s_max);
        let s = tape.tanh(s);
        (tape.scale(s, self.s_max), t)
    }
}

/// A Real NVP whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundNvp {
    layers: Vec<BoundLayer>,
}

impl BoundNvp {
    /// Forward map of two `n x 1` columns; returns the columns and the
    /// `n x 1` log-determinant.
    pub fn forward(&self, tape: &mut Tape, x: [Var; 2]) -> ([Var; 2], Var) {
        let mut cols = x;
        let mut logdet: Option<Var> = None;
        for l in &self.layers {
            let (j, p) = (l.active.index(), l.active.passive());
            let (s, t) = l.conditioner(tape, cols[p]);
            let scale = tape.exp(s);
            let scaled = tape.mul(cols[j], scale);
            cols[j] = tape.add(scaled, t);
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        let logdet = logdet.unwrap_or_else(|| zeros_like(tape, x[0]));
        (cols, logdet)
    }

    /// Inverse map; the log-determinant is that of the inverse.
    pub fn inverse(&self, tape: &mut Tape, y: [Var; 2]) -> ([Var; 2], Var) {
        let mut cols = y;
        let mut logdet: Option<Var> = None;
        for l in self.layers.iter().rev() {
            let (j, p) = (l.active.index(), l.active.passive());
            let (s, t) = l.conditioner(tape, cols[p]);
            let neg_s = tape.neg(s);
            let inv_scale = tape.exp(neg_s);
            let shifted = tape.sub(cols[j], t);
            cols[j] = tape.mul(shifted, inv_scale);
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, neg_s),
                None => neg_s,
            });
        }
        let logdet = logdet.unwrap_or_else(|| zeros_like(tape, y[0]));
        (cols, logdet)
    }
}

fn zeros_like(tape: &mut Tape, x: Var) -> Var {
    let rows = tape.value(x).nrows();
    tape.constant(Array2::zeros((rows, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{grad_compare, relative_error};
    use crate::rng;

    fn random_net(seed: u64, constrained: bool) -> RealNvp2 {
        RealNvp2::new(6, 8, constrained, DEFAULT_S_MAX, 0.3, &mut rng::stream(seed, 0))
    }

    #[test]
    fn identity_init_is_identity() {
        let net = RealNvp2::identity_init(false, &mut rng::stream(0, 0));
        let (y, ld) = net.forward([0.3, -1.7]).unwrap();
        assert_eq!(y, [0.3, -1.7]);
        assert_eq!(ld, 0.0);
        let (x, ld) = net.inverse([0.3, -1.7]).unwrap();
        assert_eq!(x, [0.3, -1.7]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn constant_conditioner_arithmetic() {
        let s_raw = DEFAULT_S_MAX * (2f64.ln() / DEFAULT_S_MAX).atanh();
        let layer = CouplingLayer {
            active: Active::Second,
            s_max: DEFAULT_S_MAX,
            conditioner: Conditioner::constant(4, s_raw, 1.0),
        };
        let net = RealNvp2::from_layers(vec![layer], false).unwrap();
        let (y, ld) = net.forward([0.3, 1.0]).unwrap();
        assert_eq!(y[0], 0.3);
        assert!((y[1] - 3.0).abs() < 1e-14);
        assert!((ld - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        for seed in 0..5 {
            let net = random_net(seed, false);
            let x = [0.4, -0.9];
            let (_, ld) = net.forward(x).unwrap();
            let h = 1e-6;
            let mut jac = [[0.0; 2]; 2];
            for k in 0..2 {
                let (mut up, mut dn) = (x, x);
                up[k] += h;
                dn[k] -= h;
                let (yu, _) = net.forward(up).unwrap();
                let (yd, _) = net.forward(dn).unwrap();
                for i in 0..2 {
                    jac[i][k] = (yu[i] - yd[i]) / (2.0 * h);
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            let numeric = det.abs().ln();
            assert!((numeric - ld).abs() / ld.abs().max(1e-12) <= 1e-5, "{numeric} vs {ld}");
        }
    }

    #[test]
    fn round_trip_and_logdet_cancel() {
        let mut r = rng::stream(77, 0);
        for seed in 0..10 {
            let net = random_net(seed, seed % 2 == 0);
            for _ in 0..100 {
                let x = [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)];
                let (y, fwd) = net.forward(x).unwrap();
                let (back, inv) = net.inverse(y).unwrap();
                assert!((back[0] - x[0]).abs() <= 1e-12 * x[0].abs().max(1.0));
                assert!((back[1] - x[1]).abs() <= 1e-12 * x[1].abs().max(1.0));
                assert!((fwd + inv).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constrained_keeps_second_coordinate_bits() {
        let net = random_net(3, true);
        for x in [[0.1, 0.7], [-3.0, 1e-9], [2.0, -5.5]] {
            assert_eq!(net.forward(x).unwrap().0[1].to_bits(), x[1].to_bits());
            assert_eq!(net.inverse(x).unwrap().0[1].to_bits(), x[1].to_bits());
        }
    }

    #[test]
    fn batch_matches_pointwise() {
        let net = random_net(4, false);
        let x = Array2::from_shape_fn((7, 2), |(i, j)| (i as f64 - 3.0) * 0.7 + j as f64 * 0.3);
        let (y, ld) = net.forward_batch(&x).unwrap();
        let (xb, ldi) = net.inverse_batch(&y).unwrap();
        for i in 0..7 {
            let (yp, lp) = net.forward([x[[i, 0]], x[[i, 1]]]).unwrap();
            assert!((y[[i, 0]] - yp[0]).abs() < 1e-12 && (y[[i, 1]] - yp[1]).abs() < 1e-12);
            assert!((ld[i] - lp).abs() < 1e-12);
            assert!((xb[[i, 0]] - x[[i, 0]]).abs() < 1e-12);
            assert!((ldi[i] + ld[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_matches_plain() {
        let net = random_net(5, false);
        let xs = [(0.2, -0.3), (1.1, 0.8), (-2.0, 0.05)];
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let c0 = tape.column(&xs.map(|p| p.0));
        let c1 = tape.column(&xs.map(|p| p.1));
        let ([y0, y1], ld) = bound.forward(&mut tape, [c0, c1]);
        let ([x0, _], ldi) = bound.inverse(&mut tape, [y0, y1]);
        for (i, &(a, b)) in xs.iter().enumerate() {
            let (y, l) = net.forward([a, b]).unwrap();
            assert!((tape.value(y0)[[i, 0]] - y[0]).abs() < 1e-12);
            assert!((tape.value(y1)[[i, 0]] - y[1]).abs() < 1e-12);
            assert!((tape.value(ld)[[i, 0]] - l).abs() < 1e-12);
            assert!((tape.value(x0)[[i, 0]] - a).abs() < 1e-12);
            assert!((tape.value(ldi)[[i, 0]] + l).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_params_round_trip() {
        let net = random_net(6, false);
        let mut other = random_net(7, false);
        other.set_flat_params(&net.flat_params()).unwrap();
        assert_eq!(other, net);
    }

    #[test]
    fn gradients_pass_check() {
        let net = RealNvp2::new(3, 4, false, DEFAULT_S_MAX, 0.5, &mut rng::stream(8, 0));
        let xs = [(0.3, -0.4), (-0.8, 0.6)];
        let pairs = grad_compare(
            |tape, p| {
                let mut n = net.clone();
                n.set_flat_params(p).unwrap();
                let bound = n.bind(tape);
                let c0 = tape.column(&xs.map(|p| p.0));
                let c1 = tape.column(&xs.map(|p| p.1));
                let ([y0, y1], ld) = bound.forward(tape, [c0, c1]);
                let mix = tape.scale(y1, 0.7);
                let out = tape.add(y0, mix);
                let out = tape.add(out, ld);
                tape.mean(out)
            },
            &net.flat_params(),
            3e-4,
        )
        .unwrap();
        let worst = pairs.iter().map(|&(a, f)| relative_error(a, f)).fold(0.0, f64::max);
        assert!(worst <= 1e-5, "{worst}");
    }
}
