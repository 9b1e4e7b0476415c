//! Deep dense sigmoidal flow: a strictly increasing scalar network.
//!
//! Layer `l` maps `h ∈ R^{d_{l-1}}` to
//! `logit(w · σ(a ⊙ (u · h) + b))` with `a > 0` and `w`, `u` row-stochastic,
//! and `d_0 = d_L = 1`. Parameters are stored unconstrained ("raw") and mapped
//! through softplus / row softmax, so any raw vector is a valid flow.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, Tape, Var};

/// Clamp applied to the mixed sigmoid output before the inverse sigmoid.
pub const LOGIT_EPS: f64 = 1e-7;

/// Hidden widths of the default body network (depth 3).
pub const DEFAULT_HIDDEN: [usize; 2] = [16, 16];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DdsfError {
    #[error("non-finite intermediate in DDSF layer {layer}")]
    NonFinite { layer: usize },
    #[error("DDSF widths must start and end with 1, got {0:?}")]
    BadWidths(Vec<usize>),
    #[error("expected {expected} parameters, got {found}")]
    ParamCount { expected: usize, found: usize },
}

/// Unconstrained parameters of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLayer {
    pub raw_a: Array1<f64>,
    pub raw_b: Array1<f64>,
    pub raw_w: Array2<f64>,
    pub raw_u: Array2<f64>,
}

/// Constrained parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub w: Array2<f64>,
    pub u: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ddsf {
    layers: Vec<RawLayer>,
}

fn softmax_rows(raw: &Array2<f64>) -> Array2<f64> {
    let mut out = raw.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

impl RawLayer {
    pub fn constrained(&self) -> Layer {
        Layer {
            a: self.raw_a.mapv(grad::softplus),
            b: self.raw_b.clone(),
            w: softmax_rows(&self.raw_w),
            u: softmax_rows(&self.raw_u),
        }
    }

    fn shapes(&self) -> [(usize, usize); 4] {
        let d = self.raw_a.len();
        [(1, d), (1, d), (d, d), (d, self.raw_u.ncols())]
    }
}

impl Ddsf {
    /// Random flow with `hidden` inner widths and raw parameters drawn from
    /// `N(0, std²)`.
    pub fn random<R: Rng + ?Sized>(hidden: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|d| {
                let (prev, cur) = (d[0], d[1]);
                RawLayer {
                    raw_a: Array1::from_shape_fn(cur, |_| normal.sample(rng)),
                    raw_b: Array1::from_shape_fn(cur, |_| normal.sample(rng)),
                    raw_w: Array2::from_shape_fn((cur, cur), |_| normal.sample(rng)),
                    raw_u: Array2::from_shape_fn((cur, prev), |_| normal.sample(rng)),
                }
            })
            .collect();
        Self { layers }
    }

    /// Default architecture: depth 3, hidden widths 16, init `N(0, 0.1²)`.
    pub fn default_init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::random(&DEFAULT_HIDDEN, 0.1, rng)
    }

    pub fn from_layers(layers: Vec<RawLayer>) -> Result<Self, DdsfError> {
        let flow = Self { layers };
        flow.validate()?;
        Ok(flow)
    }

    pub fn validate(&self) -> Result<(), DdsfError> {
        let mut widths = vec![1];
        let mut ok = !self.layers.is_empty();
        for layer in &self.layers {
            let d = layer.raw_a.len();
            ok &= layer.raw_b.len() == d
                && layer.raw_w.dim() == (d, d)
                && layer.raw_u.dim() == (d, *widths.last().unwrap());
            widths.push(d);
        }
        ok &= *widths.last().unwrap() == 1;
        if ok {
            Ok(())
        } else {
            Err(DdsfError::BadWidths(widths))
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(self.layers.iter().map(|l| l.raw_a.len()))
            .collect()
    }

    pub fn raw_layers(&self) -> &[RawLayer] {
        &self.layers
    }

    /// Maps raw parameters to `(a, b, w, u)` per layer.
    pub fn param_transform(&self) -> Vec<Layer> {
        self.layers.iter().map(RawLayer::constrained).collect()
    }

    /// Constrained form for repeated evaluation.
    pub fn compile(&self) -> CompiledDdsf {
        CompiledDdsf::new(self.param_transform())
    }

    pub fn eval(&self, x: f64) -> Result<(f64, f64), DdsfError> {
        self.compile().eval(x)
    }

    /// Leaf shapes in flattening order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().flat_map(|l| l.shapes()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.raw_a.iter());
            out.extend(l.raw_b.iter());
            out.extend(l.raw_w.iter());
            out.extend(l.raw_u.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), DdsfError> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(DdsfError::ParamCount {
                expected,
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for x in l
                .raw_a
                .iter_mut()
                .chain(l.raw_b.iter_mut())
                .chain(l.raw_w.iter_mut())
                .chain(l.raw_u.iter_mut())
            {
                *x = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Registers the raw parameters on `tape` and applies the constraint map
    /// there, so gradients flow to the raw values.
    pub fn bind(&self, tape: &mut Tape) -> BoundDdsf {
        let vars = tape.params_from_flat(&self.flat_params(), &self.shapes());
        let layers = vars
            .chunks(4)
            .map(|c| {
                let a = tape.softplus(c[0]);
                let w = tape.softmax_rows(c[2]);
                let u = tape.softmax_rows(c[3]);
                BoundLayer { a, b: c[1], w, u }
            })
            .collect();
        BoundDdsf { layers }
    }
}

/// Constrained parameters of one layer as contiguous row-major buffers.
#[derive(Debug, Clone)]
struct FlatLayer {
    d: usize,
    d_prev: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
}

impl FlatLayer {
    fn new(l: &Layer) -> Self {
        Self {
            d: l.a.len(),
            d_prev: l.u.ncols(),
            a: l.a.to_vec(),
            b: l.b.to_vec(),
            w: l.w.iter().copied().collect(),
            u: l.u.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledDdsf {
    layers: Vec<Layer>,
    flat: Vec<FlatLayer>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl CompiledDdsf {
    fn new(layers: Vec<Layer>) -> Self {
        let flat = layers.iter().map(FlatLayer::new).collect();
        Self { layers, flat }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Returns `(f(x), ln f'(x))`.
    pub fn eval(&self, x: f64) -> Result<(f64, f64), DdsfError> {
        let mut h = vec![x];
        let mut jac = vec![1.0];
        let (mut s, mut ds) = (Vec::new(), Vec::new());
        for (idx, l) in self.flat.iter().enumerate() {
            s.clear();
            ds.clear();
            for k in 0..l.d {
                let row = &l.u[k * l.d_prev..(k + 1) * l.d_prev];
                let sk = grad::sigmoid(l.a[k] * dot(row, &h) + l.b[k]);
                s.push(sk);
                ds.push(sk * (1.0 - sk) * l.a[k] * dot(row, &jac));
            }
            h.clear();
            jac.clear();
            for j in 0..l.d {
                let row = &l.w[j * l.d..(j + 1) * l.d];
                let y = dot(row, &s).clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
                h.push(grad::logit(y));
                jac.push(dot(row, &ds) / (y * (1.0 - y)));
            }
            if h.iter().chain(&jac).any(|v| !v.is_finite()) {
                return Err(DdsfError::NonFinite { layer: idx + 1 });
            }
        }
        let log_slope = jac[0].ln();
        if !log_slope.is_finite() {
            return Err(DdsfError::NonFinite {
                layer: self.flat.len(),
            });
        }
        Ok((h[0], log_slope))
    }

    /// `f(x)` alone, without the derivative pass.
    pub fn value(&self, x: f64) -> Result<f64, DdsfError> {
        let mut h = vec![x];
        let mut s = Vec::new();
        for (idx, l) in self.flat.iter().enumerate() {
            s.clear();
            for k in 0..l.d {
                let row = &l.u[k * l.d_prev..(k + 1) * l.d_prev];
                s.push(grad::sigmoid(l.a[k] * dot(row, &h) + l.b[k]));
            }
            h.clear();
            for j in 0..l.d {
                let y = dot(&l.w[j * l.d..(j + 1) * l.d], &s);
                h.push(grad::logit(y.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(DdsfError::NonFinite { layer: idx + 1 });
            }
        }
        Ok(h[0])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub a: Var,
    pub b: Var,
    pub w: Var,
    pub u: Var,
}

/// A DDSF whose constrained parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundDdsf {
    layers: Vec<BoundLayer>,
}

impl BoundDdsf {
    /// For an `m x 1` input returns `(f(x), f'(x))`, both `m x 1`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let rows = tape.value(x).nrows();
        let mut h = x;
        let mut jac = tape.constant(Array2::ones((rows, 1)));
        for l in &self.layers {
            let uh = tape.matmul_t(h, l.u);
            let pre = tape.mul(uh, l.a);
            let pre = tape.add(pre, l.b);
            let s = tape.sigmoid(pre);
            let one_minus_s = tape.affine(s, -1.0, 1.0);
            let sig_slope = tape.mul(s, one_minus_s);

            let uj = tape.matmul_t(jac, l.u);
            let uj = tape.mul(uj, l.a);
            let ds = tape.mul(sig_slope, uj);

            let y = tape.matmul_t(s, l.w);
            let y = tape.clamp(y, LOGIT_EPS, 1.0 - LOGIT_EPS);
            let dy = tape.matmul_t(ds, l.w);
            let one_minus_y = tape.affine(y, -1.0, 1.0);
            let logit_slope = tape.mul(y, one_minus_y);

            h = tape.logit(y, 0.0);
            jac = tape.div(dy, logit_slope);
        }
        (h, jac)
    }

    /// `(f(x), ln f'(x))`.
    pub fn forward_log(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let (h, jac) = self.forward(tape, x);
        (h, tape.log(jac))
    }
}
