use ndarray::{Array2, Axis, Zip};

use super::GradError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Param,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Sum(Var),
    Mean(Var),
    /// `scale · x + shift`; only the scale matters for the adjoint.
    Affine(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    /// Logit of the input clamped to `[eps, 1 - eps]`.
    Logit(Var, f64),
    Softplus(Var),
    SoftmaxRows(Var),
    Tanh(Var),
    Square(Var),
    Clamp(Var, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMulT(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Affine(..) => "affine",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Logit(..) => "logit",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
        }
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// A single forward pass recorded in topological order.
///
/// Every node holds a dense `rows x cols` matrix; batch dimension is the row
/// axis. Elementwise binary ops broadcast an operand with a unit dimension
/// (a `1 x n` row, an `m x 1` column or a `1 x 1` scalar) against the other.
/// Shape errors while building a graph are programming errors and panic.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints of the trainable leaves after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Var>,
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    /// Gradient with respect to a parameter leaf.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.params
            .iter()
            .position(|&p| p == var)
            .map(|i| &self.grads[i])
    }

    /// All parameter gradients flattened row-major in registration order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grads.iter().map(|g| g.len()).sum());
        for g in &self.grads {
            out.extend(g.iter().copied());
        }
        out
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn zip_with(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let a = a.broadcast(shape).expect("broadcast");
    let b = b.broadcast(shape).expect("broadcast");
    Zip::from(&a).and(&b).map_collect(|&x, &y| f(x, y))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tanh` through `exp`, with `expm1` near zero to keep relative accuracy
/// within a few ulp.
pub(crate) fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let t = if a < 0.02 {
        let e = (2.0 * a).exp_m1();
        e / (e + 2.0)
    } else {
        let e = (-2.0 * a).exp();
        (1.0 - e) / (1.0 + e)
    };
    t.copysign(x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of scalar trainable parameters registered so far.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| self.nodes[p.0].value.len()).sum()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        let v = self.push(Op::Param, value);
        self.params.push(v);
        v
    }

    /// Registers consecutive row-major chunks of `flat` as parameter leaves.
    pub fn params_from_flat(&mut self, flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Var> {
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        assert_eq!(total, flat.len(), "parameter layout does not match vector");
        let mut offset = 0;
        shapes
            .iter()
            .map(|&(r, c)| {
                let chunk = flat[offset..offset + r * c].to_vec();
                offset += r * c;
                self.param(Array2::from_shape_vec((r, c), chunk).expect("shape"))
            })
            .collect()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// An `n x 1` column from a slice.
    pub fn column(&mut self, xs: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).expect("shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    /// `a · bᵀ` for `a: m x k`, `b: n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_t inner dimensions");
        let v = va.dot(&vb.t());
        self.push(Op::MatMulT(a, b), v)
    }

    /// `x · wᵀ + bias` with `bias` a `1 x n` row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let h = self.matmul_t(x, w);
        self.add(h, bias)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let v = Array2::from_elem((1, 1), val.sum() / val.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn logit(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).mapv(|y| logit(y.clamp(eps, 1.0 - eps)));
        self.push(Op::Logit(a, eps), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Adjoints are allocated fresh on every call, so repeated calls on the
    /// same tape return identical gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients, GradError> {
        let out = &self.nodes[output.0].value;
        if out.dim() != (1, 1) {
            return Err(GradError::NonScalarOutput {
                rows: out.nrows(),
                cols: out.ncols(),
            });
        }
        for (i, node) in self.nodes[..=output.0].iter().enumerate() {
            let bad = match node.value.as_slice_memory_order() {
                Some(s) => s.iter().any(|x| !x.is_finite()),
                None => node.value.iter().any(|x| !x.is_finite()),
            };
            if bad {
                return Err(GradError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
        }

        let mut adj: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Array2::ones((1, 1)));

        fn accumulate(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match node.op {
                Op::Param => {
                    adj[i] = Some(g);
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
                    accumulate(&mut adj, a, reduce_to(g.clone(), sa));
                    accumulate(&mut adj, b, reduce_to(g, sb));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
                    accumulate(&mut adj, a, reduce_to(g.clone(), sa));
                    accumulate(&mut adj, b, reduce_to(-g, sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga = zip_with(&g, vb, |g, y| g * y);
                    let gb = zip_with(&g, va, |g, x| g * x);
                    accumulate(&mut adj, a, reduce_to(ga, va.dim()));
                    accumulate(&mut adj, b, reduce_to(gb, vb.dim()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga = zip_with(&g, vb, |g, y| g / y);
                    // d(a/b)/db = -(a/b)/b
                    let gb = zip_with(&zip_with(&g, y, |g, q| -g * q), vb, |t, y| t / y);
                    accumulate(&mut adj, a, reduce_to(ga, va.dim()));
                    accumulate(&mut adj, b, reduce_to(gb, vb.dim()));
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga = g.dot(vb);
                    let gb = g.t().dot(va);
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Sum(a) => {
                    let shape = self.value(a).dim();
                    accumulate(&mut adj, a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let shape = self.value(a).dim();
                    let n = (shape.0 * shape.1) as f64;
                    accumulate(&mut adj, a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::Affine(a, scale) => accumulate(&mut adj, a, g * scale),
                Op::Exp(a) => accumulate(&mut adj, a, g * y),
                Op::Log(a) => {
                    let ga = &g / self.value(a);
                    accumulate(&mut adj, a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &s| g * s * (1.0 - s));
                    accumulate(&mut adj, a, ga);
                }
                Op::Logit(a, eps) => {
                    let ga = Zip::from(&g).and(self.value(a)).map_collect(|&g, &x| {
                        if x < eps || x > 1.0 - eps {
                            0.0
                        } else {
                            g / (x * (1.0 - x))
                        }
                    });
                    accumulate(&mut adj, a, ga);
                }
                Op::Softplus(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(a))
                        .map_collect(|&g, &x| g * sigmoid(x));
                    accumulate(&mut adj, a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|r, &yv| *r -= dot * yv);
                    }
                    accumulate(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &t| g * (1.0 - t * t));
                    accumulate(&mut adj, a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(a))
                        .map_collect(|&g, &x| 2.0 * g * x);
                    accumulate(&mut adj, a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = Zip::from(&g)
                        .and(self.value(a))
                        .map_collect(|&g, &x| if x < lo || x > hi { 0.0 } else { g });
                    accumulate(&mut adj, a, ga);
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|p| {
                adj.get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Array2::zeros(self.nodes[p.0].value.dim()))
            })
            .collect();
        Ok(Gradients {
            params: self.params.clone(),
            grads,
        })
    }
}
