//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 x 1`. A [`Tape`] records the
//! forward computation and [`Tape::backward`] walks it in reverse. Binary
//! elementwise ops broadcast along any axis of length one, and the gradient is
//! summed back over the broadcast axes.
//!
//! Parameters live in a [`ParamStore`] outside the tape; [`Tape::param`]
//! binds a parameter lazily so repeated uses within one step share a node.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    LogSumExpRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MaxOf(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. an arbitrary node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter bound on the tape, keyed by parameter id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

/// A recording of one forward computation.
pub struct Tape<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    bound: Vec<Option<Var>>,
    bound_list: Vec<(ParamId, Var)>,
}

impl<'s> Tape<'s> {
    /// Tape with parameters read from `store`.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            store: Some(store),
            bound: vec![None; store.len()],
            bound_list: Vec::new(),
        }
    }

    /// Tape without parameters, for pure tensor computations.
    pub fn detached() -> Tape<'static> {
        Tape {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            bound_list: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input (no gradient flows out of the tape through it).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Binds a parameter. Repeated calls within one tape return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(store.value(id).clone(), Op::Param);
        self.bound[id.0] = Some(v);
        self.bound_list.push((id, v));
        v
    }

    /// Copies a value into a fresh leaf, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// `log(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a))
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumCols(a))
    }

    /// Row-wise log-sum-exp: `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.outer_iter().enumerate() {
            out[[i, 0]] = logsumexp(row.iter().copied());
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let lse = self.logsumexp_rows(a);
        self.sub(a, lse)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ls = self.log_softmax_rows(a);
        self.exp(ls)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    /// Elementwise maximum over equally shaped nodes; ties go to the earliest.
    pub fn max_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            Zip::from(&mut value)
                .and(self.value(*p))
                .for_each(|m, &x| {
                    if x > *m {
                        *m = x
                    }
                });
        }
        self.push(value, Op::MaxOf(parts.to_vec()))
    }

    /// `hard` in the forward pass, gradient of `soft` in the backward pass.
    pub fn straight_through(&mut self, hard: Array2<f64>, soft: Var) -> Var {
        let delta = &hard - self.value(soft);
        let d = self.constant(delta);
        self.add(soft, d)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&g, self.shape(*a)));
                    accumulate(&mut grads, *b, reduce_to(&g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&g, self.shape(*a)));
                    accumulate(&mut grads, *b, -reduce_to(&g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_zip(&g, self.value(*b), |x, y| x * y);
                    let gb = broadcast_zip(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, reduce_to(&ga, self.shape(*a)));
                    accumulate(&mut grads, *b, reduce_to(&gb, self.shape(*b)));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = broadcast_zip(&g, bv, |x, y| x / y);
                    // d(a/b)/db = -out/b
                    let t = broadcast_zip(&g, &node.value, |x, y| x * y);
                    let gb = broadcast_zip(&t, bv, |x, y| -x / y);
                    accumulate(&mut grads, *a, reduce_to(&ga, self.shape(*a)));
                    accumulate(&mut grads, *b, reduce_to(&gb, self.shape(*b)));
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Log(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, &g * &d)
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *a, &g * &d)
                }
                Op::Relu(a) => {
                    let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &d)
                }
                Op::Softplus(a) => {
                    let d = self.value(*a).mapv(sigmoid);
                    accumulate(&mut grads, *a, &g * &d)
                }
                Op::Sqrt(a) => {
                    let d = node.value.mapv(|y| 0.5 / y);
                    accumulate(&mut grads, *a, &g * &d)
                }
                Op::Square(a) => {
                    let d = self.value(*a) * 2.0;
                    accumulate(&mut grads, *a, &g * &d)
                }
                Op::Clamp(a, lo, hi) => {
                    let d = self
                        .value(*a)
                        .mapv(|x| if x < *lo || x > *hi { 0.0 } else { 1.0 });
                    accumulate(&mut grads, *a, &g * &d)
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga)
                }
                Op::SumRows(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    accumulate(&mut grads, *a, ga)
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(self.shape(*a)).unwrap().to_owned();
                    accumulate(&mut grads, *a, ga)
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let mut ga = x - &node.value;
                    ga.mapv_inplace(f64::exp);
                    ga *= &g;
                    accumulate(&mut grads, *a, ga)
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *a, ga)
                }
                Op::MaxOf(parts) => {
                    let (r, c) = node.value.dim();
                    let mut routed: Vec<Array2<f64>> =
                        parts.iter().map(|_| Array2::zeros((r, c))).collect();
                    for i in 0..r {
                        for j in 0..c {
                            let target = node.value[[i, j]];
                            let winner = parts
                                .iter()
                                .position(|p| self.value(*p)[[i, j]] == target)
                                .unwrap_or(0);
                            routed[winner][[i, j]] = g[[i, j]];
                        }
                    }
                    for (p, gp) in parts.iter().zip(routed) {
                        accumulate(&mut grads, *p, gp);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.bound_list.clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` over the axes along which `shape` was broadcast.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn broadcast_zip(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let shape = (a.nrows().max(b.nrows()), a.ncols().max(b.ncols()));
    let av = a
        .broadcast(shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.dim(), shape));
    let bv = b
        .broadcast(shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", b.dim(), shape));
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stable `log(sum(exp(x)))`. Returns `-inf` for an empty input.
pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}
