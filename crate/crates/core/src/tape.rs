//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles in
//! creation order, so node ids are already a topological order and the
//! backward sweep is a single reverse scan. Tapes are built fresh for each
//! training step and dropped afterwards.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::{axis_split, broadcast_index, matmul_raw, reduced_shape, transpose_raw, Tensor};

type TResult<T> = Result<T, TensorError>;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Exp,
    Log,
    Sqrt,
    Abs,
    Neg,
    Square,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    MatMul(usize, usize),
    Sum { src: usize, axis: Option<usize> },
    Mean { src: usize, axis: Option<usize> },
    Softmax(usize),
    L2Norm(usize),
    PairwiseSqDist(usize, usize),
    Gather(usize, Vec<(usize, usize)>),
    SelectRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf. [`Tape::backward`] reports a gradient for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Param, true)
    }

    /// A leaf treated as a constant (no gradient).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let needs = self.needs(parents);
        self.push(value, op, needs)
    }

    /// Reverse sweep from a scalar output. Every parameter leaf on the tape
    /// gets an entry; leaves the output does not depend on get zeros.
    pub fn backward(&self, output: Var<'_>) -> TResult<Gradients> {
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.id].value;
        if !out_val.shape().is_empty() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        adj[output.id] = Some(vec![1.0]);
        let mut grads = BTreeMap::new();

        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let need = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Param => {
                    grads.insert(id, Tensor::new(y.shape().to_vec(), g).expect("adjoint shape"));
                }
                Op::Constant => {}
                Op::Unary(kind, a) => {
                    let x = val(*a).data();
                    let yd = y.data();
                    let ga: Vec<f64> = match kind {
                        Unary::Relu => g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                        Unary::Exp => g.iter().zip(yd).map(|(g, y)| g * y).collect(),
                        Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        Unary::Sqrt => g
                            .iter()
                            .zip(yd)
                            .map(|(g, &y)| if *g == 0.0 { 0.0 } else { g * 0.5 / y })
                            .collect(),
                        Unary::Abs => g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| {
                                if x > 0.0 {
                                    *g
                                } else if x < 0.0 {
                                    -g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                        Unary::Neg => g.iter().map(|g| -g).collect(),
                        Unary::Square => g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect(),
                        Unary::Scale(c) => g.iter().map(|g| g * c).collect(),
                        Unary::AddScalar(_) => g.clone(),
                        Unary::ClampMin(lo) => {
                            g.iter().zip(x).map(|(g, &x)| if x > *lo { *g } else { 0.0 }).collect()
                        }
                    };
                    accumulate(&mut adj, *a, ga);
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (_, ia, ib) = broadcast_index("backward", av.shape(), bv.shape())?;
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    let (ad, bd) = (av.data(), bv.data());
                    for (o, &go) in g.iter().enumerate() {
                        let (x, z) = (ad[ia[o]], bd[ib[o]]);
                        let (dx, dz) = match kind {
                            Binary::Add => (go, go),
                            Binary::Sub => (go, -go),
                            Binary::Mul => (go * z, go * x),
                            Binary::Div => (go / z, -go * x / (z * z)),
                        };
                        ga[ia[o]] += dx;
                        gb[ib[o]] += dz;
                    }
                    if need(*a) {
                        accumulate(&mut adj, *a, ga);
                    }
                    if need(*b) {
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[1];
                    if need(*a) {
                        let bt = transpose_raw(bv.data(), k, m);
                        accumulate(&mut adj, *a, matmul_raw(&g, &bt, n, m, k));
                    }
                    if need(*b) {
                        let at = transpose_raw(av.data(), n, k);
                        accumulate(&mut adj, *b, matmul_raw(&at, &g, k, n, m));
                    }
                }
                Op::Sum { src, axis } | Op::Mean { src, axis } => {
                    let sv = val(*src);
                    let mean = matches!(node.op, Op::Mean { .. });
                    let ga = match axis {
                        None => {
                            let scale = if mean { 1.0 / sv.len() as f64 } else { 1.0 };
                            vec![g[0] * scale; sv.len()]
                        }
                        Some(ax) => {
                            let (outer, len, inner) = axis_split(sv.shape(), *ax);
                            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                            let mut ga = vec![0.0; sv.len()];
                            for o in 0..outer {
                                for l in 0..len {
                                    for i in 0..inner {
                                        ga[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                                    }
                                }
                            }
                            ga
                        }
                    };
                    accumulate(&mut adj, *src, ga);
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let yd = y.data();
                    let mut ga = vec![0.0; yd.len()];
                    for r in 0..yd.len() / c {
                        let (ys, gs) = (&yd[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            ga[r * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::L2Norm(a) => {
                    let xv = val(*a);
                    let c = xv.cols();
                    let xd = xv.data();
                    let mut ga = vec![0.0; xd.len()];
                    for (r, (&n, &gr)) in y.data().iter().zip(&g).enumerate() {
                        if n > 0.0 {
                            for j in 0..c {
                                ga[r * c + j] = gr * xd[r * c + j] / n;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, d) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[0];
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga = vec![0.0; ad.len()];
                    let mut gb = vec![0.0; bd.len()];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = 2.0 * gij * (ad[i * d + k] - bd[j * d + k]);
                                ga[i * d + k] += diff;
                                gb[j * d + k] -= diff;
                            }
                        }
                    }
                    // a and b may be the same node; accumulate handles that.
                    if need(*a) {
                        accumulate(&mut adj, *a, ga);
                    }
                    if need(*b) {
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Gather(a, idx) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    for (&(i, j), gv) in idx.iter().zip(&g) {
                        ga[i * c + j] += gv;
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[r * c + j];
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if need(p) {
                            accumulate(&mut adj, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::Reshape(a) => accumulate(&mut adj, *a, g),
            }
        }
        // Parameters that were never reached still get an explicit zero.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                grads.entry(id).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut adj[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward sweep, keyed by parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> &Tensor {
        self.grads.get(&v.id).expect("gradient requested for a non-parameter var")
    }

    /// Gradients of all parameter leaves, in registration order.
    pub fn all(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.values()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, kind: Unary) -> TResult<Var<'t>> {
        let x = self.value();
        let out = match kind {
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(TensorError::domain("log", format!("non-positive input {bad}")));
                }
                x.map(f64::ln)
            }
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
                    return Err(TensorError::domain("sqrt", format!("negative input {bad}")));
                }
                x.map(f64::sqrt)
            }
            Unary::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Exp => x.map(f64::exp),
            Unary::Abs => x.map(f64::abs),
            Unary::Neg => x.map(|v| -v),
            Unary::Square => x.map(|v| v * v),
            Unary::Scale(c) => x.map(|v| v * c),
            Unary::AddScalar(c) => x.map(|v| v + c),
            Unary::ClampMin(lo) => x.map(|v| v.max(lo)),
        };
        Ok(self.tape.record(out, Op::Unary(kind, self.id), &[self.id]))
    }

    pub fn relu(self) -> TResult<Var<'t>> {
        self.unary(Unary::Relu)
    }
    pub fn exp(self) -> TResult<Var<'t>> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> TResult<Var<'t>> {
        self.unary(Unary::Log)
    }
    pub fn sqrt(self) -> TResult<Var<'t>> {
        self.unary(Unary::Sqrt)
    }
    pub fn abs(self) -> TResult<Var<'t>> {
        self.unary(Unary::Abs)
    }
    pub fn neg(self) -> TResult<Var<'t>> {
        self.unary(Unary::Neg)
    }
    pub fn square(self) -> TResult<Var<'t>> {
        self.unary(Unary::Square)
    }
    pub fn scale(self, c: f64) -> TResult<Var<'t>> {
        self.unary(Unary::Scale(c))
    }
    pub fn add_scalar(self, c: f64) -> TResult<Var<'t>> {
        self.unary(Unary::AddScalar(c))
    }
    /// `max(x, lo)` elementwise; gradient is zero where the floor is active.
    pub fn clamp_min(self, lo: f64) -> TResult<Var<'t>> {
        self.unary(Unary::ClampMin(lo))
    }

    fn binary(self, other: Var<'t>, kind: Binary, op: &'static str) -> TResult<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (shape, ia, ib) = broadcast_index(op, a.shape(), b.shape())?;
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| match kind {
                Binary::Add => ad[i] + bd[j],
                Binary::Sub => ad[i] - bd[j],
                Binary::Mul => ad[i] * bd[j],
                Binary::Div => ad[i] / bd[j],
            })
            .collect();
        if matches!(kind, Binary::Div) && bd.iter().any(|&v| v == 0.0) {
            return Err(TensorError::domain("div", "division by zero"));
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.record(out, Op::Binary(kind, self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }
    pub fn sub(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }
    pub fn mul(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }
    pub fn div(self, other: Var<'t>) -> TResult<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    pub fn matmul(self, other: Var<'t>) -> TResult<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (n, k) = a.require_matrix("matmul")?;
        let (k2, m) = b.require_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let out = Tensor::new(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m))?;
        Ok(self.tape.record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> TResult<Rc<Tensor>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::shape(op, format!("axis {axis} out of range for {:?}", x.shape())));
        }
        Ok(x)
    }

    fn reduce(self, axis: Option<usize>, keepdim: bool, mean: bool) -> TResult<Var<'t>> {
        let op = if mean { "mean" } else { "sum" };
        let out = match axis {
            None => {
                let x = self.value();
                if x.is_empty() {
                    return Err(TensorError::shape(op, "empty tensor"));
                }
                let s: f64 = x.data().iter().sum();
                Tensor::scalar(if mean { s / x.len() as f64 } else { s })
            }
            Some(ax) => {
                let x = self.check_axis(op, ax)?;
                let (outer, len, inner) = axis_split(x.shape(), ax);
                if len == 0 {
                    return Err(TensorError::shape(op, "empty reduction axis"));
                }
                let xd = x.data();
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            data[o * inner + i] += xd[(o * len + l) * inner + i];
                        }
                    }
                }
                if mean {
                    data.iter_mut().for_each(|v| *v /= len as f64);
                }
                Tensor::new(reduced_shape(x.shape(), ax, keepdim), data)?
            }
        };
        let node = if mean { Op::Mean { src: self.id, axis } } else { Op::Sum { src: self.id, axis } };
        Ok(self.tape.record(out, node, &[self.id]))
    }

    pub fn sum(self) -> TResult<Var<'t>> {
        self.reduce(None, false, false)
    }
    pub fn mean(self) -> TResult<Var<'t>> {
        self.reduce(None, false, true)
    }
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> TResult<Var<'t>> {
        self.reduce(Some(axis), keepdim, false)
    }
    pub fn mean_axis(self, axis: usize, keepdim: bool) -> TResult<Var<'t>> {
        self.reduce(Some(axis), keepdim, true)
    }

    /// Population (divide-by-N) variance along `axis`.
    pub fn var_axis(self, axis: usize, keepdim: bool) -> TResult<Var<'t>> {
        let mu = self.mean_axis(axis, true)?;
        self.sub(mu)?.square()?.mean_axis(axis, keepdim)
    }

    /// Population standard deviation along `axis`. The variance is floored at
    /// 1e-30 before the root so constant channels keep a finite gradient.
    pub fn std_axis(self, axis: usize, keepdim: bool) -> TResult<Var<'t>> {
        self.var_axis(axis, keepdim)?.clamp_min(1e-30)?.sqrt()
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(self) -> TResult<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(TensorError::shape("softmax", "needs rank >= 1"));
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(out, Op::Softmax(self.id), &[self.id]))
    }

    /// L2 norm along the last axis; the last axis is dropped.
    pub fn l2_norm(self) -> TResult<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(TensorError::shape("l2_norm", "needs rank >= 1"));
        }
        let c = x.cols();
        let data: Vec<f64> = x.data().chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out = Tensor::new(x.shape()[..x.rank() - 1].to_vec(), data)?;
        Ok(self.tape.record(out, Op::L2Norm(self.id), &[self.id]))
    }

    /// `[n, d] x [m, d] -> [n, m]` matrix of squared Euclidean distances.
    pub fn pairwise_sq_dist(self, other: Var<'t>) -> TResult<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (n, d) = a.require_matrix("pairwise_sq_dist")?;
        let (m, d2) = b.require_matrix("pairwise_sq_dist")?;
        if d != d2 {
            return Err(TensorError::shape("pairwise_sq_dist", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.tape.record(out, Op::PairwiseSqDist(self.id, other.id), &[self.id, other.id]))
    }

    /// Picks matrix entries `(row, col)` into a vector.
    pub fn gather(self, idx: &[(usize, usize)]) -> TResult<Var<'t>> {
        let x = self.value();
        let (n, m) = x.require_matrix("gather")?;
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= n || j >= m {
                return Err(TensorError::shape("gather", format!("index ({i}, {j}) outside {n}x{m}")));
            }
            data.push(x.at(i, j));
        }
        let out = Tensor::vector(data);
        Ok(self.tape.record(out, Op::Gather(self.id, idx.to_vec()), &[self.id]))
    }

    pub fn select_rows(self, idx: &[usize]) -> TResult<Var<'t>> {
        let x = self.value();
        let (n, _) = x.require_matrix("select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::shape("select_rows", format!("row {bad} outside {n} rows")));
        }
        let out = x.select_rows(idx);
        Ok(self.tape.record(out, Op::SelectRows(self.id, idx.to_vec()), &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> TResult<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }
}

/// Stacks matrices with equal column counts along the row axis.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> TResult<Var<'t>> {
    let first = parts.first().ok_or_else(|| TensorError::shape("concat_rows", "no inputs"))?;
    let tape = first.tape;
    let cols = first.value().cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let v = p.value();
        let (r, c) = v.require_matrix("concat_rows")?;
        if c != cols {
            return Err(TensorError::shape("concat_rows", format!("column mismatch {c} vs {cols}")));
        }
        rows += r;
        data.extend_from_slice(v.data());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let out = Tensor::new(vec![rows, cols], data)?;
    Ok(tape.record(out, Op::ConcatRows(ids.clone()), &ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = tape.constant(Tensor::eye(3));
        let out = i.matmul(tape.constant(a.clone())).unwrap();
        assert_eq!(*out.value(), a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0; 3])).softmax().unwrap();
        for &v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn population_variance_of_pair() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 3.0])).var_axis(0, false).unwrap();
        assert_eq!(v.value().item(), 1.0);
    }

    #[test]
    fn derivative_of_square() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let c = tape.scalar(5.0);
        let y = c.scale(2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, -1.0]));
        assert!(matches!(x.ln(), Err(TensorError::Domain { .. })));
        assert!(matches!(x.sqrt(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(a.matmul(a), Err(TensorError::Shape { .. })));
        assert!(matches!(a.add(b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let y = x.relu().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shared_operand_accumulates() {
        // sum_ij |x_i - x_j|^2 has gradient 4 * sum_j (x_k - x_j) at row k.
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 5.0]));
        let d = x.pairwise_sq_dist(x).unwrap().sum().unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.wrt(x).data(), &[-8.0, -12.0, 8.0, 12.0]);
    }
}
