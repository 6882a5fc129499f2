//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended in
//! evaluation order, so parents always precede children and a single reverse
//! sweep visits each node exactly once. Tapes are rebuilt for every forward
//! pass and never cached.
//!
//! Broadcasting is deliberately narrow: a binary op accepts two tensors of the
//! same shape, or a matrix `[m, n]` paired with a vector `[n]` that is repeated
//! across rows. Everything else is a dimension error.

mod tensor;

pub(crate) use tensor::gemm;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Neg,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Maps the upstream gradient of a custom node to one gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Concat(Vec<Var>, usize),
    MeanPool(Var),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// Right operand is a row vector repeated over the left operand's rows.
    Rhs(usize),
    /// Left operand is a row vector repeated over the right operand's rows.
    Lhs(usize),
}

fn broadcast_rule(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    match (a, b) {
        ([_, n], [m]) if n == m => Ok(Broadcast::Rhs(*n)),
        ([m], [_, n]) if n == m => Ok(Broadcast::Lhs(*n)),
        _ => Err(Error::Dimension(format!(
            "cannot broadcast {a:?} with {b:?}"
        ))),
    }
}

/// Sum the rows of a `[rows, n]` buffer into an `[n]` tensor.
fn reduce_rows(g: &[f64], n: usize) -> Tensor {
    let mut out = vec![0.0; n];
    for row in g.chunks(n) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::vector(out)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{what} produced a non-finite value"
            )));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dims differ: [{m}, {k}] x [{n}, {k2}]ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), 1, k as isize),
            0.0,
            (&mut out, n as isize, 1),
        );
        let out = Tensor::matrix(m, n, out)?;
        self.push(out, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let rule = broadcast_rule(av.shape(), bv.shape())?;
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let (shape, data) = match rule {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ),
            Broadcast::Rhs(n) => (
                av.shape().to_vec(),
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[i % n]))
                    .collect(),
            ),
            Broadcast::Lhs(n) => (
                bv.shape().to_vec(),
                bv.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(av.data()[i % n], y))
                    .collect(),
            ),
        };
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Binary(op, a, b), &[a, b], "binary op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        match op {
            UnaryOp::Log if xv.data().iter().any(|&v| v <= 0.0) => {
                return Err(Error::Domain("log of a non-positive value".into()))
            }
            UnaryOp::Sqrt if xv.data().iter().any(|&v| v <= 0.0) => {
                return Err(Error::Domain("sqrt of a non-positive value".into()))
            }
            _ => {}
        }
        let out = xv.map(|v| match op {
            UnaryOp::Relu => v.max(0.0),
            UnaryOp::Tanh => v.tanh(),
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
            UnaryOp::Sqrt => v.sqrt(),
            UnaryOp::Neg => -v,
            UnaryOp::Softplus => softplus(v),
        });
        self.push(out, Op::Unary(op, x), &[x], "unary op")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi), &[x], "clamp")
    }

    /// Row-wise softmax with the row maximum subtracted before exponentiation.
    /// A vector is treated as a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.cols() == 0 {
            return Err(Error::Dimension("softmax over an empty axis".into()));
        }
        if !xv.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let n = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(out, Op::SoftmaxRows(x), &[x], "softmax")
    }

    /// Concatenate along `axis`. All parts share rank and every other extent.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let rank = self.value(*first).rank();
        if rank == 0 || axis >= rank {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != rank {
                return Err(Error::Dimension("concat of mixed ranks".into()));
            }
            for (d, (&x, &y)) in s.iter().zip(self.value(*first).shape()).enumerate() {
                if d != axis && x != y {
                    return Err(Error::Dimension(format!(
                        "concat extents differ on axis {d}: {x} vs {y}"
                    )));
                }
            }
        }
        let (shape, data) = if rank == 1 || axis == 0 {
            let mut shape = self.value(*first).shape().to_vec();
            shape[0] = parts.iter().map(|p| self.value(*p).shape()[0]).sum();
            let data = parts
                .iter()
                .flat_map(|p| self.value(*p).data().iter().copied())
                .collect();
            (shape, data)
        } else {
            let rows = self.value(*first).shape()[0];
            let cols: usize = parts.iter().map(|p| self.value(*p).shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
            (vec![rows, cols], data)
        };
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec(), axis), parts, "concat")
    }

    /// Mean over the leading (token) axis: `[n, d] -> [d]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "mean_pool")?;
        if n == 0 {
            return Err(Error::Dimension("mean_pool over zero tokens".into()));
        }
        let mut out = reduce_rows(self.value(x).data(), d);
        for v in out.data_mut() {
            *v /= n as f64;
        }
        self.push(out, Op::MeanPool(x), &[x], "mean_pool")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} exceeds width {n}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        self.push(out, Op::SliceCols(x, start), &[x], "slice_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x], "sum")
    }

    /// Node with a caller-supplied value and vector-Jacobian product.
    ///
    /// `backward` receives the upstream gradient (shaped like `value`) and
    /// must return one gradient per parent, shaped like that parent.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(
            value,
            Op::Custom(parents.to_vec(), backward),
            parents,
            "custom op",
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        (g.data(), n as isize, 1),
                        (bv.data(), 1, n as isize),
                        0.0,
                        (&mut da, k as isize, 1),
                    );
                    res.push((*a, Tensor::matrix(m, k, da)?));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        (av.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        0.0,
                        (&mut db, n as isize, 1),
                    );
                    res.push((*b, Tensor::matrix(k, n, db)?));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if self.wants(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        (g.data(), n as isize, 1),
                        (bv.data(), k as isize, 1),
                        0.0,
                        (&mut da, k as isize, 1),
                    );
                    res.push((*a, Tensor::matrix(m, k, da)?));
                }
                if self.wants(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        (g.data(), 1, n as isize),
                        (av.data(), k as isize, 1),
                        0.0,
                        (&mut db, k as isize, 1),
                    );
                    res.push((*b, Tensor::matrix(n, k, db)?));
                }
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let rule = broadcast_rule(av.shape(), bv.shape())?;
                let n = g.len();
                let ai = |i: usize| match rule {
                    Broadcast::Lhs(w) => i % w,
                    _ => i,
                };
                let bi = |i: usize| match rule {
                    Broadcast::Rhs(w) => i % w,
                    _ => i,
                };
                let gd = g.data();
                let (ad, bd) = (av.data(), bv.data());
                let ga: Vec<f64> = (0..n)
                    .map(|i| match op {
                        BinaryOp::Add | BinaryOp::Sub => gd[i],
                        BinaryOp::Mul => gd[i] * bd[bi(i)],
                        BinaryOp::Div => gd[i] / bd[bi(i)],
                    })
                    .collect();
                let gb: Vec<f64> = (0..n)
                    .map(|i| match op {
                        BinaryOp::Add => gd[i],
                        BinaryOp::Sub => -gd[i],
                        BinaryOp::Mul => gd[i] * ad[ai(i)],
                        BinaryOp::Div => -gd[i] * ad[ai(i)] / (bd[bi(i)] * bd[bi(i)]),
                    })
                    .collect();
                let shape = out.shape().to_vec();
                let (ga, gb) = match rule {
                    Broadcast::Same => (Tensor::new(shape.clone(), ga)?, Tensor::new(shape, gb)?),
                    Broadcast::Rhs(w) => (Tensor::new(shape, ga)?, reduce_rows(&gb, w)),
                    Broadcast::Lhs(w) => (reduce_rows(&ga, w), Tensor::new(shape, gb)?),
                };
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::Unary(op, x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| match op {
                        UnaryOp::Relu => {
                            if x > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Tanh => g * (1.0 - y * y),
                        UnaryOp::Exp => g * y,
                        UnaryOp::Log => g / x,
                        UnaryOp::Sqrt => g / (2.0 * y),
                        UnaryOp::Neg => -g,
                        UnaryOp::Softplus => g * sigmoid(x),
                    })
                    .collect();
                res.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Scale(x, c) => res.push((*x, g.map(|v| v * c))),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                res.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    data.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                res.push((*x, Tensor::new(out.shape().to_vec(), data)?));
            }
            Op::Concat(parts, axis) => {
                if out.rank() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let len = pv.len();
                        let slice = g.data()[offset..offset + len].to_vec();
                        res.push((*p, Tensor::new(pv.shape().to_vec(), slice)?));
                        offset += len;
                    }
                } else {
                    let rows = out.shape()[0];
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.shape()[1];
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        res.push((*p, Tensor::matrix(rows, w, data)?));
                        offset += w;
                    }
                }
            }
            Op::MeanPool(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    data.extend(g.data().iter().map(|v| v / n as f64));
                }
                res.push((*x, Tensor::matrix(n, d, data)?));
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let len = out.shape()[1];
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    data[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                }
                res.push((*x, Tensor::matrix(m, n, data)?));
            }
            Op::Reshape(x) => {
                res.push((*x, g.reshape(self.value(*x).shape())?));
            }
            Op::Sum(x) => {
                let gv = g.item()?;
                res.push((*x, Tensor::full(self.value(*x).shape(), gv)));
            }
            Op::Custom(parents, backward) => {
                let pgs = backward(g);
                if pgs.len() != parents.len() {
                    return Err(Error::Contract(format!(
                        "custom backward returned {} gradients for {} parents",
                        pgs.len(),
                        parents.len()
                    )));
                }
                for (p, pg) in parents.iter().zip(pgs) {
                    if pg.shape() != self.value(*p).shape() {
                        return Err(Error::Contract(format!(
                            "custom backward gradient shape {:?} != parent shape {:?}",
                            pg.shape(),
                            self.value(*p).shape()
                        )));
                    }
                    res.push((*p, pg));
                }
            }
        }
        Ok(res)
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` is disconnected from the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]).unwrap();
        let i = t.constant(Tensor::identity(2));
        let xv = t.constant(x.clone());
        let y = t.matmul(i, xv).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_limits() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.7; 4], vec![0.0, 800.0, 0.0, 0.0]]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for &p in v.row(0) {
            assert_relative_eq!(p, 0.25, epsilon = 1e-15);
        }
        assert_relative_eq!(v.row(1)[1], 1.0, epsilon = 1e-15);
        assert!(v.row(1)[0] < 1e-300);
    }

    #[test]
    fn unary_values_and_domains() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0]);
        let s = t.softplus(x).unwrap();
        assert_relative_eq!(
            t.value(s).data()[1],
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
        assert!(matches!(t.sqrt(x), Err(Error::Domain(_))));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }

    #[test]
    fn concat_vectors_and_split_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::vector(vec![3.0]));
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(&t, a).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(&t, b).data(), &[1.0]);
    }

    #[test]
    fn concat_axis_out_of_range() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0]));
        assert!(matches!(t.concat(&[a, a], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_pool_cases() {
        let mut t = Tape::new();
        let one = t.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let p = t.mean_pool(one).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0]);
        let two = t.constant(Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap());
        let p = t.mean_pool(two).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 1.0]);
        let empty = t.constant(Tensor::zeros(&[0, 3]));
        assert!(t.mean_pool(empty).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x).item().unwrap(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x  => dy/dx = 2x + 3
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0).unwrap();
        let y = t.add(sq, lin).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x).item().unwrap(), 7.0);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let unused = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.exp(x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&t, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let m = t.param(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let v = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let s = t.add(m, v).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        assert!(t.add(m, w).is_err());
        let total = t.sum(s).unwrap();
        let g = t.backward(total).unwrap();
        assert_eq!(g.wrt(&t, v).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_values_are_faults() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(x), Err(Error::Numeric(_))));
    }
}
