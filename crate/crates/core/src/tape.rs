//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation pushes one node holding its forward value; inputs always
//! precede their consumers, so a single reverse sweep visits each node once.
//! A tape serves exactly one loss evaluation: [`Tape::backward`] consumes it.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, EPS_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Transpose(Var),
    AddBias(Var, Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SelectRows { input: Var, rows: Vec<usize> },
    PairwiseSqDist(Var, Var),
    LogSumExpSelect { input: Var, entries: Vec<(usize, Vec<usize>)> },
    Pick { input: Var, entries: Vec<(usize, usize)> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise operations available through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Scale(f64),
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The leaf tensor with its `grad` populated, or `None` if `var` is not a
    /// grad-requiring leaf.
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(var.0).and_then(|t| t.as_ref())
    }

    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaf(var).and_then(|t| t.grad())
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::PairwiseSqDist(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a) => vec![a],
            Op::L2Normalize { input, .. }
            | Op::SelectRows { input, .. }
            | Op::LogSumExpSelect { input, .. }
            | Op::Pick { input, .. } => vec![input],
        }
    }

    /// Records a leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(tensor, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(a));
        self.push(value, Op::Transpose(a), "transpose")
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => self.relu(args[0]),
            Elementwise::Exp => self.exp(args[0]),
            Elementwise::Log => self.log(args[0]),
            Elementwise::Scale(c) => self.scale(args[0], c),
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.same_shape(y) {
            let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
            Tensor::new(x.shape().to_vec(), data)
        } else if y.is_scalar() {
            let s = y.data()[0];
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|p| f(*p, s)).collect())
        } else if x.is_scalar() {
            let s = x.data()[0];
            Tensor::new(y.shape().to_vec(), y.data().iter().map(|q| f(s, *q)).collect())
        } else {
            Err(Error::Dimension {
                op: name,
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |p, q| p + q)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |p, q| p - q)?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |p, q| p * q)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        self.push(value, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = tensor::relu(self.value(a));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect())?;
        self.push(value, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect())?;
        self.push(value, Op::Log(a), "log")
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_bias(self.value(x), self.value(bias))?;
        self.push(value, Op::AddBias(x, bias), "add_bias")
    }

    /// Unit-normalizes a vector, or each row of a matrix.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms = tensor::row_norms(x)?;
        let value = tensor::l2_normalize(x)?;
        self.push(value, Op::L2Normalize { input: a, norms }, "l2_normalize")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64);
        self.push(value, Op::Mean(a), "mean")
    }

    /// `[m × n] -> [m]`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, _) = x.dims2();
        let value = Tensor::vector((0..m).map(|i| x.row(i).iter().sum()).collect());
        self.push(value, Op::SumRows(a), "sum_rows")
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Contract(format!("row {r} out of range for {m} rows")));
            }
            data.extend_from_slice(x.row(r));
        }
        let value = Tensor::matrix(rows.len(), n, data)?;
        self.push(
            value,
            Op::SelectRows {
                input: a,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    /// `D[i][k] = ‖a_i − b_k‖²` for `a: [m × d]`, `b: [k × d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let ((m, d), (k, d2)) = (x.dims2(), y.dims2());
        if d != d2 {
            return Err(Error::Dimension {
                op: "pairwise_sq_dist",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(m * k);
        for i in 0..m {
            for j in 0..k {
                data.push(
                    x.row(i)
                        .iter()
                        .zip(y.row(j))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum(),
                );
            }
        }
        let value = Tensor::matrix(m, k, data)?;
        self.push(value, Op::PairwiseSqDist(a, b), "pairwise_sq_dist")
    }

    /// For each `(row, cols)` entry, `log Σ_{c ∈ cols} exp(x[row, c])`,
    /// computed with max-shift. Output is a vector with one value per entry.
    pub fn logsumexp_select(&mut self, a: Var, entries: Vec<(usize, Vec<usize>)>) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let mut out = Vec::with_capacity(entries.len());
        for (row, cols) in &entries {
            if *row >= m || cols.iter().any(|c| *c >= n) {
                return Err(Error::Contract("logsumexp_select index out of range".into()));
            }
            if cols.is_empty() {
                return Err(Error::Contract("logsumexp_select over an empty set".into()));
            }
            let r = x.row(*row);
            let max = cols.iter().map(|c| r[*c]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = cols.iter().map(|c| (r[*c] - max).exp()).sum();
            out.push(max + s.ln());
        }
        let value = Tensor::vector(out);
        self.push(value, Op::LogSumExpSelect { input: a, entries }, "logsumexp_select")
    }

    /// Gathers `x[row, col]` for each entry into a vector.
    pub fn pick(&mut self, a: Var, entries: Vec<(usize, usize)>) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let mut out = Vec::with_capacity(entries.len());
        for &(r, c) in &entries {
            if r >= m || c >= n {
                return Err(Error::Contract(format!("pick ({r}, {c}) out of range")));
            }
            out.push(x.get(r, c));
        }
        let value = Tensor::vector(out);
        self.push(value, Op::Pick { input: a, entries }, "pick")
    }

    /// Back-propagates from a scalar `loss` and returns the gradient of every
    /// grad-requiring leaf. Leaves the loss does not depend on get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        if loss.0 >= nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let leaves = nodes
            .into_iter()
            .zip(grads)
            .map(|(node, grad)| match node.op {
                Op::Leaf if node.requires_grad => {
                    let mut t = node.value;
                    let n = t.numel();
                    t.set_grad(grad.unwrap_or_else(|| vec![0.0; n]));
                    if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    Ok(Some(t))
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { leaves })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], var: Var, f: impl FnOnce(&mut [f64])) {
    let node = &nodes[var.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[var.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
    f(slot);
}

/// Gradient of a broadcasting binary op for one operand.
fn reduce_broadcast(target: &mut [f64], contrib: impl Iterator<Item = f64>) {
    if target.len() == 1 {
        target[0] += contrib.sum::<f64>();
    } else {
        for (t, c) in target.iter_mut().zip(contrib) {
            *t += c;
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let (_, n) = val(*b).dims2();
            let bt = tensor::transpose_kernel(val(*b).data(), k, n);
            let ga = tensor::matmul_kernel(g, &bt, m, n, k);
            accumulate(grads, nodes, *a, |t| t.iter_mut().zip(&ga).for_each(|(t, v)| *t += v));
            let at = tensor::transpose_kernel(val(*a).data(), m, k);
            let gb = tensor::matmul_kernel(&at, g, k, m, n);
            accumulate(grads, nodes, *b, |t| t.iter_mut().zip(&gb).for_each(|(t, v)| *t += v));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |t| reduce_broadcast(t, g.iter().copied()));
            accumulate(grads, nodes, *b, |t| reduce_broadcast(t, g.iter().copied()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |t| reduce_broadcast(t, g.iter().copied()));
            accumulate(grads, nodes, *b, |t| reduce_broadcast(t, g.iter().map(|v| -v)));
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let other = |o: &Tensor, i: usize| if o.is_scalar() { o.data()[0] } else { o.data()[i] };
            accumulate(grads, nodes, *a, |t| {
                reduce_broadcast(t, g.iter().enumerate().map(|(i, gv)| gv * other(y, i)))
            });
            accumulate(grads, nodes, *b, |t| {
                reduce_broadcast(t, g.iter().enumerate().map(|(i, gv)| gv * other(x, i)))
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |t| t.iter_mut().zip(g).for_each(|(t, v)| *t += v * c));
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, |t| {
                for ((t, gv), xv) in t.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *t += gv;
                    }
                }
            });
        }
        Op::Exp(a) => {
            let y = node.value.data();
            accumulate(grads, nodes, *a, |t| {
                t.iter_mut().zip(g).zip(y).for_each(|((t, gv), yv)| *t += gv * yv)
            });
        }
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, |t| {
                t.iter_mut().zip(g).zip(x).for_each(|((t, gv), xv)| *t += gv / xv)
            });
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2();
            let gt = tensor::transpose_kernel(g, n, m);
            accumulate(grads, nodes, *a, |t| t.iter_mut().zip(&gt).for_each(|(t, v)| *t += v));
        }
        Op::AddBias(x, b) => {
            let (m, n) = val(*x).dims2();
            accumulate(grads, nodes, *x, |t| t.iter_mut().zip(g).for_each(|(t, v)| *t += v));
            accumulate(grads, nodes, *b, |t| {
                for i in 0..m {
                    for j in 0..n {
                        t[j] += g[i * n + j];
                    }
                }
            });
        }
        Op::L2Normalize { input, norms } => {
            let x = val(*input);
            let (_, n) = x.dims2();
            accumulate(grads, nodes, *input, |t| {
                for (i, norm) in norms.iter().enumerate() {
                    let d = norm + EPS_NORM;
                    let xr = x.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let xg: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let coef = xg / (norm * d * d);
                    for j in 0..n {
                        t[i * n + j] += gr[j] / d - xr[j] * coef;
                    }
                }
            });
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |t| t.iter_mut().for_each(|t| *t += g[0]));
        }
        Op::Mean(a) => {
            let scale = g[0] / val(*a).numel() as f64;
            accumulate(grads, nodes, *a, |t| t.iter_mut().for_each(|t| *t += scale));
        }
        Op::SumRows(a) => {
            let (m, n) = val(*a).dims2();
            accumulate(grads, nodes, *a, |t| {
                for i in 0..m {
                    for j in 0..n {
                        t[i * n + j] += g[i];
                    }
                }
            });
        }
        Op::SelectRows { input, rows } => {
            let (_, n) = val(*input).dims2();
            accumulate(grads, nodes, *input, |t| {
                for (out_row, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        t[r * n + j] += g[out_row * n + j];
                    }
                }
            });
        }
        Op::PairwiseSqDist(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let ((m, d), (k, _)) = (x.dims2(), y.dims2());
            accumulate(grads, nodes, *a, |t| {
                for i in 0..m {
                    for j in 0..k {
                        let gij = 2.0 * g[i * k + j];
                        for c in 0..d {
                            t[i * d + c] += gij * (x.get(i, c) - y.get(j, c));
                        }
                    }
                }
            });
            accumulate(grads, nodes, *b, |t| {
                for i in 0..m {
                    for j in 0..k {
                        let gij = 2.0 * g[i * k + j];
                        for c in 0..d {
                            t[j * d + c] -= gij * (x.get(i, c) - y.get(j, c));
                        }
                    }
                }
            });
        }
        Op::LogSumExpSelect { input, entries } => {
            let x = val(*input);
            let (_, n) = x.dims2();
            let out = node.value.data();
            accumulate(grads, nodes, *input, |t| {
                for (e, (row, cols)) in entries.iter().enumerate() {
                    for &c in cols {
                        t[row * n + c] += g[e] * (x.get(*row, c) - out[e]).exp();
                    }
                }
            });
        }
        Op::Pick { input, entries } => {
            let (_, n) = val(*input).dims2();
            accumulate(grads, nodes, *input, |t| {
                for (e, &(r, c)) in entries.iter().enumerate() {
                    t[r * n + c] += g[e];
                }
            });
        }
    }
}
