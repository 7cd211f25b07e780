//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so node indices
//! are already a topological order. [`Tape::backward`] walks the nodes once in
//! reverse and accumulates vector-Jacobian products into the parents. Only
//! nodes that transitively depend on a `requires_grad` leaf take part, and
//! only those leaves appear in the returned [`Gradients`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_raw, Tensor};

/// Rows with a Euclidean norm at or below this are rejected by
/// [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    /// Saved row norms of the input.
    NormalizeRows(Var, Vec<f64>),
    LogSumExpRows(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the `requires_grad` leaves it
/// depends on.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
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

    /// Records a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "{what} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::matrix(m, n, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `a - b`, recorded as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims(a, "l2_normalize_rows")?;
        let t = self.value(a);
        let norms = t.row_norms();
        if let Some(i) = norms.iter().position(|&n| n <= NORM_EPS) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {} (<= {NORM_EPS})",
                norms[i]
            )));
        }
        let mut data = Vec::with_capacity(m * d);
        for (i, n) in norms.iter().enumerate() {
            data.extend(t.row(i).iter().map(|x| x / n));
        }
        let out = Tensor::matrix(m, d, data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::NormalizeRows(a, norms), ng))
    }

    /// Row-wise `max + ln Σ exp(x − max)`; output has shape `[m]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.matrix_dims(a, "logsumexp_rows")?;
        let t = self.value(a);
        let data = (0..m).map(|i| logsumexp(t.row(i))).collect();
        let out = Tensor::vector(data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::LogSumExpRows(a), ng))
    }

    /// Row sums; output has shape `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.matrix_dims(a, "sum_rows")?;
        let t = self.value(a);
        let data = (0..m).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::vector(data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SumRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let out = Tensor::scalar(s)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptyBatch);
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let out = Tensor::scalar(s)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Mean(a), ng))
    }

    /// Full inner product `Σ a ∘ b`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Gradients of `root` with respect to every `requires_grad` leaf.
    ///
    /// `root` must be a single-element tensor and the last node recorded.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if root.0 + 1 != self.nodes.len() {
            return Err(Error::Contract(format!(
                "backward root {} is not the final tape node ({})",
                root.0,
                self.nodes.len() - 1
            )));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g).map_err(|_| {
                    Error::NonFinite(format!("gradient of leaf {i} is not finite"))
                })?;
                out.grads.insert(Var(i), t);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        Ok(out)
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    // dA = dC · Bᵀ
                    let bt = tb.transpose();
                    self.accumulate(adj, *a, matmul_raw(g, bt.data(), m, n, k));
                }
                if self.ng(*b) {
                    // dB = Aᵀ · dC
                    let at = ta.transpose();
                    self.accumulate(adj, *b, matmul_raw(at.data(), g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let gt = Tensor::from_parts_unchecked(vec![r, c], g.to_vec()).transpose();
                self.accumulate(adj, *a, gt.into_data());
            }
            Op::Reshape(a) => self.accumulate(adj, *a, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    self.accumulate(adj, *a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.iter().map(|g| c * g).collect()),
            Op::Tanh(a) => {
                let d = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(adj, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(adj, *a, d);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(adj, *a, d);
            }
            Op::NormalizeRows(a, norms) => {
                // dx = (dy − y·(y·dy)) / ‖x‖ per row
                let d = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (i, n) in norms.iter().enumerate() {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                self.accumulate(adj, *a, dx);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let n = x.cols();
                let mut dx = vec![0.0; x.numel()];
                for (i, gi) in g.iter().enumerate() {
                    for (j, xv) in x.row(i).iter().enumerate() {
                        dx[i * n + j] = gi * (xv - y[i]).exp();
                    }
                }
                self.accumulate(adj, *a, dx);
            }
            Op::SumRows(a) => {
                let n = self.value(*a).cols();
                let dx = g
                    .iter()
                    .flat_map(|gi| std::iter::repeat_n(*gi, n))
                    .collect();
                self.accumulate(adj, *a, dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, vec![g[0] / n as f64; n]);
            }
        }
    }
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
