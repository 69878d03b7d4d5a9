//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one node
//! holding its output [`Tensor`] and the ids of its inputs, so inputs always
//! precede the nodes that consume them. [`Graph::backward`] walks the tape once
//! in reverse and accumulates gradients into every node that requires them.
//!
//! Graphs are cheap and meant to be rebuilt for every forward pass. Model
//! weights live outside the graph; [`Graph::param`] copies a weight onto the
//! tape and [`Graph::grad`] reads its gradient back after the backward pass.
//!
//! Broadcasting is limited to the row-wise affine cases ([`Graph::add_row`],
//! the gain/bias of [`Graph::layer_norm`]).

mod optim;

pub use optim::AdamW;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "tensor extents must all be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Panics on an empty or zero-extent shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar shape is valid")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Zero-mean Gaussian entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self::new(shape, data).expect("randn: invalid shape")
    }

    /// Entries uniform on `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(shape, data).expect("uniform: invalid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// View as a matrix: leading axes are flattened into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rows `start..start+len` of a matrix as a new matrix.
    pub fn rows_slice(&self, start: usize, len: usize) -> Tensor {
        let (_, cols) = self.rows_cols();
        Tensor::matrix(len, cols, self.data[start * cols..(start + len) * cols].to_vec())
            .expect("row range within the matrix")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::new(shape, self.data.clone())?;
        out.requires_grad = self.requires_grad;
        Ok(out)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }

    /// Handle for the node at position `id` on its tape.
    pub fn from_id(id: usize) -> Self {
        Var(id)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        target: Vec<f64>,
        pred: Var,
    },
    BceWithLogits {
        logit: Var,
        target: f64,
    },
    SoftmaxCrossEntropy {
        target: Vec<f64>,
        logits: Var,
        temperature: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Rows {
        x: Var,
        start: usize,
    },
    Element {
        x: Var,
        index: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Rows { .. } => "rows",
            Op::Element { .. } => "element",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Rows { x, .. }
            | Op::Element { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { pred, .. } => vec![*pred],
            Op::BceWithLogits { logit, .. } => vec![*logit],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Tolerance for probability-vector validation in [`Graph::cross_entropy`].
pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Pushes a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        self.nodes.push(Node { op: Op::Leaf, value: t });
        Var(self.nodes.len() - 1)
    }

    /// Copies a trainable weight onto the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(true))
    }

    /// Copies a value onto the tape with gradients disabled.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Clears every accumulated gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> Var {
        value.requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].value.requires_grad);
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(x, "transpose")?;
        let out = transpose_raw(self.value(x).data(), r, c);
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(Op::Transpose(x), value))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        self.push(Op::Scale(x, c), value)
    }

    /// `x[r, :] + row` for every row of `x`; `row` holds exactly `cols(x)` values.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.value(row).len() != cols {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let v = self.value(x);
        let data = v
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(v.shape(), data)?;
        Ok(self.push(Op::AddRow(x, row), value))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| gelu(a)).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        self.push(Op::Gelu(x), value)
    }

    /// Row-wise `softmax(x / temperature)` over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = softmax_tensor(self.value(x), temperature)?;
        Ok(self.push(Op::Softmax { x, temperature }, value))
    }

    /// Row-wise normalisation over the last axis followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, d) = self.value(x).rows_cols();
        if self.value(gamma).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(beta)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    /// `-sum(target * ln(pred))` for probability vectors.
    ///
    /// `pred` must be strictly positive and both vectors must sum to one
    /// within [`PROBABILITY_TOLERANCE`]. The target is treated as a constant.
    pub fn cross_entropy(&mut self, target: &[f64], pred: Var) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() {
            return Err(Error::dim("cross_entropy", &[target.len()], self.shape(pred)));
        }
        validate_distribution(target, false, "target")?;
        validate_distribution(p, true, "prediction")?;
        let h = -target
            .iter()
            .zip(p)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, q)| t * q.ln())
            .sum::<f64>();
        Ok(self.push(
            Op::CrossEntropy {
                target: target.to_vec(),
                pred,
            },
            Tensor::scalar(h),
        ))
    }

    /// `-sum_i target_i * log softmax(logits / temperature)_i`, computed with
    /// log-sum-exp so it stays finite however peaked the prediction is.
    /// `logits` is a single row of the same length as `target`.
    pub fn softmax_cross_entropy(&mut self, target: &[f64], logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value(logits).data();
        if target.len() != x.len() {
            return Err(Error::dim("softmax_cross_entropy", &[target.len()], self.shape(logits)));
        }
        validate_distribution(target, false, "target")?;
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = x.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
        let h = -target
            .iter()
            .zip(x)
            .map(|(t, v)| t * ((v - max) / temperature - lse))
            .sum::<f64>();
        let probs = softmax_row(x, temperature);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                target: target.to_vec(),
                logits,
                temperature,
                probs,
            },
            Tensor::scalar(h),
        ))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        if self.value(logit).len() != 1 {
            return Err(Error::dim("bce_with_logits", self.shape(logit), &[1]));
        }
        let z = self.value(logit).item();
        let loss = z.max(0.0) - target * z + (-z.abs()).exp().ln_1p();
        Ok(self.push(Op::BceWithLogits { logit, target }, Tensor::scalar(loss)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Rows `start..start + len` of a matrix (leading axes flattened).
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if len == 0 || start + len > rows {
            return Err(Error::dim("rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(&[len, cols], data)?;
        Ok(self.push(Op::Rows { x, start }, value))
    }

    /// Single flat element as a `[1]` tensor.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::dim("element", v.shape(), &[index]));
        }
        let value = Tensor::scalar(v.data()[index]);
        Ok(self.push(Op::Element { x, index }, value))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_rows of zero tensors".into()))?;
        let (_, cols) = self.value(first).rows_cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.value(x).data().to_vec())
            .map_err(|_| Error::dim("reshape", self.shape(x), shape))?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Gradients are accumulated: running `backward` twice on the same tape
    /// without [`Graph::zero_grad`] doubles every stored gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rows_cols();
                let n = self.value(*b).rows_cols().1;
                if self.needs(*a) {
                    let ga = matmul_nt(g, self.value(*b).data(), m, n, k);
                    accumulate(adj, *a, ga);
                }
                if self.needs(*b) {
                    let gb = matmul_tn(self.value(*a).data(), g, m, k, n);
                    accumulate(adj, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).rows_cols();
                accumulate(adj, *x, transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    accumulate(adj, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => accumulate(adj, *x, g.iter().map(|v| v * c).collect()),
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
                if self.needs(*row) {
                    let cols = self.value(*row).len();
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    accumulate(adj, *row, gr);
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                accumulate(adj, *x, g.iter().zip(xs).map(|(g, &v)| g * gelu_grad(v)).collect());
            }
            Op::Softmax { x, temperature } => {
                let (_, cols) = out.rows_cols();
                let mut gx = vec![0.0; g.len()];
                for ((gx, gy), y) in gx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx[j] = y[j] * (gy[j] - dot) / temperature;
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = gy.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = is * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(adj, *x, gx);
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                    accumulate(adj, *gamma, gg);
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                    accumulate(adj, *beta, gb);
                }
            }
            Op::CrossEntropy { target, pred } => {
                let p = self.value(*pred).data();
                let gp = target.iter().zip(p).map(|(t, q)| -g[0] * t / q).collect();
                accumulate(adj, *pred, gp);
            }
            Op::SoftmaxCrossEntropy {
                target,
                logits,
                temperature,
                probs,
            } => {
                let mass: f64 = target.iter().sum();
                let gx = probs
                    .iter()
                    .zip(target)
                    .map(|(p, t)| g[0] * (mass * p - t) / temperature)
                    .collect();
                accumulate(adj, *logits, gx);
            }
            Op::BceWithLogits { logit, target } => {
                let z = self.value(*logit).item();
                accumulate(adj, *logit, vec![g[0] * (sigmoid(z) - target)]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(adj, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(adj, *x, vec![g[0] / n as f64; n]);
            }
            Op::Rows { x, start } => {
                let (_, cols) = out.rows_cols();
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                accumulate(adj, *x, gx);
            }
            Op::Element { x, index } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                gx[*index] = g[0];
                accumulate(adj, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.needs(*p) {
                        accumulate(adj, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => accumulate(adj, *x, g.to_vec()),
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn validate_distribution(p: &[f64], strictly_positive: bool, what: &str) -> Result<()> {
    let bad = p
        .iter()
        .any(|&v| !v.is_finite() || v < 0.0 || (strictly_positive && v <= 0.0));
    if bad {
        return Err(Error::Validation(format!(
            "{what} distribution has invalid entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::Validation(format!(
            "{what} distribution sums to {s}, not 1"
        )));
    }
    Ok(())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise tempered softmax with max subtraction, outside any graph.
pub fn softmax_tensor(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (_, cols) = x.rows_cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        out.extend(softmax_row(row, temperature));
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g (m x n) * b^T` where `b` is `k x n`.
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * g` where `a` is `m x k` and `g` is `m x n`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
