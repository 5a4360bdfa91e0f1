//! Dense row-major `f64` tensors, a reverse-mode tape over them, and a
//! central-difference gradient checker.
//!
//! The tape ([`Graph`]) is append-only: every operation pushes a node whose
//! inputs have strictly smaller indices, so a reverse sweep over the node list
//! is a valid topological order. Leaf gradients accumulate across calls to
//! [`Graph::backward`] until [`Graph::zero_grad`] is called.

use crate::error::{Error, Result};

/// Epsilon added to each vector norm inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data, grad: None, requires_grad: false }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { shape: vec![rows, cols], data, grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Dimension(format!(
                    "gradient of length {} for tensor of shape {:?}",
                    g.len(),
                    self.shape
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Row count of a 2-D tensor (a 1-D tensor is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Elementwise image under `f`, same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!("{op} expects a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_bt")?;
    let (n, k2) = b.dims2("matmul_bt")?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
    }
    let mut out = vec![0.0; m * n];
    matmul_bt_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

// Accumulation runs over the inner index in ascending order, so results are
// bit-identical to the textbook triple loop.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = a.data.clone();
    if cols > 0 {
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    Tensor { shape: a.shape.clone(), data: out, grad: None, requires_grad: false }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity with [`COSINE_EPS`] added to each norm.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v) / ((norm(u) + COSINE_EPS) * (norm(v) + COSINE_EPS))
}

/// Mean cosine similarity over all unordered pairs of rows. `None` for fewer than two rows.
pub fn mean_pairwise_cosine(rows: &[&[f64]]) -> Option<f64> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += cosine(rows[i], rows[j]);
        }
    }
    Some(2.0 * s / (n * (n - 1)) as f64)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather(Var, Vec<usize>),
    Reshape(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Cosine(Var, Var),
    MeanPairwiseCosine(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

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

    /// Records a leaf; it collects gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let grad = t.grad.take();
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy of a leaf's value with its accumulated gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        t.requires_grad = node.requires_grad;
        t.grad = node.grad.clone();
        t
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let cols = x.cols();
        if b.len() != cols {
            return Err(Error::Dimension(format!(
                "add_row: bias of length {} for rows of length {cols}",
                b.len()
            )));
        }
        let mut data = x.data.clone();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                for (v, bv) in row.iter_mut().zip(&b.data) {
                    *v += bv;
                }
            }
        }
        let out = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|v| v * c).collect();
        let out = Tensor { shape: x.shape.clone(), data, grad: None, requires_grad: false };
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Element-wise product with a fixed (non-differentiable) array, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if c.len() != x.len() {
            return Err(Error::Dimension(format!("mul_const: {} vs {}", c.len(), x.len())));
        }
        let data = x.data.iter().zip(&c).map(|(p, q)| p * q).collect();
        let out = Tensor { shape: x.shape.clone(), data, grad: None, requires_grad: false };
        Ok(self.push(out, Op::MulConst(a, c), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data.clone();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                log_softmax_in_place(row);
            }
        }
        let out = Tensor { shape: x.shape.clone(), data, grad: None, requires_grad: false };
        self.push(out, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| gelu(v)).collect();
        let out = Tensor { shape: x.shape.clone(), data, grad: None, requires_grad: false };
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Dimension("layer_norm: gain/bias length must equal row length".into()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * is;
            }
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut data = vec![0.0; xhat.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = xhat[r * cols + c] * g[c] + b[c];
            }
        }
        let out = Tensor::new(xv.shape.clone(), data)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// `out[k] = src[indices[k]]` over the flattened source, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(src);
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(Error::Dimension(format!(
                "gather: {} indices for output shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Dimension(format!("gather: index {bad} out of range {}", x.len())));
        }
        let data = indices.iter().map(|&i| x.data[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather(src, indices), &[src]))
    }

    /// Gathers whole rows of a matrix.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(src, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("gather_rows: row {bad} out of range {r}")));
        }
        let idx = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.gather(src, idx, &[rows.len(), c])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(shape.to_vec(), x.data.clone())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension(format!("slice_cols {start}+{len} of {c} columns")));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        Ok(self.push(out, Op::SliceCols { src: a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of nothing".into()));
        }
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks inputs as rows; each input is flattened to one or more rows of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(Error::Dimension(format!("concat_rows: {} columns vs {cols}", x.cols())));
            }
            rows += x.rows();
            data.extend_from_slice(&x.data);
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Cosine similarity of two equal-length tensors viewed as flat vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).len() != self.value(v).len() {
            return Err(Error::Dimension("cosine: length mismatch".into()));
        }
        let c = cosine(&self.value(u).data, &self.value(v).data);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v), &[u, v]))
    }

    /// Mean cosine over all unordered pairs of rows of a matrix with at least two rows.
    pub fn mean_pairwise_cosine(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.dims2(x, "mean_pairwise_cosine")?;
        if n < 2 {
            return Err(Error::Contract("mean_pairwise_cosine needs at least two rows".into()));
        }
        let xv = self.value(x);
        let rows: Vec<&[f64]> = (0..n).map(|i| xv.row(i)).collect();
        let c = mean_pairwise_cosine(&rows).expect("n >= 2");
        Ok(self.push(Tensor::scalar(c), Op::MeanPairwiseCosine(x), &[x]))
    }

    /// Back-propagates from a scalar node, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                acc(*a, &mut |da| matmul_bt_into(g, &bv.data, da, m, n, k));
                acc(*b, &mut |db| matmul_at_into(&av.data, g, db, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[0];
                acc(*a, &mut |da| matmul_into(g, &bv.data, da, m, n, k));
                acc(*b, &mut |db| matmul_at_into(g, &av.data, db, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |da| add_into(da, g));
                let cols = out.cols();
                acc(*bias, &mut |db| {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)),
            Op::MulConst(a, c) => acc(*a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * c[i];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                acc(*a, &mut |da| {
                    for ((d, y), gr) in da.chunks_mut(cols).zip(out.data.chunks(cols)).zip(g.chunks(cols)) {
                        let s = dot(y, gr);
                        for k in 0..cols {
                            d[k] += y[k] * (gr[k] - s);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let cols = out.cols();
                acc(*a, &mut |da| {
                    for ((d, y), gr) in da.chunks_mut(cols).zip(out.data.chunks(cols)).zip(g.chunks(cols)) {
                        let s: f64 = gr.iter().sum();
                        for k in 0..cols {
                            d[k] += gr[k] - y[k].exp() * s;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value.data;
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let cols = out.cols();
                let gv = &nodes[gain.0].value.data;
                acc(*gain, &mut |dg| {
                    for (xr, gr) in xhat.chunks(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * xr[c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for gr in g.chunks(cols) {
                        add_into(db, gr);
                    }
                });
                acc(*x, &mut |dx| {
                    let n = cols as f64;
                    for (r, ((dr, xr), gr)) in
                        dx.chunks_mut(cols).zip(xhat.chunks(cols)).zip(g.chunks(cols)).enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            s1 += dxh;
                            s2 += dxh * xr[c];
                        }
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            dr[c] += inv_std[r] / n * (n * dxh - s1 - xr[c] * s2);
                        }
                    }
                });
            }
            Op::Gather(src, indices) => acc(*src, &mut |ds| {
                for (k, &i) in indices.iter().enumerate() {
                    ds[i] += g[k];
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::SliceCols { src, start } => {
                let (r, len) = (out.shape[0], out.shape[1]);
                let c = nodes[src.0].value.shape[1];
                acc(*src, &mut |ds| {
                    for i in 0..r {
                        add_into(&mut ds[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.shape[0], out.shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape[1];
                    acc(*p, &mut |dp| {
                        for i in 0..r {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    acc(*p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Cosine(u, v) => {
                let (uv, vv) = (&nodes[u.0].value.data, &nodes[v.0].value.data);
                let (nu, nv) = (norm(uv), norm(vv));
                let (du_den, dv_den) = (nu + COSINE_EPS, nv + COSINE_EPS);
                let hu: Vec<f64> = uv.iter().map(|x| x / du_den).collect();
                let hv: Vec<f64> = vv.iter().map(|x| x / dv_den).collect();
                acc(*u, &mut |du| normalized_backward(du, uv, nu, &hv, g[0]));
                acc(*v, &mut |dv| normalized_backward(dv, vv, nv, &hu, g[0]));
            }
            Op::MeanPairwiseCosine(x) => {
                let xv = &nodes[x.0].value;
                let (n, d) = (xv.shape[0], xv.shape[1]);
                let scale = g[0] * 2.0 / (n * (n - 1)) as f64;
                let norms: Vec<f64> = (0..n).map(|i| norm(xv.row(i))).collect();
                let mut total = vec![0.0; d];
                let mut unit = vec![0.0; n * d];
                for i in 0..n {
                    for c in 0..d {
                        let u = xv.data[i * d + c] / (norms[i] + COSINE_EPS);
                        unit[i * d + c] = u;
                        total[c] += u;
                    }
                }
                acc(*x, &mut |dx| {
                    let mut others = vec![0.0; d];
                    for i in 0..n {
                        for c in 0..d {
                            others[c] = total[c] - unit[i * d + c];
                        }
                        normalized_backward(&mut dx[i * d..(i + 1) * d], xv.row(i), norms[i], &others, scale);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

// Chain rule through x ↦ x / (‖x‖ + eps) for an upstream gradient `w · upstream`
// with respect to the normalized vector.
fn normalized_backward(dx: &mut [f64], x: &[f64], r: f64, w: &[f64], upstream: f64) {
    let den = r + COSINE_EPS;
    let xw = dot(x, w);
    let radial = if r > 0.0 { xw / (r * den * den) } else { 0.0 };
    for c in 0..dx.len() {
        dx[c] += upstream * (w[c] / den - x[c] * radial);
    }
}

/// Central-difference gradient check of a scalar function built on a [`Graph`].
///
/// Returns the largest relative error
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-10)` over all coordinates.
pub fn grad_check_fd<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_fd_multi(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check_fd`] over several input tensors at once.
pub fn grad_check_fd_multi<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = xs[t].data[i];
            probe[t].data[i] = orig + h;
            let plus = eval(&probe)?;
            probe[t].data[i] = orig - h;
            let minus = eval(&probe)?;
            probe[t].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-10);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
