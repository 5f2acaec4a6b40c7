//! Dense f64 tensors and a reverse-mode tape.
//!
//! Every primitive appends one node to a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients into every node that requires them.
//! Primitives never alias: each returns a fresh tensor. Most primitives work on
//! rank-2 matrices (`[rows, cols]`); vectors of length `n` are treated as `[n]`.

use crate::rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: reduced axis is empty")]
    EmptyAxis { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidArgument(
                "from_rows: ragged rows".to_string(),
            ));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as a matrix (leading dims collapsed).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn matrix_dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one dropout application so its mask can be regenerated exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub site: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Gelu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications. Inputs of node `i` always have
/// indices below `i`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let mut value = value;
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a @ b`, or `a @ bᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = at.matrix_dims();
        let (br, bc) = bt.matrix_dims();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb || bt.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: at.shape.clone(),
                right: bt.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        if trans_b {
            let b_t = transpose(&bt.data, br, bc);
            gemm_nn(&at.data, &b_t, m, k, n, &mut out);
        } else {
            gemm_nn(&at.data, &bt.data, m, k, n, &mut out);
        }
        let mut shape = at.shape.clone();
        if shape.len() < 2 {
            shape = vec![1, n];
        } else {
            *shape.last_mut().unwrap() = n;
        }
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ`; used for `[out, in]` weight layouts.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape != bt.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: at.shape.clone(),
                right: bt.shape.clone(),
            });
        }
        let data = at.data.iter().zip(&bt.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape.clone(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Adds a vector of length `cols` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(bias));
        let cols = at.cols();
        if bt.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: at.shape.clone(),
                right: bt.shape.clone(),
            });
        }
        let mut data = at.data.clone();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(&bt.data) {
                *x += b;
            }
        }
        let value = Tensor::new(at.shape.clone(), data)?;
        self.push("add_row", value, Op::AddRow { a, bias }, &[a, bias])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(xt.shape.clone(), data)?;
        self.push("gelu", value, Op::Gelu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data.iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(xt.shape.clone(), data)?;
        self.push("tanh", value, Op::Tanh { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let cols = xt.cols();
        if cols == 0 || xt.is_empty() {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut data = xt.data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xt.shape.clone(), data)?;
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xt.cols();
        if cols == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if gt.len() != cols || bt.len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: xt.shape.clone(),
                right: if gt.len() != cols {
                    gt.shape.clone()
                } else {
                    bt.shape.clone()
                },
            });
        }
        let rows = xt.rows();
        let mut normalized = vec![0.0; xt.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xt.len()];
        for r in 0..rows {
            let row = &xt.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let n = (row[c] - mean) * inv;
                normalized[r * cols + c] = n;
                out[r * cols + c] = n * gt.data[c] + bt.data[c];
            }
        }
        let value = Tensor::new(xt.shape.clone(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.matrix_dims();
        if tt.shape.len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows: table must be rank 2, got {:?}",
                tt.shape
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(&tt.data[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Inverted dropout. Identity (no new node) when `train` is false or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout: rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let xt = self.value(x);
        let keep_scale = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..xt.len())
            .map(|i| {
                let u = rng::uniform(&[key.seed, key.step, key.site, i as u64]);
                if u < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = xt.data.iter().zip(&scale).map(|(v, s)| v * s).collect();
        let value = Tensor::new(xt.shape.clone(), data)?;
        self.push("dropout", value, Op::Dropout { x, scale }, &[x])
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, hidden]`. `key_mask[r]` is false
    /// for padded rows; those keys receive zero attention weight. Every
    /// sequence must have at least one unmasked key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        if qt.shape != kt.shape || qt.shape != vt.shape || qt.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: qt.shape.clone(),
                right: if qt.shape != kt.shape {
                    kt.shape.clone()
                } else {
                    vt.shape.clone()
                },
            });
        }
        let (rows, hidden) = qt.matrix_dims();
        if heads == 0 || hidden % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "attention: {rows}x{hidden} not divisible into {heads} heads of sequences of length {seq_len}"
            )));
        }
        if key_mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: qt.shape.clone(),
                right: vec![key_mask.len()],
            });
        }
        let batch = rows / seq_len;
        let d = hidden / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * hidden];
        let mut qh = vec![0.0; seq_len * d];
        let mut kh = vec![0.0; seq_len * d];
        let mut vh = vec![0.0; seq_len * d];
        for b in 0..batch {
            let mask = &key_mask[b * seq_len..(b + 1) * seq_len];
            if !mask.iter().any(|&m| m) {
                return Err(TensorError::InvalidArgument(format!(
                    "attention: sequence {b} has no unmasked keys"
                )));
            }
            for h in 0..heads {
                copy_head(&qt.data, b, h, seq_len, hidden, d, &mut qh);
                copy_head(&kt.data, b, h, seq_len, hidden, d, &mut kh);
                copy_head(&vt.data, b, h, seq_len, hidden, d, &mut vh);
                let p = &mut probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &qh[i * d..(i + 1) * d];
                    let prow = &mut p[i * seq_len..(i + 1) * seq_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq_len {
                        if mask[j] {
                            let s = dot(qi, &kh[j * d..(j + 1) * d]) * scale;
                            prow[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    let mut total = 0.0;
                    for j in 0..seq_len {
                        if mask[j] {
                            let e = (prow[j] - max).exp();
                            prow[j] = e;
                            total += e;
                        } else {
                            prow[j] = 0.0;
                        }
                    }
                    for pj in prow.iter_mut() {
                        *pj /= total;
                    }
                    let orow = &mut out[(b * seq_len + i) * hidden + h * d..][..d];
                    for j in 0..seq_len {
                        let pj = prow[j];
                        if pj != 0.0 {
                            axpy(pj, &vh[j * d..(j + 1) * d], orow);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, hidden], out)?;
        self.push(
            "attention",
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean cross-entropy of `logits` `[n, classes]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (n, c) = lt.matrix_dims();
        if c == 0 || n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "cross_entropy",
            });
        }
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lt.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let mut probs = lt.data.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor {
                    shape: n.value.shape.clone(),
                    data,
                    requires_grad: false,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = at.matrix_dims();
                let n = node.value.cols();
                if self.needs(*a) {
                    // dA = dC @ B (trans_b) or dC @ Bᵀ
                    let ga = accum(grads, *a, at.len());
                    if *trans_b {
                        gemm_nn(g, &bt.data, m, n, k, ga);
                    } else {
                        let b_t = transpose(&bt.data, k, n);
                        gemm_nn(g, &b_t, m, n, k, ga);
                    }
                }
                if self.needs(*b) {
                    let gb = accum(grads, *b, bt.len());
                    if *trans_b {
                        // dB[n, k] = dCᵀ @ A
                        gemm_tn(g, &at.data, m, n, k, gb);
                    } else {
                        // dB[k, n] = Aᵀ @ dC
                        gemm_tn(&at.data, g, m, k, n, gb);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let gv = accum(grads, *v, g.len());
                        for (x, y) in gv.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.needs(*a) {
                    let ga = accum(grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.needs(*bias) {
                    let cols = node.value.cols();
                    let gb = accum(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xt = self.value(*x);
                    let gx = accum(grads, *x, g.len());
                    for ((o, &v), &gy) in gx.iter_mut().zip(&xt.data).zip(g) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gy * d;
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let gx = accum(grads, *x, g.len());
                    for ((o, &y), &gy) in gx.iter_mut().zip(&node.value.data).zip(g) {
                        *o += gy * (1.0 - y * y);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let cols = node.value.cols();
                    let gx = accum(grads, *x, g.len());
                    for ((orow, yrow), grow) in gx
                        .chunks_mut(cols)
                        .zip(node.value.data.chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let s = dot(yrow, grow);
                        for c in 0..cols {
                            orow[c] += yrow[c] * (grow[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gt = self.value(*gain);
                if self.needs(*gain) {
                    let gg = accum(grads, *gain, cols);
                    for (nrow, grow) in normalized.chunks(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * nrow[c];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = accum(grads, *bias, cols);
                    for grow in g.chunks(cols) {
                        for c in 0..cols {
                            gb[c] += grow[c];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = accum(grads, *x, g.len());
                    let nf = cols as f64;
                    let mut dn = vec![0.0; cols];
                    for (r, (nrow, grow)) in normalized.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        for c in 0..cols {
                            dn[c] = grow[c] * gt.data[c];
                        }
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n = dot(&dn, nrow);
                        let orow = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            orow[c] += inv_std[r] / nf * (nf * dn[c] - sum_dn - nrow[c] * sum_dn_n);
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                if self.needs(*table) {
                    let tt = self.value(*table);
                    let cols = tt.cols();
                    let gt = accum(grads, *table, tt.len());
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut gt[i * cols..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if self.needs(*x) {
                    let gx = accum(grads, *x, g.len());
                    for ((o, s), gy) in gx.iter_mut().zip(scale).zip(g) {
                        *o += gy * s;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *seq_len, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let gl = accum(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let len = self.value(*x).len();
                    let gx = accum(grads, *x, len);
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (rows, hidden) = qt.matrix_dims();
        let batch = rows / seq_len;
        let d = hidden / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; rows * hidden];
        let mut dk = vec![0.0; rows * hidden];
        let mut dv = vec![0.0; rows * hidden];
        let mut qh = vec![0.0; seq_len * d];
        let mut kh = vec![0.0; seq_len * d];
        let mut vh = vec![0.0; seq_len * d];
        let mut gh = vec![0.0; seq_len * d];
        let mut dqh = vec![0.0; seq_len * d];
        let mut dkh = vec![0.0; seq_len * d];
        let mut dvh = vec![0.0; seq_len * d];
        let mut ds = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                copy_head(&qt.data, b, h, seq_len, hidden, d, &mut qh);
                copy_head(&kt.data, b, h, seq_len, hidden, d, &mut kh);
                copy_head(&vt.data, b, h, seq_len, hidden, d, &mut vh);
                copy_head(g, b, h, seq_len, hidden, d, &mut gh);
                dqh.iter_mut().for_each(|x| *x = 0.0);
                dkh.iter_mut().for_each(|x| *x = 0.0);
                dvh.iter_mut().for_each(|x| *x = 0.0);
                let p = &probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let prow = &p[i * seq_len..(i + 1) * seq_len];
                    let gi = &gh[i * d..(i + 1) * d];
                    let mut weighted = 0.0;
                    for j in 0..seq_len {
                        let pj = prow[j];
                        if pj != 0.0 {
                            axpy(pj, gi, &mut dvh[j * d..(j + 1) * d]);
                            let dp = dot(gi, &vh[j * d..(j + 1) * d]);
                            ds[j] = dp;
                            weighted += pj * dp;
                        } else {
                            ds[j] = 0.0;
                        }
                    }
                    for j in 0..seq_len {
                        let pj = prow[j];
                        if pj != 0.0 {
                            let s = pj * (ds[j] - weighted) * scale;
                            axpy(s, &kh[j * d..(j + 1) * d], &mut dqh[i * d..(i + 1) * d]);
                            axpy(s, &qh[i * d..(i + 1) * d], &mut dkh[j * d..(j + 1) * d]);
                        }
                    }
                }
                scatter_head(&dqh, b, h, seq_len, hidden, d, &mut dq);
                scatter_head(&dkh, b, h, seq_len, hidden, d, &mut dk);
                scatter_head(&dvh, b, h, seq_len, hidden, d, &mut dv);
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                let gv = accum(grads, var, grad.len());
                for (o, x) in gv.iter_mut().zip(&grad) {
                    *o += x;
                }
            }
        }
    }
}

/// Gradients of every tape node that participated in a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros of the node's shape if `v` did not participate.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    /// Moves the gradient out, leaving `None`.
    pub fn take(&mut self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn copy_head(src: &[f64], b: usize, h: usize, seq_len: usize, hidden: usize, d: usize, dst: &mut [f64]) {
    for i in 0..seq_len {
        let start = (b * seq_len + i) * hidden + h * d;
        dst[i * d..(i + 1) * d].copy_from_slice(&src[start..start + d]);
    }
}

fn scatter_head(src: &[f64], b: usize, h: usize, seq_len: usize, hidden: usize, d: usize, dst: &mut [f64]) {
    for i in 0..seq_len {
        let start = (b * seq_len + i) * hidden + h * d;
        for (o, x) in dst[start..start + d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
            *o += x;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `out[m, n] += a[m, k] @ b[k, n]`
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ @ b[m, n]`
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Central-difference gradient check.
///
/// `build` maps an input node to a scalar loss node on the same tape. Returns
/// the max over coordinates of `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_difference_check<F>(build: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(TensorError::InvalidArgument(format!(
            "finite_difference_check: epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let out = build(&mut tape, x)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: v.shape.clone(),
            });
        }
        Ok(v.data[0])
    };
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad(true));
    let loss = build(&mut tape, x)?;
    let analytic = tape.backward(loss)?.get(&tape, x);
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data[i] += epsilon;
        let mut minus = point.clone();
        minus.data[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let err = (analytic.data[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_cross_entropy_is_ln_c() {
        for label in 0..4 {
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::filled(&[1, 4], 0.7));
            let l = tape.cross_entropy(z, &[label]).unwrap();
            assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_one_two_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.leaf(Tensor::ones(&[3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let expected = [-1.2247, 0.0, 1.2247];
        for (v, e) in tape.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4, "{v} vs {e}");
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap().get(&tape, x);
        assert_eq!(g, Tensor::ones(&[2, 2]));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap().with_grad(true));
        let l = tape.cross_entropy(z, &[1]).unwrap();
        let g = tape.backward(l).unwrap().get(&tape, z);
        let p = tape.value(z).clone();
        let mut t2 = Tape::new();
        let zz = t2.leaf(p);
        let sm = t2.softmax(zz).unwrap();
        let probs = t2.value(sm).data().to_vec();
        for (j, (gj, pj)) in g.data().iter().zip(probs).enumerate() {
            let onehot = if j == 1 { 1.0 } else { 0.0 };
            assert!((gj - (pj - onehot)).abs() < 1e-14);
        }
    }

    #[test]
    fn absent_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]).with_grad(true));
        let unused = tape.leaf(Tensor::ones(&[3]).with_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap().get(&tape, unused);
        assert_eq!(g, Tensor::zeros(&[3]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]).with_grad(true));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[4, 4]));
        let key = DropoutKey { seed: 1, step: 2, site: 3 };
        let y = tape.dropout(x, 0.5, false, key).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_is_reproducible() {
        let key = DropoutKey { seed: 9, step: 4, site: 1 };
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::ones(&[8, 8]));
            let y = tape.dropout(x, 0.3, true, key).unwrap();
            tape.value(y).clone()
        };
        let a = run();
        assert_eq!(a, run());
        let zeros = a.data().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 5 && zeros < 40, "{zeros}");
    }

    #[test]
    fn linear_function_check_is_exact() {
        let w = Tensor::new(vec![1, 4], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
        let point = Tensor::new(vec![4, 1], vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let err = finite_difference_check(
            |tape, x| {
                let wv = tape.leaf(w.clone());
                let y = tape.matmul(wv, x)?;
                tape.sum(y)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constant_function_check_is_zero() {
        let point = Tensor::ones(&[3]);
        let err = finite_difference_check(
            |tape, _x| {
                let c = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
                tape.sum(c)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn check_rejects_non_scalar_function() {
        let point = Tensor::ones(&[1, 3]);
        let res = finite_difference_check(|tape, x| tape.softmax(x), &point, 1e-5);
        assert!(matches!(res, Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn attention_masks_padding_keys() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::filled(&[3, 2], 0.1));
        let k = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap());
        let v = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap());
        let out = tape.attention(q, k, v, 1, 3, &[true, true, false]).unwrap();
        for r in 0..3 {
            let row = tape.value(out).row(r);
            assert!(row[0] < 3.0 && row[1] < 4.0);
        }
    }
}
