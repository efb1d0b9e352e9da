//! Tape-based reverse-mode differentiation over dense row-major arrays.
//!
//! Every primitive records its inputs and whatever it needs for the backward
//! pass on a [`Tape`]; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients additively, so fan-out is handled for free.
//!
//! Tensors are treated as `[rows, cols]` matrices for the row-wise
//! primitives, where `cols` is the last extent and `rows` the product of the
//! others. A one-element tensor is a scalar regardless of its shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Extent of the last axis (1 for a 0-d tensor).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every extent but the last.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Affine(Var, f64),
    Map { x: Var, deriv: Vec<f64> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    SumLast(Var),
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Conv1d(Var, Var),
    Scan { a: Var, b: Var, c: Var, u: Var, states: Vec<f64> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Mask { x: Var, mask: Vec<f64> },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    StackRows(Vec<Var>),
    GatherRows { table: Var, idx: Vec<usize> },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) | MulScalar(a, b) | AddScalar(a, b) | MatMul(a, b)
            | MatMulBt(a, b) | Conv1d(a, b) => vec![*a, *b],
            Affine(x, _) | SumLast(x) | RowNorm(x) | Sum(x) | Mean(x) | MeanRows(x)
            | Reshape(x) => vec![*x],
            Map { x, .. } | Mask { x, .. } | SliceCols { x, .. } => vec![*x],
            Scan { a, b, c, u, .. } => vec![*a, *b, *c, *u],
            RmsNorm { x, gain, .. } => vec![*x, *gain],
            Concat(v) | StackRows(v) => v.clone(),
            GatherRows { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Inputs always precede outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`; detached or unreached nodes get zeros.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Drop every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: ta.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    /// `x[r, c] + b[c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::dim(format!("add_row: {:?} + {:?}", tx.shape, tb.shape)));
        }
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data[i % c])
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::AddRow(x, b)))
    }

    /// `x[r, c] * w[c]`.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let c = tx.cols();
        if tw.len() != c {
            return Err(Error::dim(format!("mul_row: {:?} * {:?}", tx.shape, tw.shape)));
        }
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tw.data[i % c])
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::MulRow(x, w)))
    }

    /// `x[r, c] * s[r]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let c = tx.cols();
        if ts.len() != tx.rows() {
            return Err(Error::dim(format!("mul_col: {:?} * {:?}", tx.shape, ts.shape)));
        }
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ts.data[i / c])
            .collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::MulCol(x, s)))
    }

    /// Multiply every element by a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::dim(format!("mul_scalar: scalar has shape {:?}", ts.shape)));
        }
        let k = ts.data[0];
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * k).collect(),
        };
        Ok(self.push(t, Op::MulScalar(x, s)))
    }

    /// Add a one-element tensor to every element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::dim(format!("add_scalar: scalar has shape {:?}", ts.shape)));
        }
        let k = ts.data[0];
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v + k).collect(),
        };
        Ok(self.push(t, Op::AddScalar(x, s)))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| scale * v + shift).collect(),
        };
        self.push(t, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.affine(x, k, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| f(v)).collect();
        let deriv = tx.data.iter().map(|&v| df(v)).collect();
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.push(t, Op::Map { x, deriv })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, |v| {
            let t = v.tanh();
            1.0 - t * t
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, |v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, silu, |v| {
            let s = sigmoid(v);
            s * (1.0 + v * (1.0 - s))
        })
    }

    pub fn cosh(&mut self, x: Var) -> Var {
        self.map(x, f64::cosh, f64::sinh)
    }

    pub fn sinh(&mut self, x: Var) -> Var {
        self.map(x, f64::sinh, f64::cosh)
    }

    /// `arcosh(max(x, 1))`; the clamped region has zero gradient.
    pub fn arcosh(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| v.max(1.0).acosh(),
            |v| if v > 1.0 { 1.0 / (v * v - 1.0).sqrt() } else { 0.0 },
        )
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, f64::sqrt, |v| if v > 0.0 { 0.5 / v.sqrt() } else { 0.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, |v| 2.0 * v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / v, |v| -1.0 / (v * v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, f64::exp)
    }

    /// `max(x, 0)`; the kink at 0 gets subgradient 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    /// Clamp into `[lo, hi]`: gradient 1 inside (bounds included), 0 outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(
            x,
            |v| v.clamp(lo, hi),
            |v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 },
        )
    }

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::dim(format!("matmul: {:?} x {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, &tb.data, &mut out, m, k, n);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(Error::dim(format!("matmul_bt: {:?} x {:?}ᵀ", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &tb.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(ar, br);
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(t, Op::MatMulBt(a, b)))
    }

    /// Sum over the last axis: `[r, c] -> [r]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let data: Vec<f64> = tx.data.chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let t = Tensor::vector(data);
        self.push(t, Op::SumLast(x))
    }

    /// L2 norm of each row: `[r, c] -> [r]`. Backward at a zero row is 0.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let data: Vec<f64> = tx.data.chunks(c.max(1)).map(|r| dot(r, r).sqrt()).collect();
        let t = Tensor::vector(data);
        self.push(t, Op::RowNorm(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data.iter().sum::<f64>() / tx.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over the leading axis: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if r == 0 {
            return Err(Error::dim("mean_rows over zero rows"));
        }
        let mut out = vec![0.0; c];
        for row in tx.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x)))
    }

    /// Per-channel causal convolution: `y[t, c] = Σ_j k[j, c] · x[t - j, c]`.
    pub fn conv1d_causal(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        if tx.shape.len() != 2 || tk.shape.len() != 2 || tx.shape[1] != tk.shape[1] {
            return Err(Error::dim(format!("conv1d: {:?} with kernel {:?}", tx.shape, tk.shape)));
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: conv1d_forward(&tx.data, &tk.data, tx.shape[0], tk.shape[0], tx.shape[1]),
        };
        Ok(self.push(t, Op::Conv1d(x, kernel)))
    }

    /// Selective scan `h_t = a_t h_{t-1} + B_t u_t`, `z_t = C_t · h_t`, run
    /// independently per channel of `u`.
    ///
    /// Shapes: `a [L]`, `b [L, N]`, `c [L, N]`, `u [L, P]` giving `[L, P]`.
    pub fn scan(&mut self, a: Var, b: Var, c: Var, u: Var) -> Result<Var> {
        let dims = scan_dims(self.value(a), self.value(b), self.value(c), self.value(u))?;
        let mut states = vec![0.0; dims.l * dims.p * dims.n];
        let z = scan_forward(
            &self.value(a).data,
            &self.value(b).data,
            &self.value(c).data,
            &self.value(u).data,
            dims,
            Some(&mut states),
        );
        let t = Tensor {
            shape: vec![dims.l, dims.p],
            data: z,
        };
        Ok(self.push(t, Op::Scan { a, b, c, u, states }))
    }

    /// `x / sqrt(mean(x²) + eps) · gain`, row-wise.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let c = tx.cols();
        if tg.len() != c {
            return Err(Error::dim(format!("rms_norm: {:?} with gain {:?}", tx.shape, tg.shape)));
        }
        let mut inv_rms = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data.chunks(c) {
            let r = 1.0 / (dot(row, row) / c as f64 + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(&tg.data).map(|(v, g)| v * r * g));
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Multiply by a fixed mask (dropout with the scaling folded in).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::dim("mask length"));
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(t, Op::Mask { x, mask }))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask(x, mask)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat: row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor {
            shape: vec![rows, total],
            data,
        };
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of a `[r, c]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start >= end || end > c {
            return Err(Error::dim(format!("slice_cols {start}..{end} of width {c}")));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&tx.data[r * c + start..r * c + end]);
        }
        let t = Tensor {
            shape: vec![rows, end - start],
            data,
        };
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    /// Stack equally sized tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).len();
        if parts.iter().any(|&p| self.value(p).len() != d) {
            return Err(Error::dim("stack_rows: lengths differ"));
        }
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor {
            shape: vec![parts.len(), d],
            data,
        };
        Ok(self.push(t, Op::StackRows(parts.to_vec())))
    }

    /// Rows `idx` of `table`, in order (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (r, c) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!("gather_rows: row {i} of {r}")));
            }
            data.extend_from_slice(&tt.data[i * c..(i + 1) * c]);
        }
        let t = Tensor {
            shape: vec![idx.len(), c],
            data,
        };
        Ok(self.push(t, Op::GatherRows { table, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean softmax cross-entropy over rows. `excluded[r * k + j]` removes
    /// column `j` of row `r` from the softmax.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        excluded: Option<&[bool]>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (r, k) = (tl.rows(), tl.cols());
        if targets.len() != r {
            return Err(Error::dim("cross_entropy: one target per row"));
        }
        let mut probs = vec![0.0; r * k];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &tl.data[i * k..(i + 1) * k];
            let live = |j: usize| excluded.is_none_or(|m| !m[i * k + j]);
            if targets[i] >= k || !live(targets[i]) {
                return Err(Error::Contract(format!("row {i} has no valid target")));
            }
            let mx = (0..k)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                if live(j) {
                    let e = (row[j] - mx).exp();
                    probs[i * k + j] = e;
                    z += e;
                }
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss += -(row[targets[i]] - mx - z.ln());
        }
        let t = Tensor::scalar(loss / r as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape.clone()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, nd)| if nd.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * tb.data[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ta.data[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / tb.data[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * ta.data[i] / (tb.data[i] * tb.data[i]);
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = val(*b).len();
                acc(*x, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % c] += gi;
                    }
                });
            }
            Op::MulRow(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let c = tw.len();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * tw.data[i % c];
                    }
                });
                acc(*w, &|s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % c] += gi * tx.data[i];
                    }
                });
            }
            Op::MulCol(x, sv) => {
                let (tx, ts) = (val(*x), val(*sv));
                let c = tx.cols();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ts.data[i / c];
                    }
                });
                acc(*sv, &|s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i / c] += gi * tx.data[i];
                    }
                });
            }
            Op::MulScalar(x, sv) => {
                let (tx, ts) = (val(*x), val(*sv));
                let k = ts.data[0];
                acc(*x, &|s| axpy(s, g, k));
                acc(*sv, &|s| s[0] += dot(g, &tx.data));
            }
            Op::AddScalar(x, sv) => {
                acc(*x, &|s| axpy(s, g, 1.0));
                acc(*sv, &|s| s[0] += g.iter().sum::<f64>());
            }
            Op::Affine(x, k) => acc(*x, &|s| axpy(s, g, *k)),
            Op::Map { x, deriv } => acc(*x, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * deriv[i];
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G · Bᵀ
                acc(*a, &|s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            s[i * k + p] += dot(gr, &tb.data[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &|s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av != 0.0 {
                                axpy(&mut s[p * n..(p + 1) * n], gr, av);
                            }
                        }
                    }
                });
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            axpy(&mut s[i * k..(i + 1) * k], &tb.data[j * k..(j + 1) * k], gij);
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            axpy(&mut s[j * k..(j + 1) * k], &ta.data[i * k..(i + 1) * k], gij);
                        }
                    }
                });
            }
            Op::SumLast(x) => {
                let c = val(*x).cols();
                acc(*x, &|s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[i / c];
                    }
                });
            }
            Op::RowNorm(x) => {
                let tx = val(*x);
                let c = tx.cols();
                let norms = &node.value.data;
                acc(*x, &|s| {
                    for r in 0..norms.len() {
                        if norms[r] > 0.0 {
                            let k = g[r] / norms[r];
                            axpy(&mut s[r * c..(r + 1) * c], &tx.data[r * c..(r + 1) * c], k);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|si| *si += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &|s| s.iter_mut().for_each(|si| *si += g[0] / n));
            }
            Op::MeanRows(x) => {
                let tx = val(*x);
                let (r, c) = (tx.rows(), tx.cols());
                acc(*x, &|s| {
                    for row in s.chunks_mut(c) {
                        axpy(row, g, 1.0 / r as f64);
                    }
                });
            }
            Op::Conv1d(x, kern) => {
                let (tx, tk) = (val(*x), val(*kern));
                let (l, c, kw) = (tx.shape[0], tx.shape[1], tk.shape[0]);
                acc(*x, &|s| {
                    for t in 0..l {
                        for j in 0..kw.min(t + 1) {
                            for ch in 0..c {
                                s[(t - j) * c + ch] += g[t * c + ch] * tk.data[j * c + ch];
                            }
                        }
                    }
                });
                acc(*kern, &|s| {
                    for t in 0..l {
                        for j in 0..kw.min(t + 1) {
                            for ch in 0..c {
                                s[j * c + ch] += g[t * c + ch] * tx.data[(t - j) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::Scan { a, b, c, u, states } => {
                let (ta, tb, tc, tu) = (val(*a), val(*b), val(*c), val(*u));
                let (l, n, p) = (tb.rows(), tb.cols(), tu.cols());
                let mut da = vec![0.0; l];
                let mut db = vec![0.0; l * n];
                let mut dc = vec![0.0; l * n];
                let mut du = vec![0.0; l * p];
                // dh carries dL/dh_t for every (channel, state) pair
                let mut dh = vec![0.0; p * n];
                for t in (0..l).rev() {
                    let bt = &tb.data[t * n..(t + 1) * n];
                    let ct = &tc.data[t * n..(t + 1) * n];
                    let ut = &tu.data[t * p..(t + 1) * p];
                    let ht = &states[t * p * n..(t + 1) * p * n];
                    for ch in 0..p {
                        let gz = g[t * p + ch];
                        let dhc = &mut dh[ch * n..(ch + 1) * n];
                        let hc = &ht[ch * n..(ch + 1) * n];
                        for s in 0..n {
                            dc[t * n + s] += gz * hc[s];
                            dhc[s] += gz * ct[s];
                        }
                        let mut du_acc = 0.0;
                        for s in 0..n {
                            db[t * n + s] += dhc[s] * ut[ch];
                            du_acc += dhc[s] * bt[s];
                        }
                        du[t * p + ch] += du_acc;
                        if t > 0 {
                            let hprev = &states[(t - 1) * p * n + ch * n..(t - 1) * p * n + (ch + 1) * n];
                            da[t] += dot(dhc, hprev);
                        }
                    }
                    // propagate to h_{t-1}
                    let at = ta.data[t];
                    dh.iter_mut().for_each(|v| *v *= at);
                }
                acc(*a, &|s| axpy(s, &da, 1.0));
                acc(*b, &|s| axpy(s, &db, 1.0));
                acc(*c, &|s| axpy(s, &dc, 1.0));
                acc(*u, &|s| axpy(s, &du, 1.0));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (val(*x), val(*gain));
                let c = tx.cols();
                acc(*x, &|s| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &tx.data[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let gw_x: f64 = (0..c).map(|i| gr[i] * tg.data[i] * xr[i]).sum();
                        let k = ir * ir * ir * gw_x / c as f64;
                        for i in 0..c {
                            s[r * c + i] += ir * gr[i] * tg.data[i] - k * xr[i];
                        }
                    }
                });
                acc(*gain, &|s| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for i in 0..c {
                            s[i] += g[r * c + i] * tx.data[r * c + i] * ir;
                        }
                    }
                });
            }
            Op::Mask { x, mask } => acc(*x, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            }),
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &part in parts {
                    let w = val(part).cols();
                    acc(part, &|s| {
                        for (r, row) in s.chunks_mut(w).enumerate() {
                            axpy(row, &g[r * total + off..r * total + off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                acc(*x, &|s| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        axpy(&mut s[r * c + start..r * c + start + w], gr, 1.0);
                    }
                });
            }
            Op::StackRows(parts) => {
                let d = node.value.cols();
                for (i, &part) in parts.iter().enumerate() {
                    acc(part, &|s| axpy(s, &g[i * d..(i + 1) * d], 1.0));
                }
            }
            Op::GatherRows { table, idx } => {
                let c = val(*table).cols();
                acc(*table, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut s[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| axpy(s, g, 1.0)),
            Op::CrossEntropy { logits, targets, probs } => {
                let k = val(*logits).cols();
                let r = targets.len();
                acc(*logits, &|s| {
                    let scale = g[0] / r as f64;
                    for i in 0..r {
                        for j in 0..k {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            s[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], x: &[f64], k: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(orow, &b[p * n..(p + 1) * n], av);
            }
        }
    }
}

pub(crate) fn conv1d_forward(x: &[f64], k: &[f64], l: usize, kw: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; l * c];
    for t in 0..l {
        for j in 0..kw.min(t + 1) {
            for ch in 0..c {
                y[t * c + ch] += k[j * c + ch] * x[(t - j) * c + ch];
            }
        }
    }
    y
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub l: usize,
    pub n: usize,
    pub p: usize,
}

pub(crate) fn scan_dims(a: &Tensor, b: &Tensor, c: &Tensor, u: &Tensor) -> Result<ScanDims> {
    let l = a.len();
    let n = b.cols();
    let ok = b.rows() == l && c.rows() == l && c.cols() == n && u.rows() == l;
    if !ok {
        return Err(Error::dim(format!(
            "scan: a {:?}, B {:?}, C {:?}, u {:?}",
            a.shape, b.shape, c.shape, u.shape
        )));
    }
    Ok(ScanDims { l, n, p: u.cols() })
}

/// Sequential scan kernel; optionally records every `h_t` (layout `[L, P, N]`).
pub(crate) fn scan_forward(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    u: &[f64],
    dims: ScanDims,
    mut states: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let ScanDims { l, n, p } = dims;
    let mut h = vec![0.0; p * n];
    let mut z = vec![0.0; l * p];
    for t in 0..l {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        for ch in 0..p {
            let hc = &mut h[ch * n..(ch + 1) * n];
            let uv = u[t * p + ch];
            for s in 0..n {
                hc[s] = a[t] * hc[s] + bt[s] * uv;
            }
            z[t * p + ch] = dot(ct, hc);
        }
        if let Some(st) = states.as_deref_mut() {
            st[t * p * n..(t + 1) * p * n].copy_from_slice(&h);
        }
    }
    z
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the tape gradient of `f` at `x` against central differences over
/// every coordinate. Error per coordinate is
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, step, &coords)
}

/// [`finite_difference_check`] restricted to the listed coordinates.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the base point".into()));
    }
    let grad = tape.backward(loss)?.get_or_zeros(xv);

    let eval = |xp: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(xp);
        let l = f(&mut t, v)?;
        let out = t.value(l).item();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite("objective at a perturbed point".into()))
        }
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data[i] += step;
        let mut minus = x.clone();
        minus.data[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let analytic = grad.data[i];
        let err = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        if err > report.max_rel_error || !err.is_finite() {
            report = FdReport {
                max_rel_error: err,
                worst_coord: i,
                analytic,
                numeric,
            };
        }
    }
    if !report.max_rel_error.is_finite() {
        return Err(Error::NonFinite("gradient comparison".into()));
    }
    Ok(report)
}
