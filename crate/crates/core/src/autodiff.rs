//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node holding its forward value and enough context to run its backward
//! rule, and returns a lightweight [`Tensor`] handle. Because nodes can only
//! reference earlier nodes, arena order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! The graph is generic over the scalar type. Models run in `f32`; gradient
//! verification re-runs the very same model code in `f64` so that central
//! differences are not swamped by rounding noise.
//!
//! Broadcasting is deliberately narrow: in a binary op the right operand must
//! either match the left shape, be a trailing suffix of it, or hold a single
//! element.

use std::collections::HashMap;
use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a [`Graph`] can run on.
pub trait Real: Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;

    fn of32(x: f32) -> Self {
        Self::of(x as f64)
    }

    fn to32(self) -> f32;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn of32(x: f32) -> Self {
        x
    }

    fn to32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn to32(self) -> f32 {
        self as f32
    }
}

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Tags accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Tanh,
    Exp,
    Scale(f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryOp {
    Relu,
    Gelu,
    Tanh,
    Exp,
}

#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Binary(BinaryOp, Tensor, Tensor),
    Unary(UnaryOp, Tensor),
    Scale(Tensor, T),
    Softmax(Tensor, Axis),
    CausalSoftmax(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    SliceRows(Tensor, usize),
    SliceCols(Tensor, usize),
    GatherRows(Tensor, Vec<usize>),
    Reduce(Tensor, ReduceKind, Axis),
    Reshape(Tensor),
    CrossEntropy {
        logits: Tensor,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    named: HashMap<String, Tensor>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, row width) for the leading axis.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((r, rest)) => (*r, numel(rest)),
        None => (1, 1),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Axis {
    Axis {
        outer: numel(&shape[..axis]),
        len: shape[axis],
        inner: numel(&shape[axis + 1..]),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// g (m×n) · bᵀ where b is k×n, accumulated into da (m×k)
fn matmul_nt_acc<T: Real>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            da[i * k + p] += s;
        }
    }
}

// aᵀ (k×m) · g (m×n) accumulated into db (k×n)
fn matmul_tn_acc<T: Real>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            named: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, parents: &[Tensor]) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad: false,
            needs_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {} elements but {} values were given",
                numel(shape),
                values.len()
            )));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data: values,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    /// Leaf tensor that does not require a gradient.
    pub fn tensor(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    /// Leaf tensor whose gradient is kept after [`Graph::backward`].
    pub fn variable(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.leaf(shape, values, true)
    }

    /// Leaf from `f32` data, converted to the graph scalar type.
    pub fn tensor_f32(&mut self, shape: &[usize], values: &[f32], requires_grad: bool) -> Result<Tensor> {
        self.leaf(shape, values.iter().map(|&v| T::of32(v)).collect(), requires_grad)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        let n = numel(shape);
        self.leaf(shape, vec![T::zero(); n], false).expect("consistent shape")
    }

    pub fn scalar(&mut self, v: T) -> Tensor {
        self.leaf(&[1], vec![v], false).expect("consistent shape")
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: Tensor) -> &[T] {
        &self.nodes[t.0].data
    }

    pub fn data_f32(&self, t: Tensor) -> Vec<f32> {
        self.nodes[t.0].data.iter().map(|v| v.to32()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self, t: Tensor) -> T {
        self.nodes[t.0].data[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Registers a name for a tensor (used to bind parameters once per graph).
    pub fn insert_named(&mut self, name: impl Into<String>, t: Tensor) {
        self.named.insert(name.into(), t);
    }

    pub fn named(&self, name: &str) -> Option<Tensor> {
        self.named.get(name).copied()
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, Tensor)> {
        self.named.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient of a `requires_grad` leaf after [`Graph::backward`]. Leaves the
    /// loss does not reach report zeros.
    pub fn grad(&self, t: Tensor) -> Option<Vec<T>> {
        let node = &self.nodes[t.0];
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        Some(match self.grads.get(t.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![T::zero(); node.data.len()],
        })
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    /// Dispatches on an [`ElementwiseOp`] tag; binary tags require `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let need_b = |b: Option<Tensor>| b.ok_or_else(|| Error::Contract(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => self.binary(BinaryOp::Add, a, need_b(b)?),
            ElementwiseOp::Sub => self.binary(BinaryOp::Sub, a, need_b(b)?),
            ElementwiseOp::Mul => self.binary(BinaryOp::Mul, a, need_b(b)?),
            ElementwiseOp::Relu => Ok(self.unary(UnaryOp::Relu, a)),
            ElementwiseOp::Gelu => Ok(self.unary(UnaryOp::Gelu, a)),
            ElementwiseOp::Tanh => Ok(self.unary(UnaryOp::Tanh, a)),
            ElementwiseOp::Exp => Ok(self.unary(UnaryOp::Exp, a)),
            ElementwiseOp::Scale(s) => Ok(self.scale(a, T::of32(s))),
        }
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn scale(&mut self, a: Tensor, s: T) -> Tensor {
        let out = self.data(a).iter().map(|&v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, s), &[a])
    }

    fn broadcast_width(&self, a: Tensor, b: Tensor) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = numel(sb);
        if sa == sb || nb == 1 || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            Ok(nb)
        } else {
            Err(Error::Shape(format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(&mut self, op: BinaryOp, a: Tensor, b: Tensor) -> Result<Tensor> {
        let w = self.broadcast_width(a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<T> = if w == 0 {
            Vec::new()
        } else {
            da.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = db[i % w];
                    match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                    }
                })
                .collect()
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Binary(op, a, b), &[a, b]))
    }

    fn unary(&mut self, op: UnaryOp, a: Tensor) -> Tensor {
        let half = T::of(0.5);
        let (c, k) = (T::of(GELU_C), T::of(GELU_K));
        let out = self
            .data(a)
            .iter()
            .map(|&x| match op {
                UnaryOp::Relu => x.max(T::zero()),
                UnaryOp::Gelu => half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Exp => x.exp(),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Unary(op, a), &[a])
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let ax = axis_split(s, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let idx = |j: usize| (o * ax.len + j) * ax.inner + i;
                let mut m = T::neg_infinity();
                for j in 0..ax.len {
                    m = m.max(d[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..ax.len {
                    let e = (d[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..ax.len {
                    out[idx(j)] = out[idx(j)] / sum;
                }
            }
        }
        let shape = s.to_vec();
        Ok(self.push(shape, out, Op::Softmax(x, ax), &[x]))
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape(format!("causal softmax expects a square matrix, got {s:?}")));
        }
        let n = s[0];
        let d = self.data(x);
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            let row = &d[i * n..i * n + i + 1];
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for o in &mut out[i * n..i * n + i + 1] {
                *o = *o / sum;
            }
        }
        Ok(self.push(vec![n, n], out, Op::CausalSoftmax(x), &[x]))
    }

    /// Normalises over the last axis, then applies `gain` and `bias` (both of
    /// the last axis' width).
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: f32) -> Result<Tensor> {
        let s = self.shape(x);
        let d = *s.last().ok_or_else(|| Error::Shape("layer_norm on rank 0".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm width {d} vs gain {:?} bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let rows = if d == 0 { 0 } else { numel(s) / d };
        let eps = T::of32(eps);
        let inv_d = T::one() / T::of(d as f64);
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let shape = s.to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Stacks tensors along the leading (token) axis.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat width mismatch: {s:?} vs [_, {tail:?}]")));
            }
            rows += s[0];
        }
        if parts.len() == 1 {
            // keep a distinct node so the result is a fresh handle
            let data = self.data(first).to_vec();
            let shape = self.shape(first).to_vec();
            return Ok(self.push(shape, data, Op::ConcatRows(parts.to_vec()), parts));
        }
        let mut out = Vec::with_capacity(rows * numel(&tail));
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenates 2-D tensors along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!("concat_cols row mismatch: {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.data(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape(x);
        let (rows, w) = rows_of(s);
        if s.is_empty() || start + len > rows {
            return Err(Error::Index(format!("rows {start}..{} of {s:?}", start + len)));
        }
        let data = self.data(x)[start * w..(start + len) * w].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        Ok(self.push(shape, data, Op::SliceRows(x, start), &[x]))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Index(format!("cols {start}..{} of {s:?}", start + len)));
        }
        let (rows, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * c + start..r * c + start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols(x, start), &[x]))
    }

    /// Embedding lookup; the backward pass scatter-adds into `table`.
    pub fn gather_rows(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows expects a 2-D table, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("row id {bad} out of range for table of {v} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Sum or mean over one axis (removed from the shape) or over everything.
    pub fn reduce(&mut self, x: Tensor, kind: ReduceKind, axis: Option<usize>) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        let (ax, mut shape) = match axis {
            None => (
                Axis {
                    outer: 1,
                    len: numel(&s),
                    inner: 1,
                },
                vec![1],
            ),
            Some(a) if a < s.len() => {
                let mut sh = s.clone();
                sh.remove(a);
                (axis_split(&s, a), sh)
            }
            Some(a) => return Err(Error::Shape(format!("reduce axis {a} out of range for {s:?}"))),
        };
        if shape.is_empty() {
            shape.push(1);
        }
        let d = self.data(x);
        let mut out = vec![T::zero(); ax.outer * ax.inner];
        for o in 0..ax.outer {
            for j in 0..ax.len {
                let base = (o * ax.len + j) * ax.inner;
                for i in 0..ax.inner {
                    out[o * ax.inner + i] += d[base + i];
                }
            }
        }
        if kind == ReduceKind::Mean && ax.len > 0 {
            let n = T::of(ax.len as f64);
            for v in &mut out {
                *v = *v / n;
            }
        }
        Ok(self.push(shape, out, Op::Reduce(x, kind, ax), &[x]))
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        self.reduce(x, ReduceKind::Sum, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Tensor) -> Tensor {
        self.reduce(x, ReduceKind::Mean, None).expect("full reduction")
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore_index`.
    /// All rows ignored yields a zero loss with zero gradient.
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[usize], ignore_index: usize) -> Result<Tensor> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let (t, v) = (s[0], s[1]);
        let mut tg = Vec::with_capacity(t);
        for &y in targets {
            if y == ignore_index {
                tg.push(None);
            } else if y < v {
                tg.push(Some(y));
            } else {
                return Err(Error::Index(format!("target {y} out of range for {v} classes")));
            }
        }
        let d = self.data(logits);
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        let mut count = 0;
        for r in 0..t {
            let row = &d[r * v..(r + 1) * v];
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[r * v + j] = e;
                sum += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / sum;
            }
            if let Some(y) = tg[r] {
                total += sum.ln() + m - row[y];
                count += 1;
            }
        }
        let loss = if count > 0 {
            total / T::of(count as f64)
        } else {
            T::zero()
        };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            &[logits],
        ))
    }

    // ---------------------------------------------------------- backward

    /// Propagates d`loss`/d(leaf) into every `requires_grad` leaf. A graph can
    /// be differentiated once; a second call is a contract error.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if node.requires_grad {
                grads[id] = Some(g);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let mut acc = |t: Tensor, f: &mut dyn FnMut(&mut [T])| {
            if nodes[t.0].needs_grad {
                let slot = grads[t.0].get_or_insert_with(|| vec![T::zero(); nodes[t.0].data.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |da| matmul_nt_acc(g, bd, da, m, k, n));
                acc(*b, &mut |db| matmul_tn_acc(ad, g, db, m, k, n));
            }
            Op::Transpose(a) => {
                let s = &nodes[a.0].shape;
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Binary(op, a, b) => {
                let w = nodes[b.0].data.len();
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |da| match op {
                    BinaryOp::Add | BinaryOp::Sub => {
                        for (d, &gv) in da.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    BinaryOp::Mul => {
                        for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                            *d += gv * bd[i % w];
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        let v = match op {
                            BinaryOp::Add => gv,
                            BinaryOp::Sub => -gv,
                            BinaryOp::Mul => gv * ad[i],
                        };
                        db[i % w] += v;
                    }
                });
            }
            Op::Unary(op, a) => {
                let xd = &nodes[a.0].data;
                let yd = &node.data;
                let (half, c, k) = (T::of(0.5), T::of(GELU_C), T::of(GELU_K));
                let three = T::of(3.0);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        let (x, y) = (xd[i], yd[i]);
                        let local = match op {
                            UnaryOp::Relu => {
                                if x > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Gelu => {
                                let th = (c * (x + k * x * x * x)).tanh();
                                half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
                            }
                            UnaryOp::Tanh => T::one() - y * y,
                            UnaryOp::Exp => y,
                        };
                        da[i] += g[i] * local;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * *s;
                }
            }),
            Op::Softmax(x, ax) => {
                let y = &node.data;
                acc(*x, &mut |dx| {
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let idx = |j: usize| (o * ax.len + j) * ax.inner + i;
                            let mut dot = T::zero();
                            for j in 0..ax.len {
                                dot += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..ax.len {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax(x) => {
                let n = node.shape[0];
                let y = &node.data;
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        let r = i * n;
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot += g[r + j] * y[r + j];
                        }
                        for j in 0..=i {
                            dx[r + j] += y[r + j] * (g[r + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap_or(&0);
                let rows = rstd.len();
                let gd = &nodes[gain.0].data;
                acc(*x, &mut |dx| {
                    let inv_d = T::one() / T::of(d as f64);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = g[r * d + j] * gd[j];
                            dx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].data.len();
                    acc(*p, &mut |dp| {
                        for (d, &gv) in dp.iter_mut().zip(&g[off..off + n]) {
                            *d += gv;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(*p, &mut |dp| {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let (_, w) = rows_of(&nodes[x.0].shape);
                acc(*x, &mut |dx| {
                    for (d, &gv) in dx[start * w..start * w + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let c = nodes[x.0].shape[1];
                let (rows, len) = (node.shape[0], node.shape[1]);
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        for j in 0..len {
                            dx[r * c + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Reduce(x, kind, ax) => {
                let scale = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::one() / T::of(ax.len.max(1) as f64),
                };
                acc(*x, &mut |dx| {
                    for o in 0..ax.outer {
                        for j in 0..ax.len {
                            let base = (o * ax.len + j) * ax.inner;
                            for i in 0..ax.inner {
                                dx[base + i] += g[o * ax.inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / T::of(*count as f64);
                acc(*logits, &mut |dl| {
                    for (r, tgt) in targets.iter().enumerate() {
                        if let Some(y) = tgt {
                            for j in 0..v {
                                dl[r * v + j] += probs[r * v + j] * scale;
                            }
                            dl[r * v + y] -= scale;
                        }
                    }
                });
            }
        }
    }
}
