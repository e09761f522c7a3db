//! Define-by-run reverse-mode differentiation.
//!
//! Every method on [`Graph`] evaluates its op eagerly and appends a node to
//! the tape, so building the graph *is* the forward evaluation. Values and
//! the activations needed by backward rules are cached on the node.
//! [`Graph::backward`] then walks the tape in exact reverse creation order.

use crate::tensor::{matmul_raw, Element, Tensor};
use crate::TensorError;

/// Index of a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Op kinds with a registered backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Transpose,
    SliceRows,
    GatherRows,
    ConcatRows,
    Reshape,
    Sum,
    Mean,
    Gelu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Mse,
    RowCosine,
    Exp,
    Log,
    ReplaceRows,
    Attention,
    Custom,
}

enum Op<T: Element> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, T),
    Transpose(NodeId),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Mse(NodeId, NodeId),
    RowCosine {
        a: NodeId,
        b: NodeId,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    Exp(NodeId),
    Log(NodeId),
    ReplaceRows {
        x: NodeId,
        fill: NodeId,
        rows: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
    /// Scalar output with a precomputed Jacobian w.r.t. its single input.
    Custom { input: NodeId, jacobian: Tensor<T> },
}

impl<T: Element> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(..) => OpKind::Transpose,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Mse(..) => OpKind::Mse,
            Op::RowCosine { .. } => OpKind::RowCosine,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::ReplaceRows { .. } => OpKind::ReplaceRows,
            Op::Attention { .. } => OpKind::Attention,
            Op::Custom { .. } => OpKind::Custom,
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-8;

/// Tape of evaluated nodes.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok(t.dims2())
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044_715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

fn guarded_log_arg<T: Element>(x: T) -> T {
    x.max(T::min_positive_value())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf: gradients are produced for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a node's value into a new constant (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", va)?;
        let (k2, n) = rank2("matmul", vb)?;
        if k != k2 {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec([m, n], out), Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_vec(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (_, n) = rank2("add_bias", vx)?;
        if vb.rank() != 1 || vb.numel() != n {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let (m, n) = rank2("transpose", vx)?;
        let d = vx.data();
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(d[i * n + j]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec([n, m], out), Op::Transpose(x), rg))
    }

    /// Rows `start..end` of a matrix (time-axis slice).
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let (m, n) = rank2("slice_rows", vx)?;
        if start >= end || end > m {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                extent: m,
            });
        }
        let out = Tensor::from_vec([end - start, n], vx.data()[start * n..end * n].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    /// Gathers rows by index; duplicates allowed, gradients scatter-add.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let (m, n) = rank2("gather_rows", vx)?;
        if rows.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: m,
                });
            }
            out.extend_from_slice(vx.row(r));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec([rows.len(), n], out),
            Op::GatherRows(x, rows.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let (_, n) = rank2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            let (m, c) = rank2("concat_rows", vp)?;
            if c != n {
                return Err(mismatch("concat_rows", self.value(*first).shape(), vp.shape()));
            }
            rows += m;
            out.extend_from_slice(vp.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec([rows, n], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId, TensorError> {
        let shape = shape.into();
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(mismatch("reshape", vx.shape(), &shape));
        }
        let out = vx.clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let n = T::from_usize(v.numel()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| gelu_parts(e).0);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.exp());
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    /// Natural log, with inputs clamped to the smallest positive normal.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| guarded_log_arg(e).ln());
        let rg = self.rg(&[x]);
        self.push(v, Op::Log(x), rg)
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = rank2("layer_norm", vx)?;
        if vg.numel() != n || vg.rank() != 1 {
            return Err(mismatch("layer_norm", vx.shape(), vg.shape()));
        }
        if vb.numel() != n || vb.rank() != 1 {
            return Err(mismatch("layer_norm", vx.shape(), vb.shape()));
        }
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = vx.row(r);
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &e) in row.iter().enumerate() {
                let h = (e - mu) * inv;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_vec([m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let (_, n) = rank2("softmax", vx)?;
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let vx = self.value(x);
        let (_, n) = rank2("log_softmax", vx)?;
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&e| (e - mx).exp()).sum::<T>().ln();
            for e in row.iter_mut() {
                *e = *e - lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Mean over all entries of `(a - b)^2`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mse", va.shape(), vb.shape()));
        }
        let n = T::from_usize(va.numel()).unwrap();
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// Cosine similarity between matching rows of two `m×n` matrices; output length `m`.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, _) = rank2("row_cosine", va)?;
        if va.shape() != vb.shape() {
            return Err(mismatch("row_cosine", va.shape(), vb.shape()));
        }
        let eps2 = T::from_f64_lossy(COSINE_EPS * COSINE_EPS);
        let mut norm_a = Vec::with_capacity(m);
        let mut norm_b = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let (ra, rb) = (va.row(r), vb.row(r));
            let na = (ra.iter().map(|&e| e * e).sum::<T>() + eps2).sqrt();
            let nb = (rb.iter().map(|&e| e * e).sum::<T>() + eps2).sqrt();
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            norm_a.push(na);
            norm_b.push(nb);
            out.push(dot / (na * nb));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec([m], out),
            Op::RowCosine { a, b, norm_a, norm_b },
            rg,
        ))
    }

    /// Replaces the listed rows of `x` by the vector `fill`.
    pub fn replace_rows(&mut self, x: NodeId, fill: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let (vx, vf) = (self.value(x), self.value(fill));
        let (m, n) = rank2("replace_rows", vx)?;
        if vf.numel() != n {
            return Err(mismatch("replace_rows", vx.shape(), vf.shape()));
        }
        let mut out = vx.clone();
        for &r in rows {
            if r >= m {
                return Err(TensorError::Index {
                    op: "replace_rows",
                    index: r,
                    extent: m,
                });
            }
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(vf.data());
        }
        let rg = self.rg(&[x, fill]);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                fill,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N×h`; rows only attend within their own segment.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, h) = rank2("attention", vq)?;
        if vk.shape() != vq.shape() {
            return Err(mismatch("attention", vq.shape(), vk.shape()));
        }
        if vv.shape() != vq.shape() {
            return Err(mismatch("attention", vq.shape(), vv.shape()));
        }
        if heads == 0 || h % heads != 0 {
            return Err(TensorError::Heads { width: h, heads });
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.end() > rows) || covered != rows {
            return Err(TensorError::Segments { rows, covered });
        }
        let dh = h / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let probs_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![T::zero(); probs_len];
        let mut out = vec![T::zero(); rows * h];
        let hs = h as isize;
        let mut off = 0;
        for seg in segments {
            let l = seg.len;
            for head in 0..heads {
                let base = seg.start * h + head * dh;
                let p = &mut probs[off..off + l * l];
                // S = Q Kᵀ * scale
                T::gemm(
                    l,
                    dh,
                    l,
                    scale,
                    &vq.data()[base..],
                    hs,
                    1,
                    &vk.data()[base..],
                    1,
                    hs,
                    T::zero(),
                    p,
                    l as isize,
                    1,
                );
                for row in p.chunks_mut(l) {
                    softmax_in_place(row);
                }
                T::gemm(
                    l,
                    l,
                    dh,
                    T::one(),
                    p,
                    l as isize,
                    1,
                    &vv.data()[base..],
                    hs,
                    1,
                    T::zero(),
                    &mut out[base..],
                    hs,
                    1,
                );
                off += l * l;
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_vec([rows, h], out),
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Scalar node whose Jacobian w.r.t. `input` was computed by the caller.
    pub fn custom_scalar(&mut self, input: NodeId, value: T, jacobian: Tensor<T>) -> Result<NodeId, TensorError> {
        let vi = self.value(input);
        if vi.shape() != jacobian.shape() {
            return Err(mismatch("custom_scalar", vi.shape(), jacobian.shape()));
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::Custom { input, jacobian }, rg))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients<T>, TensorError> {
        let sv = self.value(seed);
        if sv.numel() != 1 {
            return Err(TensorError::NonScalarSeed {
                shape: sv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::from_vec(sv.shape().to_vec(), vec![T::one()]));
        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Keep only leaves: intermediate grads are not part of the contract.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = vb.dims2().1;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    self.accumulate(grads, *a, Tensor::from_vec([m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut db,
                        n as isize,
                        1,
                    );
                    self.accumulate(grads, *b, Tensor::from_vec([k, n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape().to_vec(), d));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &e) in db.iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec([n], db));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|e| e * c));
            }
            Op::Transpose(x) => {
                let (m, n) = g.dims2();
                let mut d = Vec::with_capacity(m * n);
                for j in 0..n {
                    for i in 0..m {
                        d.push(g.data()[i * n + j]);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec([n, m], d));
            }
            Op::SliceRows(x, start) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let n = vx.dims2().1;
                    let mut d = Tensor::zeros(vx.shape().to_vec());
                    d.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, d);
                }
            }
            Op::GatherRows(x, rows) => {
                if self.requires_grad(*x) {
                    let vx = self.value(*x);
                    let n = vx.dims2().1;
                    let mut d = Tensor::zeros(vx.shape().to_vec());
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g.data()[i * n..(i + 1) * n];
                        for (o, &e) in d.data_mut()[r * n..(r + 1) * n].iter_mut().zip(src) {
                            *o += e;
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let len = vp.numel();
                    if self.requires_grad(*p) {
                        let d = Tensor::from_vec(vp.shape().to_vec(), g.data()[off..off + len].to_vec());
                        self.accumulate(grads, *p, d);
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let d = g.clone().reshaped(shape).expect("reshape grad");
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(vx.shape().to_vec(), g.item()));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let n = T::from_usize(vx.numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(vx.shape().to_vec(), g.item() / n));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gg)| gelu_parts(e).1 * gg)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape().to_vec(), d));
            }
            Op::Exp(x) => {
                let d = out.data().iter().zip(g.data()).map(|(&y, &gg)| y * gg).collect();
                self.accumulate(grads, *x, Tensor::from_vec(out.shape().to_vec(), d));
            }
            Op::Log(x) => {
                let vx = self.value(*x);
                let d = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gg)| gg / guarded_log_arg(e))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(vx.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gain);
                let (m, n) = g.dims2();
                let nf = T::from_usize(n).unwrap();
                if self.requires_grad(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g.data()[r * n + j] * xhat[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_vec([n], dg));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &e) in db.iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec([n], db));
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); m * n];
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let d = g.data()[r * n + j] * vg.data()[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[r * n + j];
                        }
                        let inv = inv_std[r];
                        for j in 0..n {
                            dx[r * n + j] = inv / nf * (nf * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec([m, n], dx));
                }
            }
            Op::Softmax(x) => {
                let (_, n) = out.dims2();
                let mut d = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let s: T = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &gg)| y * (gg - s)));
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape().to_vec(), d));
            }
            Op::LogSoftmax(x) => {
                let (_, n) = out.dims2();
                let mut d = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let s: T = gr.iter().copied().sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &gg)| gg - y.exp() * s));
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape().to_vec(), d));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = T::from_usize(va.numel()).unwrap();
                let c = T::from_f64_lossy(2.0) * g.item() / n;
                let da: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| c * (x - y)).collect();
                if self.requires_grad(*b) {
                    let db = da.iter().map(|&e| -e).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(vb.shape().to_vec(), db));
                }
                self.accumulate(grads, *a, Tensor::from_vec(va.shape().to_vec(), da));
            }
            Op::RowCosine { a, b, norm_a, norm_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = va.dims2();
                let mut da = vec![T::zero(); m * n];
                let mut db = vec![T::zero(); m * n];
                for r in 0..m {
                    let (na, nb, c, gg) = (norm_a[r], norm_b[r], out.data()[r], g.data()[r]);
                    let (ra, rb) = (va.row(r), vb.row(r));
                    for j in 0..n {
                        da[r * n + j] = gg * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        db[r * n + j] = gg * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec([m, n], da));
                self.accumulate(grads, *b, Tensor::from_vec([m, n], db));
            }
            Op::ReplaceRows { x, fill, rows } => {
                let n = out.dims2().1;
                if self.requires_grad(*fill) {
                    let mut df = vec![T::zero(); n];
                    for &r in rows {
                        for (d, &e) in df.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *d += e;
                        }
                    }
                    let shape = self.value(*fill).shape().to_vec();
                    self.accumulate(grads, *fill, Tensor::from_vec(shape, df));
                }
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for &r in rows {
                        dx.data_mut()[r * n..(r + 1) * n].fill(T::zero());
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, h) = vq.dims2();
                let dh = h / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let hs = h as isize;
                let mut dq = vec![T::zero(); rows * h];
                let mut dk = vec![T::zero(); rows * h];
                let mut dv = vec![T::zero(); rows * h];
                let mut off = 0;
                let mut dp = Vec::new();
                for seg in segments {
                    let l = seg.len;
                    dp.resize(l * l, T::zero());
                    for head in 0..*heads {
                        let base = seg.start * h + head * dh;
                        let p = &probs[off..off + l * l];
                        // dV = Pᵀ dO
                        T::gemm(
                            l,
                            l,
                            dh,
                            T::one(),
                            p,
                            1,
                            l as isize,
                            &g.data()[base..],
                            hs,
                            1,
                            T::zero(),
                            &mut dv[base..],
                            hs,
                            1,
                        );
                        // dP = dO Vᵀ
                        T::gemm(
                            l,
                            dh,
                            l,
                            T::one(),
                            &g.data()[base..],
                            hs,
                            1,
                            &vv.data()[base..],
                            1,
                            hs,
                            T::zero(),
                            &mut dp,
                            l as isize,
                            1,
                        );
                        // dS = P ⊙ (dP - rowsum(dP ⊙ P))
                        for (pr, dr) in p.chunks(l).zip(dp.chunks_mut(l)) {
                            let s: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pp) in dr.iter_mut().zip(pr) {
                                *d = pp * (*d - s);
                            }
                        }
                        // dQ = scale · dS K
                        T::gemm(
                            l,
                            l,
                            dh,
                            scale,
                            &dp,
                            l as isize,
                            1,
                            &vk.data()[base..],
                            hs,
                            1,
                            T::zero(),
                            &mut dq[base..],
                            hs,
                            1,
                        );
                        // dK = scale · dSᵀ Q
                        T::gemm(
                            l,
                            l,
                            dh,
                            scale,
                            &dp,
                            1,
                            l as isize,
                            &vq.data()[base..],
                            hs,
                            1,
                            T::zero(),
                            &mut dk[base..],
                            hs,
                            1,
                        );
                        off += l * l;
                    }
                }
                self.accumulate(grads, *q, Tensor::from_vec([rows, h], dq));
                self.accumulate(grads, *k, Tensor::from_vec([rows, h], dk));
                self.accumulate(grads, *v, Tensor::from_vec([rows, h], dv));
            }
            Op::Custom { input, jacobian } => {
                let s = g.item();
                self.accumulate(grads, *input, jacobian.map(|e| e * s));
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for e in row.iter_mut() {
        *e = (*e - mx).exp();
        s += *e;
    }
    for e in row.iter_mut() {
        *e = *e / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones([2, 3]));
        let b = g.constant(Tensor::ones([3, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones([2, 3]));
        let b = g.constant(Tensor::ones([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1, 8], 4.0));
        let gain = g.constant(Tensor::ones([8]));
        let bias = g.constant(Tensor::zeros([8]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 3]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn mse_gradient_is_two_diff_over_n() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_vec([2], vec![1.0, 2.0]));
        let b = g.constant(Tensor::zeros([2]));
        let l = g.mse(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn log_softmax_nll_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let logits = vec![0.3, -1.2, 2.0, 0.5];
        let x = g.param(Tensor::from_vec([1, 4], logits.clone()));
        let lp = g.log_softmax(x).unwrap();
        let t = g.transpose(lp).unwrap();
        let picked = g.slice_rows(t, 2, 3).unwrap();
        let s = g.sum(picked);
        let nll = g.scale(s, -1.0);
        let grads = g.backward(nll).unwrap();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (j, &gv) in grads.get(x).unwrap().data().iter().enumerate() {
            let p = (logits[j] - mx).exp() / z;
            let expect = p - if j == 2 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones([2, 2]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarSeed { .. })));
    }

    #[test]
    fn mean_equals_sum_over_count_in_f64() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(Tensor::from_vec([3, 4], data));
        let m = g.mean(x);
        let s = g.sum(x);
        assert_eq!(g.value(m).item(), g.value(s).item() / 12.0);
    }

    #[test]
    fn attention_rows_stay_within_segment() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = g.constant(Tensor::from_vec([5, 4], data.clone()));
        let segs = [Segment::new(0, 2), Segment::new(2, 3)];
        let y = g.attention(x, x, x, &segs, 2).unwrap();
        // Changing the second segment must not affect the first.
        let mut data2 = data;
        for e in &mut data2[8..] {
            *e += 1.0;
        }
        let x2 = g.constant(Tensor::from_vec([5, 4], data2));
        let y2 = g.attention(x2, x2, x2, &segs, 2).unwrap();
        assert_eq!(&g.value(y).data()[..8], &g.value(y2).data()[..8]);
    }
}
