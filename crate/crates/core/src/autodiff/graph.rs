//! Computation record and the differentiable primitives recorded on it.

use rand::Rng;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddTrailing(Var, Var),
    AddMid(Var, Var),
    MulMid(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Gelu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    SumLast(Var),
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Dropout { x: Var, mask: Vec<S> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<S> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    Stack(Vec<Var>),
    EmbeddingMean { table: Var, ids: Vec<Vec<usize>> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Layer normalisation epsilon inside the square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so every input precedes its consumer.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
    train: bool,
    rng: Option<StreamRng>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Splits a shape around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

#[inline]
fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x);
    (y, dy)
}

#[inline]
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn lse_row<S: Scalar>(row: &[S]) -> S {
    let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
    if !m.is_finite() {
        return m;
    }
    let s: S = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

impl<S: Scalar> Graph<S> {
    /// Record with gradients enabled, in evaluation mode.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            train: false,
            rng: None,
        }
    }

    /// Record used only for inference: leaves never require gradients.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Training-mode record; dropout masks are drawn from `rng`.
    pub fn training(rng: StreamRng) -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            train: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rng(&mut self) -> Option<&mut StreamRng> {
        self.rng.as_mut()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<S>, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// `a[.., k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.cols();
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, n) = (ta.rows(), tb.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape()[..ta.shape().len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B, m, k] · [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bs * m * n];
        for i in 0..bs {
            gemm_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias or positional table).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let (sx, sy) = (tx.shape(), ty.shape());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(mismatch("add_trailing", sx, sy));
        }
        let n = ty.len();
        let yd = ty.data();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &b) in chunk.iter_mut().zip(yd) {
                *d += b;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddTrailing(x, y), &[x, y]))
    }

    fn check_mid(&self, op: &'static str, x: Var, y: Var) -> Result<(usize, usize, usize)> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.len() != 3 || sy.len() != 2 || sx[0] != sy[0] || sx[2] != sy[1] {
            return Err(mismatch(op, sx, sy));
        }
        Ok((sx[0], sx[1], sx[2]))
    }

    /// `x[B, T, n] + y[B, n]`, broadcast over the middle axis.
    pub fn add_mid(&mut self, x: Var, y: Var) -> Result<Var> {
        let (b, t, n) = self.check_mid("add_mid", x, y)?;
        let (tx, ty) = (self.value(x), self.value(y));
        let mut data = tx.data().to_vec();
        for i in 0..b {
            let yi = &ty.data()[i * n..(i + 1) * n];
            for j in 0..t {
                let row = &mut data[(i * t + j) * n..(i * t + j + 1) * n];
                for (d, &v) in row.iter_mut().zip(yi) {
                    *d += v;
                }
            }
        }
        let value = Tensor::new(vec![b, t, n], data)?;
        Ok(self.push(value, Op::AddMid(x, y), &[x, y]))
    }

    /// `x[B, T, n] ⊙ y[B, n]`, broadcast over the middle axis.
    pub fn mul_mid(&mut self, x: Var, y: Var) -> Result<Var> {
        let (b, t, n) = self.check_mid("mul_mid", x, y)?;
        let (tx, ty) = (self.value(x), self.value(y));
        let mut data = tx.data().to_vec();
        for i in 0..b {
            let yi = &ty.data()[i * n..(i + 1) * n];
            for j in 0..t {
                let row = &mut data[(i * t + j) * n..(i * t + j + 1) * n];
                for (d, &v) in row.iter_mut().zip(yi) {
                    *d *= v;
                }
            }
        }
        let value = Tensor::new(vec![b, t, n], data)?;
        Ok(self.push(value, Op::MulMid(x, y), &[x, y]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::of(c);
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::of(c);
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| gelu(v).0)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let l = lse_row(row);
            for v in row.iter_mut() {
                *v = (*v - l).exp();
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let l = lse_row(row);
            for v in row.iter_mut() {
                *v -= l;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Log-sum-exp reducing the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().chunks(t.cols()).map(lse_row).collect();
        let value = Tensor::new(drop_last(t.shape()), data).expect("reduced shape");
        self.push(value, Op::LogSumExp(x), &[x])
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().chunks(t.cols()).map(|r| r.iter().cloned().sum()).collect();
        let value = Tensor::new(drop_last(t.shape()), data).expect("reduced shape");
        self.push(value, Op::SumLast(x), &[x])
    }

    /// Arithmetic mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::contract(format!("mean over axis {axis} of shape {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut data = vec![S::zero(); outer * inner];
        let inv = S::one() / S::of(len as f64);
        for o in 0..outer {
            for l in 0..len {
                let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        for d in data.iter_mut() {
            *d *= inv;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().cloned().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: S = t.data().iter().cloned().sum::<S>() / S::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = S::of(1.0 / (1.0 - p));
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::contract("training graph without rng"))?;
        let mask: Vec<S> = (0..n)
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Fused causal multi-head scaled dot-product attention over
    /// `q, k, v: [B, T, d]`. Position `t` attends to positions `0..=t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || heads == 0 || shape[2] % heads != 0 {
            return Err(Error::contract(format!("attention over {shape:?} with {heads} heads")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![S::zero(); b * t * d];
        let mut probs = vec![S::zero(); b * heads * t * t];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let qi = &tq[(bi * t + i) * d + h * dh..(bi * t + i) * d + (h + 1) * dh];
                    let p = &mut probs[((bi * heads + h) * t + i) * t..((bi * heads + h) * t + i + 1) * t];
                    let mut m = S::neg_infinity();
                    for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                        let kj = &tk[(bi * t + j) * d + h * dh..(bi * t + j) * d + (h + 1) * dh];
                        let s: S = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<S>() * scale;
                        *pj = s;
                        m = m.max(s);
                    }
                    let mut z = S::zero();
                    for pj in p.iter_mut().take(i + 1) {
                        *pj = (*pj - m).exp();
                        z += *pj;
                    }
                    let o = &mut out[(bi * t + i) * d + h * dh..(bi * t + i) * d + (h + 1) * dh];
                    for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                        *pj /= z;
                        let vj = &tv[(bi * t + j) * d + h * dh..(bi * t + j) * d + (h + 1) * dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += *pj * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = S::of(LAYER_NORM_EPS);
        let inv_n = S::one() / S::of(n as f64);
        let mut xhat = vec![S::zero(); tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = vec![S::zero(); tx.len()];
        for (r, row) in tx.data().chunks(n).enumerate() {
            let mean = row.iter().cloned().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != *lead {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if len == 0 || start + len > n {
            return Err(Error::contract(format!("slice {start}..{} of width {n}", start + len)));
        }
        let data = t.data().chunks(n).flat_map(|r| r[start..start + len].iter().cloned()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    /// Selects columns `idx` of the last axis, in the given order.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::contract(format!("gather of {idx:?} from width {n}")));
        }
        let data = t.data().chunks(n).flat_map(|r| idx.iter().map(move |&i| r[i])).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = idx.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).len());
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(mismatch("stack", &s0, self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s0);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack(parts.to_vec()), parts))
    }

    /// Per-row mean of embedding-table rows: `out[b] = mean_i table[ids[b][i]]`.
    pub fn embedding_mean(&mut self, table: Var, ids: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::contract("embedding table must be 2-D"));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with empty batch"));
        }
        let mut data = vec![S::zero(); ids.len() * d];
        for (b, seq) in ids.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::contract(format!("empty token sequence at batch index {b}")));
            }
            let inv = S::one() / S::of(seq.len() as f64);
            for &id in seq {
                if id >= vocab {
                    return Err(Error::contract(format!("token id {id} outside vocabulary of {vocab}")));
                }
                for (o, &v) in data[b * d..(b + 1) * d].iter_mut().zip(&t.data()[id * d..(id + 1) * d]) {
                    *o += v * inv;
                }
            }
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::EmbeddingMean {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                self.acc(grads, *a, |da| gemm_nt_acc(g, tb.data(), da, m, n, k));
                self.acc(grads, *b, |db| gemm_tn_acc(ta.data(), g, db, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (val(*a), val(*b));
                self.acc(grads, *a, |da| {
                    for s in 0..bs {
                        gemm_nt_acc(
                            &g[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(grads, *b, |db| {
                    for s in 0..bs {
                        gemm_tn_acc(
                            &ad[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(g).zip(bd) {
                        *x += y * w;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(g).zip(ad) {
                        *x += y * w;
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((x, &y), &w) in d.iter_mut().zip(g).zip(bd) {
                        *x += y / w;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (((x, &y), &u), &w) in d.iter_mut().zip(g).zip(ad).zip(bd) {
                        *x -= y * u / (w * w);
                    }
                });
            }
            Op::AddTrailing(x, y) => {
                self.acc(grads, *x, |d| add_into(d, g));
                let n = self.nodes[y.0].value.len();
                self.acc(grads, *y, |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::AddMid(x, y) => {
                let s = out.shape();
                let (t, n) = (s[1], s[2]);
                self.acc(grads, *x, |d| add_into(d, g));
                self.acc(grads, *y, |d| {
                    for (r, row) in g.chunks(n).enumerate() {
                        let bi = r / t;
                        add_into(&mut d[bi * n..(bi + 1) * n], row);
                    }
                });
            }
            Op::MulMid(x, y) => {
                let s = out.shape();
                let (t, n) = (s[1], s[2]);
                let (xd, yd) = (val(*x), val(*y));
                self.acc(grads, *x, |d| {
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let yi = &yd[(r / t) * n..(r / t + 1) * n];
                        for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yi) {
                            *o += gv * yv;
                        }
                    }
                });
                self.acc(grads, *y, |d| {
                    for (r, (grow, xrow)) in g.chunks(n).zip(xd.chunks(n)).enumerate() {
                        let di = &mut d[(r / t) * n..(r / t + 1) * n];
                        for ((o, &gv), &xv) in di.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::Gelu(x) => {
                let xd = val(*x);
                self.acc(grads, *x, |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *o += gv * gelu(xv).1;
                    }
                });
            }
            Op::Softplus(x) => {
                let xd = val(*x);
                self.acc(grads, *x, |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *o += gv * sigmoid(xv);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = out.data();
                self.acc(grads, *x, |d| {
                    for ((o, &gv), &y) in d.iter_mut().zip(g).zip(yd) {
                        *o += gv * y * (S::one() - y);
                    }
                });
            }
            Op::Log(x) => {
                let xd = val(*x);
                self.acc(grads, *x, |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                });
            }
            Op::Square(x) => {
                let xd = val(*x);
                let two = S::of(2.0);
                self.acc(grads, *x, |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(xd) {
                        *o += two * gv * xv;
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.cols();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let gs: S = grow.iter().cloned().sum();
                        for ((o, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - y.exp() * gs;
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let xt = &self.nodes[x.0].value;
                let n = xt.cols();
                self.acc(grads, *x, |d| {
                    for (r, (drow, xrow)) in d.chunks_mut(n).zip(xt.data().chunks(n)).enumerate() {
                        let l = out.data()[r];
                        for (o, &xv) in drow.iter_mut().zip(xrow) {
                            *o += g[r] * (xv - l).exp();
                        }
                    }
                });
            }
            Op::SumLast(x) => {
                let n = self.nodes[x.0].value.cols();
                self.acc(grads, *x, |d| {
                    for (r, drow) in d.chunks_mut(n).enumerate() {
                        drow.iter_mut().for_each(|o| *o += g[r]);
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.nodes[x.0].value.shape(), *axis);
                let inv = S::one() / S::of(len as f64);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (dv, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *dv += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::MeanAll(x) => {
                let inv = g[0] / S::of(self.nodes[x.0].value.len() as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o += inv));
            }
            Op::Dropout { x, mask } => self.acc(grads, *x, |d| {
                for ((o, &gv), &m) in d.iter_mut().zip(g).zip(mask) {
                    *o += gv * m;
                }
            }),
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(out, g, *q, *k, *v, *heads, probs, grads),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = out.cols();
                let gm = val(*gamma);
                let inv_n = S::one() / S::of(n as f64);
                self.acc(grads, *x, |d| {
                    for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..n {
                            let dh = grow[c] * gm[c];
                            m1 += dh;
                            m2 += dh * h[c];
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for c in 0..n {
                            let dh = grow[c] * gm[c];
                            drow[c] += rstd[r] * (dh - m1 - h[c] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (grow, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &gv), &hv) in d.iter_mut().zip(grow).zip(h) {
                            *o += gv * hv;
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for grow in g.chunks(n) {
                        add_into(d, grow);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.acc(grads, p, |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let n = self.nodes[x.0].value.cols();
                let w = out.cols();
                self.acc(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(w)) {
                        add_into(&mut drow[*start..*start + w], grow);
                    }
                });
            }
            Op::Gather { x, idx } => {
                let n = self.nodes[x.0].value.cols();
                let w = idx.len();
                self.acc(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(w)) {
                        for (&i, &v) in idx.iter().zip(grow) {
                            drow[i] += v;
                        }
                    }
                });
            }
            Op::Stack(parts) => {
                for (idx, &p) in parts.iter().enumerate() {
                    let n = self.nodes[p.0].value.len();
                    self.acc(grads, p, |d| add_into(d, &g[idx * n..(idx + 1) * n]));
                }
            }
            Op::EmbeddingMean { table, ids } => {
                let dm = out.cols();
                self.acc(grads, *table, |d| {
                    for (b, seq) in ids.iter().enumerate() {
                        let inv = S::one() / S::of(seq.len() as f64);
                        for &id in seq {
                            for (o, &gv) in d[id * dm..(id + 1) * dm].iter_mut().zip(&g[b * dm..(b + 1) * dm]) {
                                *o += gv * inv;
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        out: &Tensor<S>,
        g: &[S],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let s = out.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![S::zero(); b * t * d];
        let mut dk = vec![S::zero(); b * t * d];
        let mut dv = vec![S::zero(); b * t * d];
        let mut dp = vec![S::zero(); t];
        let row = |bi: usize, i: usize, h: usize| (bi * t + i) * d + h * dh..(bi * t + i) * d + (h + 1) * dh;
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let p = &probs[((bi * heads + h) * t + i) * t..((bi * heads + h) * t + i + 1) * t];
                    let gi = &g[row(bi, i, h)];
                    let mut dot = S::zero();
                    for j in 0..=i {
                        let vj = &vd[row(bi, j, h)];
                        dp[j] = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        dot += dp[j] * p[j];
                        for (o, &gv) in dv[row(bi, j, h)].iter_mut().zip(gi) {
                            *o += p[j] * gv;
                        }
                    }
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let (ri, rj) = (row(bi, i, h), row(bi, j, h));
                        for c in 0..dh {
                            dq[ri.start + c] += ds * kd[rj.start + c];
                            dk[rj.start + c] += ds * qd[ri.start + c];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |x| add_into(x, &dq));
        self.acc(grads, k, |x| add_into(x, &dk));
        self.acc(grads, v, |x| add_into(x, &dv));
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of the leaves of a graph with respect to one scalar loss.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
