//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor created during one forward pass. Each op
//! appends a node that records its inputs; [`Graph::backward`] walks the
//! nodes in exact reverse append order and accumulates gradients into every
//! node that requires them. A fresh graph is built for every training step.
//!
//! The graph is generic over the element type so the same model code can be
//! run in `f32` for training and in `f64` when checking gradients against
//! finite differences.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

/// Epsilon used by layer normalization throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element usable in a [`Graph`].
pub trait Element: Float + Debug + Default + Sum + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary
    /// strides on `a` and `b`. `c` is dense row-major `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

/// `a` and `b` are (buffer length, (row stride, col stride)).
fn check_gemm_bounds(
    (m, k, n): (usize, usize, usize),
    (a_len, (rsa, csa)): (usize, (usize, usize)),
    (b_len, (rsb, csb)): (usize, (usize, usize)),
    c_len: usize,
) {
    assert!(c_len >= m * n, "gemm output buffer too small");
    if m > 0 && k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a_len, "gemm lhs out of bounds");
    }
    if k > 0 && n > 0 {
        assert!((k - 1) * rsb + (n - 1) * csb < b_len, "gemm rhs out of bounds");
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds((m, k, n), (a.len(), a_strides), (b.len(), b_strides), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                // SAFETY: bounds of every strided access were checked above and
                // `c` is an exclusively borrowed dense m×n buffer.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Tensor, b: Tensor, m: usize, k: usize, n: usize },
    BatchMatMul { a: Tensor, b: Tensor, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, factor: T },
    Gelu { a: Tensor },
    Softmax { a: Tensor, cols: usize },
    LayerNorm { x: Tensor, gain: Tensor, bias: Tensor, d: usize, rstd: Vec<T> },
    Permute { a: Tensor, axes: Vec<usize> },
    Reshape { a: Tensor },
    GatherRows { a: Tensor, indices: Vec<usize>, cols: usize },
    Concat { inputs: Vec<Tensor>, outer: usize, chunks: Vec<usize> },
    MeanAxis { a: Tensor, outer: usize, len: usize, inner: usize },
    Sum { a: Tensor },
    SmoothL1 { a: Tensor, beta: T },
    CrossEntropy { a: Tensor, probs: Vec<T>, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of tensors and the operations that produced them.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gelu_scalar<T: Element>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
    (y, dy)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Tensor(self.nodes.len() - 1)
    }

    fn node(&self, t: Tensor) -> &Node<T> {
        &self.nodes[t.0]
    }

    fn rg(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.node(*t).requires_grad)
    }

    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!("shape {shape:?} has a zero dimension")));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Shape { op: "leaf", lhs: shape.to_vec(), rhs: vec![data.len()] });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, true)
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn constant_f32(&mut self, data: &[f32], shape: &[usize]) -> Result<Tensor> {
        self.constant(data.iter().map(|&v| T::from_f32(v)).collect(), shape)
    }

    /// Copy of `t` that is cut off from the gradient graph.
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let n = self.node(t);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.node(t).shape
    }

    pub fn value(&self, t: Tensor) -> &[T] {
        &self.node(t).data
    }

    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.node(t).grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.node(t).requires_grad
    }

    pub fn scalar(&self, t: Tensor) -> Result<T> {
        let n = self.node(t);
        if n.data.len() != 1 {
            return Err(TensorError::Contract(format!("expected a scalar, got shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `a[..., k] · b[k, n]`; leading dims of `a` are treated as rows.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(TensorError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), T::zero(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product over the leading axis: `a[B,m,k] · b[B,k,n]`, or
    /// `a[B,m,k] · b[B,n,k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Tensor, b: Tensor, trans_b: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape { op: "bmm", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        let bstr = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv[i * k * n..(i + 1) * k * n],
                bstr,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![batch, m, n], out, rg, Op::BatchMatMul { a, b, batch, m, k, n, trans_b }))
    }

    /// Elementwise sum; `b` may broadcast over leading axes when its shape
    /// is a suffix of `a`'s.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape { op: "add", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let bv = self.value(b);
        let out: Vec<T> =
            self.value(a).chunks(bv.len()).flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y)).collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Sub { a, b }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        let factor = T::from_f64(factor);
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Scale { a, factor })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        let out = self.value(a).iter().map(|&x| gelu_scalar(x).0).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Gelu { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Tensor) -> Tensor {
        let cols = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, rg, Op::Softmax { a, cols })
    }

    /// Normalize each last-axis row to zero mean and unit variance, then
    /// apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape(x).last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if !(eps > 0.0) {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let eps = T::from_f64(eps);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks(d) {
            let (mean, r) = row_stats(row, eps);
            rstd.push(r);
            out.extend(row.iter().zip(gv.iter().zip(bv)).map(|(&v, (&g, &b))| (v - mean) * r * g + b));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, d, rstd }))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Tensor, axes: &[usize]) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::Shape { op: "permute", lhs: sa, rhs: axes.to_vec() });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let src = self.value(a);
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&sa, axes, |o, i| out[o] = src[i]);
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, out, rg, Op::Permute { a, axes: axes.to_vec() }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { a }))
    }

    /// Select rows (last-axis vectors) of `a`, viewed as a matrix, by index.
    /// Returns a `[indices.len(), cols]` tensor.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        let cols = *self.shape(a).last().unwrap();
        let rows = self.value(a).len() / cols;
        if indices.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { op: "gather_rows", index: bad, len: rows });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![indices.len(), cols], out, rg, Op::GatherRows { a, indices: indices.to_vec(), cols }))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first =
            self.shape(*inputs.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Index { op: "concat", index: axis, len: first.len() });
        }
        let mut axis_total = 0;
        for &t in inputs {
            let s = self.shape(t);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(TensorError::Shape { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            axis_total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let chunks: Vec<usize> = inputs.iter().map(|&t| self.shape(t)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for (&t, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(t)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let rg = self.rg(inputs);
        Ok(self.push(shape, out, rg, Op::Concat { inputs: inputs.to_vec(), outer, chunks }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_over_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::Index { op: "mean_over_axis", index: axis, len: sa.len() });
        }
        let (outer, len, inner) = (numel(&sa[..axis]), sa[axis], numel(&sa[axis + 1..]));
        let src = self.value(a);
        let inv = T::one() / T::from_f64(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::MeanAxis { a, outer, len, inner }))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let total = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![total], rg, Op::Sum { a })
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Elementwise smooth-L1 of a difference tensor: quadratic `x²/(2β)`
    /// inside `|x| <= β`, linear `|x| - β/2` outside.
    pub fn smooth_l1(&mut self, a: Tensor, beta: f64) -> Result<Tensor> {
        if !(beta > 0.0) {
            return Err(TensorError::Contract(format!("smooth_l1 beta must be positive, got {beta}")));
        }
        let beta = T::from_f64(beta);
        let half = T::from_f64(0.5);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x.abs() <= beta { half * x * x / beta } else { x.abs() - half * beta })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::SmoothL1 { a, beta }))
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against one
    /// class index per row, as a `[1]` tensor.
    pub fn cross_entropy(&mut self, a: Tensor, labels: &[usize]) -> Result<Tensor> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: shape, rhs: vec![labels.len()] });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, len: classes });
        }
        let mut probs = self.value(a).to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = total / T::from_f64(labels.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1], vec![out], rg, Op::CrossEntropy { a, probs, labels: labels.to_vec() }))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients add onto whatever
    /// previous calls left behind.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.requires_grad {
                continue;
            }
            if let Some(g) = g {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_slot {
            ($t:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $t) $body
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                with_slot!(a, |ga| {
                    // ga[m,k] += g[m,n] · bᵀ
                    T::gemm(m, n, k, g, (n, 1), bv, (1, n), T::one(), ga);
                });
                with_slot!(b, |gb| {
                    // gb[k,n] += aᵀ · g
                    T::gemm(k, m, n, av, (1, k), g, (n, 1), T::one(), gb);
                });
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                let (mk, kn, mn) = (m * k, k * n, m * n);
                with_slot!(a, |ga| {
                    for s in 0..batch {
                        let bs = &bv[s * kn..(s + 1) * kn];
                        // b is [k,n] (or [n,k] when transposed); need g·bᵀ
                        let bstr = if trans_b { (k, 1) } else { (1, n) };
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[s * mn..(s + 1) * mn],
                            (n, 1),
                            bs,
                            bstr,
                            T::one(),
                            &mut ga[s * mk..(s + 1) * mk],
                        );
                    }
                });
                with_slot!(b, |gb| {
                    for s in 0..batch {
                        let as_ = &av[s * mk..(s + 1) * mk];
                        let gs = &g[s * mn..(s + 1) * mn];
                        let out = &mut gb[s * kn..(s + 1) * kn];
                        if trans_b {
                            // gb[n,k] += gᵀ · a
                            T::gemm(n, m, k, gs, (1, n), as_, (k, 1), T::one(), out);
                        } else {
                            T::gemm(k, m, n, as_, (1, k), gs, (n, 1), T::one(), out);
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                with_slot!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v);
                });
                with_slot!(b, |gb| {
                    let len = gb.len();
                    for row in g.chunks(len) {
                        gb.iter_mut().zip(row).for_each(|(x, &v)| *x = *x + v);
                    }
                });
            }
            &Op::Sub { a, b } => {
                with_slot!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v);
                });
                with_slot!(b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &v)| *x = *x - v);
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                with_slot!(a, |ga| {
                    for ((x, &v), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + v * y;
                    }
                });
                with_slot!(b, |gb| {
                    for ((x, &v), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + v * y;
                    }
                });
            }
            &Op::Scale { a, factor } => {
                with_slot!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v * factor);
                });
            }
            &Op::Gelu { a } => {
                let av = &nodes[a.0].data;
                with_slot!(a, |ga| {
                    for ((x, &v), &inp) in ga.iter_mut().zip(g).zip(av) {
                        *x = *x + v * gelu_scalar(inp).1;
                    }
                });
            }
            &Op::Softmax { a, cols } => {
                let y = &node.data;
                with_slot!(a, |ga| {
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for ((o, &u), &v) in out.iter_mut().zip(gr).zip(yr) {
                            *o = *o + v * (u - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, d, rstd } => {
                let (x, gain, bias, d) = (*x, *gain, *bias, *d);
                let xv = &nodes[x.0].data;
                let gv = &nodes[gain.0].data;
                let eps_free_xhat = |r: usize, j: usize, mean: T| (xv[r * d + j] - mean) * rstd[r];
                let means: Vec<T> = xv.chunks(d).map(|row| row_mean(row)).collect();
                with_slot!(gain, |gg| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * eps_free_xhat(r, j, means[r]);
                        }
                    }
                });
                with_slot!(bias, |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, &v)| *x = *x + v);
                    }
                });
                with_slot!(x, |gx| {
                    let inv_d = T::one() / T::from_f64(d as f64);
                    for (r, gr) in g.chunks(d).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * eps_free_xhat(r, j, means[r]);
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            let xh = eps_free_xhat(r, j, means[r]);
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dxh - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::Permute { a, axes } => {
                let a = *a;
                let sa = &nodes[a.0].shape;
                with_slot!(a, |ga| {
                    for_each_permuted(sa, axes, |o, i| ga[i] = ga[i] + g[o]);
                });
            }
            &Op::Reshape { a } => {
                with_slot!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x = *x + v);
                });
            }
            Op::GatherRows { a, indices, cols } => {
                let (a, cols) = (*a, *cols);
                with_slot!(a, |ga| {
                    for (r, &src) in indices.iter().enumerate() {
                        let dst = &mut ga[src * cols..(src + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(x, &v)| *x = *x + v);
                    }
                });
            }
            Op::Concat { inputs, outer, chunks } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&t, &c) in inputs.iter().zip(chunks) {
                    with_slot!(t, |gt| {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + c];
                            gt[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(x, &v)| *x = *x + v);
                        }
                    });
                    offset += c;
                }
            }
            &Op::MeanAxis { a, outer, len, inner } => {
                let inv = T::one() / T::from_f64(len as f64);
                with_slot!(a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                ga[base + i] = ga[base + i] + g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            &Op::Sum { a } => {
                with_slot!(a, |ga| {
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                });
            }
            &Op::SmoothL1 { a, beta } => {
                let av = &nodes[a.0].data;
                with_slot!(a, |ga| {
                    for ((x, &v), &d) in ga.iter_mut().zip(g).zip(av) {
                        let local = if d.abs() <= beta { d / beta } else { d.signum() };
                        *x = *x + v * local;
                    }
                });
            }
            Op::CrossEntropy { a, probs, labels } => {
                let a = *a;
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                with_slot!(a, |ga| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let hot = if c == label { T::one() } else { T::zero() };
                            let i = r * classes + c;
                            ga[i] = ga[i] + scale * (probs[i] - hot);
                        }
                    }
                });
            }
        }
    }
}

/// Accumulation buffer for input `t`, or None if it takes no gradient.
fn grad_slot<'g, T: Element>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], t: Tensor) -> Option<&'g mut Vec<T>> {
    let n = &nodes[t.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[t.0].get_or_insert_with(|| vec![T::zero(); n.data.len()]))
}

fn row_mean<T: Element>(row: &[T]) -> T {
    row.iter().copied().sum::<T>() / T::from_f64(row.len() as f64)
}

/// Mean and reciprocal standard deviation (population variance plus eps).
fn row_stats<T: Element>(row: &[T], eps: T) -> (T, T) {
    let mean = row_mean(row);
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::from_f64(row.len() as f64);
    (mean, T::one() / (var + eps).sqrt())
}

/// Parameter-free layer normalization of each `d`-row, outside any graph.
pub fn normalize_rows<T: Element>(data: &[T], d: usize, eps: f64) -> Vec<T> {
    let eps = T::from_f64(eps);
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(d) {
        let (mean, r) = row_stats(row, eps);
        out.extend(row.iter().map(|&v| (v - mean) * r));
    }
    out
}

/// Calls `f(out_index, in_index)` for every element of a permutation of a
/// tensor with shape `shape` by `axes`.
fn for_each_permuted(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(shape);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f32>::new();
        let i = g.constant(vec![1., 0., 0., 1.], &[2, 2]).unwrap();
        let p = g.matmul(i, i).unwrap();
        assert_eq!(g.value(p), &[1., 0., 0., 1.]);
    }

    #[test]
    fn matmul_hand_sum() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = g.constant(vec![1., 1.], &[2, 1]).unwrap();
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(vec![0.; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![0.; 4], &[2, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 2] });
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[2, 2]"));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![5.; 4], &[1, 4]).unwrap();
        let gain = g.constant(vec![1.; 4], &[4]).unwrap();
        let bias = g.constant(vec![0.; 4], &[4]).unwrap();
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(y), &[0., 0., 0., 0.]);
    }

    #[test]
    fn layer_norm_standardized_row_is_fixed_point() {
        let row = [-1.5f64, -0.5, 0.5, 1.5];
        let std = (row.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        let x: Vec<f64> = row.iter().map(|v| v / std).collect();
        let mut g = Graph::<f64>::new();
        let xt = g.constant(x.clone(), &[1, 4]).unwrap();
        let gain = g.constant(vec![1.; 4], &[4]).unwrap();
        let bias = g.constant(vec![0.; 4], &[4]).unwrap();
        let y = g.layer_norm(xt, gain, bias, LAYER_NORM_EPS).unwrap();
        for (a, b) in g.value(y).iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(vec![0., 0.], &[2]).unwrap();
        let y = g.softmax(x);
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn gather_all_rows_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant((0..12).map(|v| v as f32).collect(), &[4, 3]).unwrap();
        let y = g.gather_rows(x, &[0, 1, 2, 3]).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(matches!(g.gather_rows(x, &[4]), Err(TensorError::Index { index: 4, len: 4, .. })));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.constant((0..24).map(|v| v as f32).collect(), &[2, 3, 4]).unwrap();
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(g.value(y)[(3 * 2 + 1) * 3 + 2], g.value(x)[(3 + 2) * 4 + 3]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1., -2., 3.], &[3]).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1., 2.], &[2]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1., 2.], &[2]).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 2.]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1., 2.], &[2]).unwrap();
        let c = g.constant(vec![3., 4.], &[2]).unwrap();
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3., 4.]);
        assert!(g.grad(c).is_none());
        assert!(g.grad(p).is_some());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(vec![1., 2.], &[2]).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn leaf_rejects_mismatched_data() {
        let mut g = Graph::<f32>::new();
        assert!(g.constant(vec![1., 2., 3.], &[2, 2]).is_err());
    }
}
