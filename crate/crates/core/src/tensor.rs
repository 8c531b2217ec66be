//! Dense row-major tensors and the differentiable operations the model needs.
//!
//! Layout is always contiguous row-major; transposes materialize. Every
//! operation that participates in training has a hand-written backward
//! (vector-Jacobian product) next to it — there is no tape. Callers compose
//! the backwards explicitly in reverse order.

use crate::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar element types tensors can hold. Only `f32` and `f64` implement
/// this; `f64` is used by the test oracles, `f32` by training.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// On-disk/dtype tag for tensor payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::format(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Convert an `f64` constant into the element type. Panics only if the value
/// is not representable, which cannot happen for finite constants.
#[inline]
pub fn elem<T: Element>(v: f64) -> T {
    T::from_f64(v).expect("finite constant convertible to element type")
}

/// Dense row-major N-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                n
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut o = 0;
        for (i, &d) in idx.iter().enumerate() {
            debug_assert!(d < self.shape[i]);
            o = o * self.shape[i] + d;
        }
        o
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Returns an error naming `ctx` if any entry is NaN or infinite.
    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite value {v} at flat index {i} in {ctx}"
                )));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / elem::<T>(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Cast every entry through `f64` into another element type.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| elem::<U>(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

/// Dot product of two equally long slices.
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// 2-D matrix product `a @ b`; shapes (m,k) x (k,n) -> (m,n).
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    mm_check(a, b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    if b.shape[0] != k {
        return Err(Error::shape(format!(
            "matmul inner dims {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let n = b.shape[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// `a @ b^T`; shapes (m,k) x (n,k) -> (m,n). The row-major dot-product form;
/// used for linear layers whose weights are stored (out, in).
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    mm_check(a, b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    if b.shape[1] != k {
        return Err(Error::shape(format!(
            "matmul_nt inner dims {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let n = b.shape[0];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b.data[j * k..(j + 1) * k]);
        }
    }
    Ok(out)
}

/// `a^T @ b`; shapes (k,m) x (k,n) -> (m,n). Used by weight gradients.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    mm_check(a, b)?;
    let (k, m) = (a.shape[0], a.shape[1]);
    if b.shape[0] != k {
        return Err(Error::shape(format!(
            "matmul_tn inner dims {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let n = b.shape[1];
    let mut out = Tensor::zeros(&[m, n]);
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

fn mm_check<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matrix product needs 2-D operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Materialized transpose of a 2-D tensor.
pub fn transpose2d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("transpose2d on rank {}", x.rank())));
    }
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data[j * r + i] = x.data[i * c + j];
        }
    }
    Ok(out)
}

/// Tensor-times-matrix along one mode: applies the (r,k) matrix `m` along
/// `axis` of `x` (whose extent must be k), yielding extent r there.
/// `out[..., i, ...] = sum_j m[i][j] * x[..., j, ...]`.
pub fn mode_product<T: Element>(x: &Tensor<T>, m: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if m.rank() != 2 {
        return Err(Error::shape(format!(
            "mode_product matrix must be 2-D, got {:?}",
            m.shape
        )));
    }
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let k = x.shape[axis];
    let (r, mk) = (m.shape[0], m.shape[1]);
    if mk != k {
        return Err(Error::shape(format!(
            "mode_product along axis {axis}: matrix is {:?} but axis extent is {k}",
            m.shape
        )));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out_shape = x.shape.clone();
    out_shape[axis] = r;
    let mut out = Tensor::zeros(&out_shape);
    for o in 0..outer {
        let xbase = o * k * inner;
        let obase = o * r * inner;
        for i in 0..r {
            let mrow = &m.data[i * k..(i + 1) * k];
            let orow = &mut out.data[obase + i * inner..obase + (i + 1) * inner];
            for (j, &w) in mrow.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let xrow = &x.data[xbase + j * inner..xbase + (j + 1) * inner];
                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                    *ov = *ov + w * xv;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `mode_product` w.r.t. `x`: the transposed matrix applied along
/// the same axis. (The matrices used here are constants; no matrix gradient.)
pub fn mode_product_backward<T: Element>(
    grad_out: &Tensor<T>,
    m: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    mode_product(grad_out, &transpose2d(m)?, axis)
}

/// Numerically stable softmax along `axis` (max-shifted).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let k = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * k * inner + j * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..k {
                mx = mx.max(out.data[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..k {
                let e = (out.data[idx(j)] - mx).exp();
                out.data[idx(j)] = e;
                sum = sum + e;
            }
            for j in 0..k {
                out.data[idx(j)] = out.data[idx(j)] / sum;
            }
        }
    }
    Ok(out)
}

/// VJP of softmax given its output `y` and upstream `grad_y`:
/// `dx = y * (grad_y - sum(grad_y * y))` along the softmax axis.
pub fn softmax_backward<T: Element>(
    y: &Tensor<T>,
    grad_y: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    if y.shape != grad_y.shape {
        return Err(Error::shape("softmax_backward shape mismatch"));
    }
    let k = y.shape[axis];
    let inner: usize = y.shape[axis + 1..].iter().product();
    let outer: usize = y.shape[..axis].iter().product();
    let mut out = Tensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * k * inner + j * inner + i;
            let mut dotv = T::zero();
            for j in 0..k {
                dotv = dotv + grad_y.data[idx(j)] * y.data[idx(j)];
            }
            for j in 0..k {
                out.data[idx(j)] = y.data[idx(j)] * (grad_y.data[idx(j)] - dotv);
            }
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row statistics produced by [`layer_norm`], consumed by its backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last axis with learned scale and shift.
/// `x` is treated as (rows, d) where d is the last-axis extent.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!(
            "layer_norm params of length {}/{} do not match last axis {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let rows = x.len() / d;
    let eps = elem::<T>(LAYER_NORM_EPS);
    let dn = elem::<T>(d as f64);
    let mut out = Tensor::zeros(x.shape());
    let mut cache = LayerNormCache {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let xr = &x.data[r * d..(r + 1) * d];
        let or = &mut out.data[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in xr {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gamma.data[j] + beta.data[j];
        }
        cache.mean.push(mean);
        cache.rstd.push(rstd);
    }
    Ok((out, cache))
}

/// VJP of layer_norm; returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = x.cols();
    let rows = x.len() / d;
    let dn = elem::<T>(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    for r in 0..rows {
        let xr = &x.data[r * d..(r + 1) * d];
        let gy = &grad_y.data[r * d..(r + 1) * d];
        let mean = cache.mean[r];
        let rstd = cache.rstd[r];
        // dL/dxhat_j = gy_j * gamma_j; dx via the standard two-reduction form.
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = gy[j] * gamma.data[j];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            dgamma.data[j] = dgamma.data[j] + gy[j] * xhat;
            dbeta.data[j] = dbeta.data[j] + gy[j];
        }
        let dxr = &mut dx.data[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = gy[j] * gamma.data[j];
            dxr[j] = rstd * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
        }
    }
    Ok((dx, dgamma, dbeta))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU activation (tanh form).
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let c = elem::<T>(GELU_C);
    let a = elem::<T>(GELU_A);
    let half = elem::<T>(0.5);
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

/// VJP of GELU given the original input.
pub fn gelu_backward<T: Element>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    let c = elem::<T>(GELU_C);
    let a = elem::<T>(GELU_A);
    let half = elem::<T>(0.5);
    let three = elem::<T>(3.0);
    x.zip(grad_y, |v, g| {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let du = c * (T::one() + three * a * v * v);
        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
        g * d
    })
}

/// Mean softmax cross-entropy over a batch of logits (n, c) with integer
/// labels. Returns the scalar loss and the softmax probabilities (the
/// backward cache).
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::shape("cross_entropy expects (n, classes)"));
    }
    let (n, c) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(Error::data(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::data(format!("label {l} out of range 0..{c}")));
        }
    }
    let probs = softmax(logits, 1)?;
    let mut loss = T::zero();
    let tiny = elem::<T>(1e-300);
    for (i, &l) in labels.iter().enumerate() {
        loss = loss - (probs.data[i * c + l] + tiny).ln();
    }
    Ok((loss / elem::<T>(n as f64), probs))
}

/// VJP of mean cross-entropy w.r.t. logits: `(probs - onehot) / n`, scaled by
/// the upstream scalar gradient.
pub fn cross_entropy_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad_loss: T,
) -> Tensor<T> {
    let (n, c) = (probs.shape[0], probs.shape[1]);
    let inv_n = grad_loss / elem::<T>(n as f64);
    let mut out = probs.scale(inv_n);
    for (i, &l) in labels.iter().enumerate() {
        out.data[i * c + l] = out.data[i * c + l] - inv_n;
    }
    out
}

/// Mean squared error over all entries.
pub fn mse<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape != target.shape {
        return Err(Error::shape(format!(
            "mse on shapes {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let mut acc = T::zero();
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let d = p - t;
        acc = acc + d * d;
    }
    Ok(acc / elem::<T>(pred.len() as f64))
}

/// VJP of mean squared error w.r.t. `pred`: `2 (pred - target) / n`.
pub fn mse_backward<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, grad_loss: T) -> Tensor<T> {
    let s = elem::<T>(2.0 / pred.len() as f64) * grad_loss;
    Tensor {
        shape: pred.shape.clone(),
        data: pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| s * (p - t))
            .collect(),
    }
}

/// Affine map `y = x @ w^T + b` with `w` stored (out, in); the layout used
/// by every projection in the model.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul_nt(x, w)?;
    let out = y.cols();
    if b.len() != out {
        return Err(Error::shape(format!(
            "bias length {} vs output width {out}",
            b.len()
        )));
    }
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v = *v + bb;
        }
    }
    Ok(y)
}

/// VJP of [`linear`]: returns `(dx, dw, db)`.
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dx = matmul(grad_y, w)?;
    let dw = matmul_tn(grad_y, x)?;
    let mut db = Tensor::zeros(&[grad_y.cols()]);
    for r in 0..grad_y.rows() {
        for (j, v) in grad_y.row(r).iter().enumerate() {
            db.data_mut()[j] = db.data()[j] + *v;
        }
    }
    Ok((dx, dw, db))
}

/// Per-row mean and (population) variance of a 2-D tensor.
pub fn row_mean_var<T: Element>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let d = x.cols();
    let rows = x.len() / d;
    let dn = elem::<T>(d as f64);
    let mut means = Vec::with_capacity(rows);
    let mut vars = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x.data[r * d..(r + 1) * d];
        let mut m = T::zero();
        for &v in xr {
            m = m + v;
        }
        m = m / dn;
        let mut var = T::zero();
        for &v in xr {
            let c = v - m;
            var = var + c * c;
        }
        means.push(m);
        vars.push(var / dn);
    }
    (means, vars)
}
