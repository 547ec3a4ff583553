//! Dense row-major tensors and the forward kernels a small transformer needs.
//!
//! Every kernel reduces left to right in a fixed order, and the result for a
//! given output row never depends on how many other rows are in the batch.
//! Code paths that split one sequence into pieces (full forward vs. prefill +
//! decode, online vs. offline training) therefore agree bitwise.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

/// Floating-point element type. `f32` is the default engine precision, `f64`
/// exists for gradient checks and tight equivalence runs.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("row {row} has no unmasked entry")]
    FullyMaskedRow { row: usize },
    #[error("every position is masked out of the loss")]
    EmptyLossMask,
    #[error("target {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: u32, vocab: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("variable {0} is not part of this graph")]
    NotInGraph(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::one(); n],
            grad: None,
        }
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all dimensions but the last.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(shape_err("Tensor::set_grad", "gradient length differs"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::of(x.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of the data buffers (shape included, gradient ignored).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Rows `start..start+len` as a new 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<T> {
        let c = self.cols();
        Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
            grad: None,
        }
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        let c = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != c) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let data: Vec<T> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let r = data.len() / c.max(1);
        Tensor::new(vec![r, c], data)
    }
}

// ---------------------------------------------------------------------------
// Raw kernels over flat slices. Shapes are checked by the callers.

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    k: usize,
    m: usize,
    n: usize,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
    c
}

/// Softmax over one row, restricted to entries where `visible` holds.
/// Hidden entries get exactly zero weight.
pub(crate) fn masked_softmax_row<T: Scalar>(
    scores: &[T],
    visible: Option<&[bool]>,
    out: &mut [T],
) -> bool {
    let keep = |j: usize| visible.is_none_or(|v| v[j]);
    let mut max = T::neg_infinity();
    for (j, &s) in scores.iter().enumerate() {
        if keep(j) && s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for (j, (&s, o)) in scores.iter().zip(out.iter_mut()).enumerate() {
        if keep(j) {
            let e = (s - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = T::zero();
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        if keep(j) {
            *o /= sum;
        }
    }
    true
}

pub(crate) fn rmsnorm_kernel<T: Scalar>(
    x: &[T],
    w: &[T],
    eps: T,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let dn = T::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut ss = T::zero();
        for &v in xr {
            ss += v * v;
        }
        let mean = ss / dn;
        let denom = (mean + eps).sqrt();
        // eps = 0 on a zero row: the numerator is zero too, so emit zeros.
        let ir = if denom == T::zero() {
            T::zero()
        } else {
            T::one() / denom
        };
        inv.push(ir);
        for ((o, &v), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(w) {
            *o = v * ir * g;
        }
    }
    (out, inv)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

// ---------------------------------------------------------------------------
// Tensor-level forward ops.

fn as_matrix<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(shape_err("matmul", "operands must be 2-D"));
    }
    let (m, k) = as_matrix(a);
    let (k2, n) = as_matrix(b);
    if k != k2 {
        return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    Tensor::new(vec![m, n], matmul_kernel(&a.data, &b.data, m, k, n))
}

/// Row softmax; `visible[i*n+j] == false` excludes entry `(i, j)`.
pub fn softmax_rows<T: Scalar>(
    a: &Tensor<T>,
    visible: Option<&[bool]>,
) -> Result<Tensor<T>, TensorError> {
    let (m, n) = as_matrix(a);
    if let Some(v) = visible {
        if v.len() != m * n {
            return Err(shape_err("softmax_rows", "mask shape differs"));
        }
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let vis = visible.map(|v| &v[i * n..(i + 1) * n]);
        if !masked_softmax_row(&a.data[i * n..(i + 1) * n], vis, &mut out[i * n..(i + 1) * n]) {
            return Err(TensorError::FullyMaskedRow { row: i });
        }
    }
    Tensor::new(a.shape.clone(), out)
}

pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, eps: T) -> Result<Tensor<T>, TensorError> {
    let d = x.cols();
    if weight.numel() != d {
        return Err(shape_err("rmsnorm", format!("rows of {d}, weight of {}", weight.numel())));
    }
    let (out, _) = rmsnorm_kernel(&x.data, &weight.data, eps, d);
    Tensor::new(x.shape.clone(), out)
}

/// `(silu(x·w_gate) ⊙ (x·w_up)) · w_down`.
pub fn swiglu<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let g = matmul(x, w_gate)?;
    let u = matmul(x, w_up)?;
    if g.shape != u.shape {
        return Err(shape_err("swiglu", "gate and up projections differ"));
    }
    let h: Vec<T> = g.data.iter().zip(&u.data).map(|(&a, &b)| silu(a) * b).collect();
    matmul(&Tensor::new(g.shape.clone(), h)?, w_down)
}

/// Mean negative log-likelihood over positions whose `loss_mask` entry is set.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<T, TensorError> {
    let (t, v) = as_matrix(logits);
    if targets.len() != t || loss_mask.len() != t {
        return Err(shape_err("cross_entropy", "targets/mask length differs from rows"));
    }
    let (loss, _, _) = cross_entropy_kernel(&logits.data, targets, loss_mask, v)?;
    Ok(loss)
}

/// Returns (loss, softmax probabilities, count of unmasked rows).
pub(crate) fn cross_entropy_kernel<T: Scalar>(
    logits: &[T],
    targets: &[u32],
    loss_mask: &[bool],
    v: usize,
) -> Result<(T, Vec<T>, usize), TensorError> {
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TensorError::EmptyLossMask);
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (i, (&tgt, &on)) in targets.iter().zip(loss_mask).enumerate() {
        if !on {
            continue;
        }
        if tgt as usize >= v {
            return Err(TensorError::TargetOutOfRange { target: tgt, vocab: v });
        }
        let row = &logits[i * v..(i + 1) * v];
        masked_softmax_row(row, None, &mut probs[i * v..(i + 1) * v]);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &z in row {
            sum += (z - max).exp();
        }
        let logp = row[tgt as usize] - max - sum.ln();
        total -= logp;
    }
    let loss = total / T::of(count as f64);
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, probs, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let a = t(&[2, 2], &[3., 4., 5., 6.]);
        assert!(matmul(&i, &a).unwrap().bitwise_eq(&a));
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = matmul(&t(&[3, 4], &a), &t(&[4, 2], &b)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 2 + j];
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let e = matmul(&t(&[2, 3], &[0.; 6]), &t(&[2, 2], &[0.; 4])).unwrap_err();
        assert!(matches!(e, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_rows(&t(&[1, 3], &[0., 0., 0.]), None).unwrap();
        for &x in u.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let m = softmax_rows(&t(&[1, 2], &[5., 5.]), Some(&[true, false])).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);
        let s = softmax_rows(&t(&[1, 3], &[1., 2., 3.]), None).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (x, w) in s.data().iter().zip(want) {
            assert!((x - w).abs() < 1e-4);
        }
        let e = softmax_rows(&t(&[1, 2], &[1., 2.]), Some(&[false, false])).unwrap_err();
        assert_eq!(e, TensorError::FullyMaskedRow { row: 0 });
    }

    #[test]
    fn masked_entries_are_bitwise_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..20).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mask: Vec<bool> = (0..20).map(|i| i % 5 == 0 || i % 3 == 1).collect();
        let s = softmax_rows(&t(&[4, 5], &vals), Some(&mask)).unwrap();
        for (x, m) in s.data().iter().zip(&mask) {
            if !m {
                assert_eq!(x.to_bits(), 0f64.to_bits());
            }
        }
        for r in 0..4 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = t(&[4], &[1.; 4]);
        let r = rmsnorm(&t(&[1, 4], &[1.; 4]), &ones, 0.0).unwrap();
        assert_eq!(r.data(), &[1.0; 4]);
        let r = rmsnorm(&t(&[1, 2], &[2., 0.]), &t(&[2], &[1., 1.]), 0.0).unwrap();
        assert!((r.data()[0] - 2.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.data()[1], 0.0);
        let z = rmsnorm(&t(&[1, 3], &[0.; 3]), &t(&[3], &[1.; 3]), 1e-5).unwrap();
        assert_eq!(z.data(), &[0.0; 3]);
    }

    #[test]
    fn swiglu_examples() {
        let w = t(&[1, 1], &[1.]);
        let y = swiglu(&t(&[1, 1], &[1.]), &w, &w, &w).unwrap();
        assert!((y.data()[0] - 0.73106).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (x, wg, wu, wd) = (r(3), r(6), r(6), r(6));
        let zero = swiglu(&t(&[1, 3], &[0.; 3]), &t(&[3, 2], &wg), &t(&[3, 2], &wu), &t(&[2, 3], &wd)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let y = swiglu(&t(&[1, 3], &x), &t(&[3, 2], &wg), &t(&[3, 2], &wu), &t(&[2, 3], &wd)).unwrap();
        // scalar-loop reference
        let mut hidden = [0.0; 2];
        for (j, h) in hidden.iter_mut().enumerate() {
            let (mut g, mut u) = (0.0, 0.0);
            for p in 0..3 {
                g += x[p] * wg[p * 2 + j];
                u += x[p] * wu[p * 2 + j];
            }
            *h = g / (1.0 + (-g).exp()) * u;
        }
        for o in 0..3 {
            let want = hidden[0] * wd[o] + hidden[1] * wd[3 + o];
            assert!((y.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut l = vec![0.0; 4];
        l[2] = 1e6;
        let loss = cross_entropy(&t(&[1, 4], &l), &[2], &[true]).unwrap();
        assert!(loss.abs() < 1e-9);
        let u = cross_entropy(&t(&[1, 4], &[0.; 4]), &[1], &[true]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12);

        let logits = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -2.0]);
        let only0 = cross_entropy(&logits, &[1, 0], &[true, false]).unwrap();
        let row0 = [0.5f64, -1.0, 2.0];
        let lse = row0.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((only0 - (lse + 1.0)).abs() < 1e-12);

        assert_eq!(
            cross_entropy(&logits, &[1, 0], &[false, false]).unwrap_err(),
            TensorError::EmptyLossMask
        );
        assert!(matches!(
            cross_entropy(&logits, &[7, 0], &[true, false]).unwrap_err(),
            TensorError::TargetOutOfRange { .. }
        ));
    }
}
