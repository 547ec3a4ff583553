//! Rotary position embedding with explicit position IDs.

use crate::tensor::{shape_err, Scalar, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct RopeFrequencies<T> {
    head_dim: usize,
    base: f64,
    thetas: Vec<T>,
}

impl<T: Scalar> RopeFrequencies<T> {
    /// `thetas[i] = base^(-2i/head_dim)`.
    pub fn new(head_dim: usize, base: f64) -> Result<Self, TensorError> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(shape_err("rope_freqs", format!("head_dim {head_dim} must be even and positive")));
        }
        if base <= 1.0 {
            return Err(shape_err("rope_freqs", format!("base {base} must exceed 1")));
        }
        let thetas = (0..head_dim / 2)
            .map(|i| T::of(base.powf(-2.0 * i as f64 / head_dim as f64)))
            .collect();
        Ok(Self { head_dim, base, thetas })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[T] {
        &self.thetas
    }

    /// Cos/sin table for the given positions. Angles are formed in f64.
    pub fn table(&self, positions: &[i64]) -> RotationTable<T> {
        let pairs = self.thetas.len();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &p in positions {
            for th in &self.thetas {
                let a = p as f64 * th.as_f64();
                cos.push(T::of(a.cos()));
                sin.push(T::of(a.sin()));
            }
        }
        RotationTable {
            rows: positions.len(),
            pairs,
            cos,
            sin,
        }
    }
}

pub fn rope_freqs<T: Scalar>(head_dim: usize, base: f64) -> Result<RopeFrequencies<T>, TensorError> {
    RopeFrequencies::new(head_dim, base)
}

/// Per-row rotation angles for one head; reused across heads.
#[derive(Clone, Debug)]
pub struct RotationTable<T> {
    rows: usize,
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RotationTable<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }
}

/// Rotates each (2i, 2i+1) pair of every head in place.
/// `inverse` applies the transpose, i.e. the rotation by the negated angle.
pub(crate) fn rotate_rows<T: Scalar>(data: &mut [T], table: &RotationTable<T>, heads: usize, inverse: bool) {
    let hd = table.pairs * 2;
    let width = heads * hd;
    for r in 0..table.rows {
        let cs = &table.cos[r * table.pairs..(r + 1) * table.pairs];
        let sn = &table.sin[r * table.pairs..(r + 1) * table.pairs];
        for h in 0..heads {
            let base = r * width + h * hd;
            for i in 0..table.pairs {
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                let x0 = data[base + 2 * i];
                let x1 = data[base + 2 * i + 1];
                data[base + 2 * i] = x0 * c - x1 * s;
                data[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Applies the rotation to `x`, shaped `[seq × heads·head_dim]` (or
/// `[seq × heads × head_dim]`).
pub fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[i64],
    freqs: &RopeFrequencies<T>,
) -> Result<Tensor<T>, TensorError> {
    let seq = x.shape().first().copied().unwrap_or(0);
    if positions.len() != seq {
        return Err(shape_err("rope_apply", format!("{} positions for {seq} rows", positions.len())));
    }
    let width = if seq == 0 { 0 } else { x.numel() / seq };
    if width % freqs.head_dim != 0 {
        return Err(shape_err("rope_apply", "row width is not a multiple of head_dim"));
    }
    let heads = width / freqs.head_dim;
    let mut out = x.data().to_vec();
    rotate_rows(&mut out, &freqs.table(positions), heads, false);
    Tensor::new(x.shape().to_vec(), out)
}

fn rotated_score<T: Scalar>(q: &[T], k: &[T], m: i64, n: i64, freqs: &RopeFrequencies<T>) -> T {
    let qt = Tensor::new(vec![1, q.len()], q.to_vec()).expect("vector");
    let kt = Tensor::new(vec![1, k.len()], k.to_vec()).expect("vector");
    let qr = rope_apply(&qt, &[m], freqs).expect("one row");
    let kr = rope_apply(&kt, &[n], freqs).expect("one row");
    let mut s = T::zero();
    for (&a, &b) in qr.data().iter().zip(kr.data()) {
        s += a * b;
    }
    s
}

/// `|score(m, n) - score(m+s, n+s)|` for rotated single-head vectors.
pub fn score_shift_invariance_check<T: Scalar>(
    q: &[T],
    k: &[T],
    m: i64,
    n: i64,
    s: i64,
    freqs: &RopeFrequencies<T>,
) -> f64 {
    let a = rotated_score(q, k, m, n, freqs);
    let b = rotated_score(q, k, m + s, n + s, freqs);
    (a - b).abs().as_f64()
}
