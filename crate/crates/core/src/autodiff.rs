//! Reverse-mode differentiation over a recorded operation list.
//!
//! Operations are appended to a [`Graph`] in execution order; `backward`
//! walks that list in exact reverse. Only nodes that depend on a registered
//! parameter carry gradients, so frozen weights cost nothing on the way back.

use std::sync::Arc;

use crate::rope::{rotate_rows, RotationTable};
use crate::tensor::{
    cross_entropy_kernel, masked_softmax_row, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel,
    rmsnorm_kernel, shape_err, sigmoid, silu, Scalar, Tensor, TensorError,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        visible: Arc<Vec<bool>>,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        table: Arc<RotationTable<T>>,
        heads: usize,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    is_param: bool,
}

/// Recorded computation plus parameter registry.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    poisoned: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            poisoned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(name);
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Constant that shares storage with the caller (no copy).
    pub fn shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        if self.poisoned.is_none() && !t.is_finite() {
            self.poisoned = Some("shared");
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registered parameter: `backward` fills its gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.param_shared(Arc::new(t))
    }

    pub fn param_shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        let v = self.shared(t);
        self.nodes[v.0].requires_grad = true;
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.is_param)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the first operation that produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.poisoned {
            Some(op) => Err(TensorError::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Attention probabilities saved by an [`Graph::attention`] node,
    /// laid out `[heads × q_rows × k_rows]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected 2-D operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let c = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), rg, "matmul"))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let c = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMulNt(a, b), rg, "matmul_nt"))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let d: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), d)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg, "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let d: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), d)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg, "mul"))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let d: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), d).expect("same length");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let d: Vec<T> = self.value(a).data().iter().map(|&x| silu(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), d).expect("same length");
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg, "silu")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: T) -> Result<Var, TensorError> {
        let d = self.value(x).cols();
        if self.value(w).numel() != d {
            return Err(shape_err("rmsnorm", "weight length differs from row width"));
        }
        let (out, inv_rms) = rmsnorm_kernel(self.value(x).data(), self.value(w).data(), eps, d);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::RmsNorm { x, w, inv_rms }, rg, "rmsnorm"))
    }

    pub fn softmax_rows(&mut self, x: Var, visible: Option<&[bool]>) -> Result<Var, TensorError> {
        let y = crate::tensor::softmax_rows(self.value(x), visible)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Softmax { x }, rg, "softmax_rows"))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[tq × heads·hd]`, `k`/`v` are `[tk × heads·hd]` and
    /// `visible` is a row-major `[tq × tk]` mask shared by all heads. Hidden
    /// key columns are skipped outright, so they contribute exactly nothing.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        visible: Arc<Vec<bool>>,
    ) -> Result<Var, TensorError> {
        let (tq, width) = self.dims2(q, "attention")?;
        let (tk, wk) = self.dims2(k, "attention")?;
        let (tv, wv) = self.dims2(v, "attention")?;
        if wk != width || wv != width || tv != tk || width % heads != 0 {
            return Err(shape_err("attention", "q/k/v widths or lengths disagree"));
        }
        if visible.len() != tq * tk {
            return Err(shape_err("attention", "mask shape differs from [tq × tk]"));
        }
        let hd = width / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * width];
        let mut scores = vec![T::zero(); tk];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..tq {
                let vis = &visible[i * tk..(i + 1) * tk];
                let qi = &qd[i * width + off..i * width + off + hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    if !vis[j] {
                        continue;
                    }
                    let kj = &kd[j * width + off..j * width + off + hd];
                    let mut acc = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        acc += a * b;
                    }
                    *s = acc * scale;
                }
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                if !masked_softmax_row(&scores, Some(vis), p) {
                    return Err(TensorError::FullyMaskedRow { row: i });
                }
                let oi = &mut out[i * width + off..i * width + off + hd];
                for j in 0..tk {
                    if !vis[j] {
                        continue;
                    }
                    let pij = p[j];
                    let vj = &vd[j * width + off..j * width + off + hd];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
        }
        let t = Tensor::new(vec![tq, width], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                visible,
                probs,
            },
            rg,
            "attention",
        ))
    }

    /// Rotary embedding over `[t × heads·hd]` rows using a precomputed table.
    pub fn rope(&mut self, x: Var, table: Arc<RotationTable<T>>, heads: usize) -> Result<Var, TensorError> {
        let (t, width) = self.dims2(x, "rope")?;
        if width % heads != 0 || table.rows() != t || table.pairs() * 2 * heads != width {
            return Err(shape_err("rope", "rotation table does not fit the input"));
        }
        let mut out = self.value(x).data().to_vec();
        rotate_rows(&mut out, &table, heads, false);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![t, width], out)?, Op::Rope { x, table, heads }, rg, "rope"))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (n, d) = self.dims2(table, "gather_rows")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= n {
                return Err(shape_err("gather_rows", format!("id {id} outside table of {n}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg, "concat_rows"))
    }

    /// Mean cross-entropy over rows selected by `mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var, TensorError> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(shape_err("cross_entropy", "targets/mask length differs from rows"));
        }
        let (loss, probs, count) = cross_entropy_kernel(self.value(logits).data(), targets, mask, v)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
            "cross_entropy",
        ))
    }

    /// Gradient of a registered parameter after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if !self.is_param(v) {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of a parameter value with its gradient buffer attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = (*self.nodes[v.0].value).clone();
        let g = self
            .grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); t.numel()]);
        t.set_grad(g).expect("same shape");
        t
    }

    /// Propagates d(loss)/d(node) back to every registered parameter.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::NotInGraph(loss.0));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            if self.nodes[idx].is_param {
                grads[idx] = Some(gy);
                continue;
            }
            self.node_vjp(idx, &gy, &mut grads)?;
        }
        // keep parameter gradients only
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].is_param {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_vjp(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>| {
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, d) in g.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    acc(grads, *a, matmul_nt_kernel(gy, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(grads, *b, matmul_tn_kernel(self.value(*a).data(), gy, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a·bᵀ: da = gy·b, db = gyᵀ·a
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    acc(grads, *a, matmul_kernel(gy, self.value(*b).data(), m, n, k));
                }
                if self.rg(*b) {
                    acc(grads, *b, matmul_tn_kernel(gy, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, gy.to_vec());
                }
                if self.rg(*b) {
                    acc(grads, *b, gy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gy.iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                    acc(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = gy.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).collect();
                    acc(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                acc(grads, *a, gy.iter().map(|&g| g * *c).collect());
            }
            Op::Silu(a) => {
                let d = gy
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                acc(grads, *a, d);
            }
            Op::Sum(a) => {
                acc(grads, *a, vec![gy[0]; self.value(*a).numel()]);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let d = wd.len();
                let dn = T::of(d as f64);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let mut dot = T::zero();
                        for c in 0..d {
                            dot += gr[c] * wd[c] * xr[c];
                        }
                        let k = ir * ir * ir * dot / dn;
                        for c in 0..d {
                            dx[r * d + c] = ir * wd[c] * gr[c] - xr[c] * k;
                        }
                    }
                    acc(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); d];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for c in 0..d {
                            dw[c] += gy[r * d + c] * xd[r * d + c] * ir;
                        }
                    }
                    acc(grads, *w, dw);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gy[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for c in 0..n {
                        dot += yr[c] * gr[c];
                    }
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                visible,
                probs,
            } => {
                let (tq, width) = (self.shape(*q)[0], self.shape(*q)[1]);
                let tk = self.shape(*k)[0];
                let hd = width / heads;
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); tq * width];
                let mut dk = vec![T::zero(); tk * width];
                let mut dv = vec![T::zero(); tk * width];
                let mut ds = vec![T::zero(); tk];
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..tq {
                        let vis = &visible[i * tk..(i + 1) * tk];
                        let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                        let go = &gy[i * width + off..i * width + off + hd];
                        let mut dot = T::zero();
                        for j in 0..tk {
                            if !vis[j] {
                                continue;
                            }
                            let vj = &vd[j * width + off..j * width + off + hd];
                            let mut dp = T::zero();
                            for (&g, &x) in go.iter().zip(vj) {
                                dp += g * x;
                            }
                            ds[j] = dp;
                            dot += p[j] * dp;
                            let dvj = &mut dv[j * width + off..j * width + off + hd];
                            for (d, &g) in dvj.iter_mut().zip(go) {
                                *d += p[j] * g;
                            }
                        }
                        let qi = &qd[i * width + off..i * width + off + hd];
                        for j in 0..tk {
                            if !vis[j] {
                                continue;
                            }
                            let s = p[j] * (ds[j] - dot) * *scale;
                            let kj = &kd[j * width + off..j * width + off + hd];
                            let dqi = &mut dq[i * width + off..i * width + off + hd];
                            for (d, &x) in dqi.iter_mut().zip(kj) {
                                *d += s * x;
                            }
                            let dkj = &mut dk[j * width + off..j * width + off + hd];
                            for (d, &x) in dkj.iter_mut().zip(qi) {
                                *d += s * x;
                            }
                        }
                    }
                }
                if self.rg(*q) {
                    acc(grads, *q, dq);
                }
                if self.rg(*k) {
                    acc(grads, *k, dk);
                }
                if self.rg(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::Rope { x, table, heads } => {
                let mut dx = gy.to_vec();
                rotate_rows(&mut dx, table, *heads, true);
                acc(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                let (n, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                let mut dt = vec![T::zero(); n * d];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for c in 0..d {
                        dt[id * d + c] += gy[r * d + c];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        acc(grads, p, gy[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let inv = gy[0] / T::of(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (i, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                    if !on {
                        continue;
                    }
                    for c in 0..v {
                        dl[i * v + c] = probs[i * v + c] * inv;
                    }
                    dl[i * v + t as usize] -= inv;
                }
                acc(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeFrequencies;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` wrt the first input only.
    fn fd_check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
        let run = |ins: &[Tensor<f64>], register: bool| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins
                .iter()
                .enumerate()
                .map(|(i, t)| if i == 0 && register { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (mut g, vars, out) = run(&inputs, true);
        g.backward(out).unwrap();
        let analytic = g.grad(vars[0]).unwrap().to_vec();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..inputs[0].numel() {
            let mut plus = inputs.clone();
            plus[0].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[0].data_mut()[i] -= h;
            let (gp, _, op) = run(&plus, false);
            let (gm, _, om) = run(&minus, false);
            let num = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * h);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let x = g.param(Tensor::from_f64(&[2], &[3., 4.]).unwrap());
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(Var(x.0 + 5)), Err(TensorError::NotInGraph(_))));
    }

    #[test]
    fn nonfinite_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(f64::MAX));
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonFinite { op: "mul" })));
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[4, 2]);
        let w = rand_t(&mut rng, &[3, 2]);
        // weighting the output keeps the loss from being a trivial sum
        let weighted = |g: &mut Graph<f64>, y: Var, w: Var| {
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        };
        let e = fd_check(vec![a.clone(), b.clone(), w.clone()], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted(g, y, v[2])
        });
        assert!(e < 1e-5, "matmul lhs {e}");
        let e = fd_check(vec![b.clone(), a.clone(), w.clone()], |g, v| {
            let y = g.matmul(v[1], v[0]).unwrap();
            weighted(g, y, v[2])
        });
        assert!(e < 1e-5, "matmul rhs {e}");
        let bt = rand_t(&mut rng, &[2, 4]);
        let e = fd_check(vec![bt.clone(), a.clone(), w.clone()], |g, v| {
            let y = g.matmul_nt(v[1], v[0]).unwrap();
            weighted(g, y, v[2])
        });
        assert!(e < 1e-5, "matmul_nt rhs {e}");
        let e = fd_check(vec![a.clone(), bt.clone(), w.clone()], |g, v| {
            let y = g.matmul_nt(v[0], v[1]).unwrap();
            weighted(g, y, v[2])
        });
        assert!(e < 1e-5, "matmul_nt lhs {e}");

        let x = rand_t(&mut rng, &[3, 4]);
        let nw = rand_t(&mut rng, &[4]);
        let wx = rand_t(&mut rng, &[3, 4]);
        let e = fd_check(vec![x.clone(), nw.clone(), wx.clone()], |g, v| {
            let y = g.rmsnorm(v[0], v[1], 1e-5).unwrap();
            weighted(g, y, v[2])
        });
        assert!(e < 1e-5, "rmsnorm x {e}");
        let e = fd_check(vec![nw.clone(), x.clone(), wx.clone()], |g, v| {
            let y = g.rmsnorm(v[1], v[0], 1e-5).unwrap();
            weighted(g, y, v[2])
        });
        assert!(e < 1e-5, "rmsnorm w {e}");
        let e = fd_check(vec![x.clone(), wx.clone()], |g, v| {
            let y = g.silu(v[0]);
            weighted(g, y, v[1])
        });
        assert!(e < 1e-5, "silu {e}");
        let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 11).collect();
        let e = fd_check(vec![x.clone(), wx.clone()], |g, v| {
            let y = g.softmax_rows(v[0], Some(&mask)).unwrap();
            weighted(g, y, v[1])
        });
        assert!(e < 1e-5, "softmax {e}");
        let e = fd_check(vec![x.clone()], |g, v| g.cross_entropy(v[0], &[1, 0, 3], &[true, false, true]).unwrap());
        assert!(e < 1e-5, "cross_entropy {e}");
        let table = rand_t(&mut rng, &[5, 4]);
        let e = fd_check(vec![table, wx.clone()], |g, v| {
            let y = g.gather_rows(v[0], &[4, 1, 4]).unwrap();
            weighted(g, y, v[1])
        });
        assert!(e < 1e-5, "gather {e}");
    }

    #[test]
    fn attention_and_rope_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (tq, tk, heads, hd) = (3, 5, 2, 4);
        let width = heads * hd;
        let q = rand_t(&mut rng, &[tq, width]);
        let k = rand_t(&mut rng, &[tk, width]);
        let v = rand_t(&mut rng, &[tk, width]);
        let w = rand_t(&mut rng, &[tq, width]);
        let mask: Arc<Vec<bool>> = Arc::new((0..tq * tk).map(|i| (i % tk) <= 2 + i / tk && i % 7 != 1).collect());
        for which in 0..3 {
            let mut ins = vec![q.clone(), k.clone(), v.clone(), w.clone()];
            ins.swap(0, which);
            let m = Arc::clone(&mask);
            let e = fd_check(ins, move |g, vars| {
                let mut order = [vars[0], vars[1], vars[2]];
                order.swap(0, which);
                let y = g.attention(order[0], order[1], order[2], heads, Arc::clone(&m)).unwrap();
                let p = g.mul(y, vars[3]).unwrap();
                g.sum(p)
            });
            assert!(e < 1e-5, "attention input {which}: {e}");
        }
        let freqs = RopeFrequencies::<f64>::new(hd, 100.0).unwrap();
        let table = Arc::new(freqs.table(&[0, 3, 7]));
        let e = fd_check(vec![q.clone(), w.clone()], |g, vars| {
            let y = g.rope(vars[0], Arc::clone(&table), heads).unwrap();
            let p = g.mul(y, vars[1]).unwrap();
            g.sum(p)
        });
        assert!(e < 1e-5, "rope {e}");
    }

    #[test]
    fn concat_and_scale_route_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 2], &[3., 4., 5., 6.]).unwrap());
        let c = g.concat_rows(&[b, a]).unwrap();
        let s = g.scale(c, 2.0);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0]);
    }
}
