//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value and the inputs
//! needed by its adjoint. [`Tape::backward`] walks the nodes once in reverse
//! and leaves `∂loss/∂leaf` on every leaf recorded with `requires_grad`.
//! A tape lives for one training step; call [`Tape::reset`] before reuse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives. Binary kinds accept either equal shapes or a
/// one-element operand that is broadcast against the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale,
    Silu,
    Square,
    Sqrt,
}

enum Op<R> {
    Leaf,
    Binary { kind: ElementwiseKind, a: Var, b: Var },
    Scale(Var, R),
    Silu(Var),
    Square(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<R>, rstd: Vec<R> },
    AddTiled { x: Var, p: Var },
    AddGrouped { x: Var, g: Var },
    Sum(Var),
    Mean(Var),
    Attention { q: Var, k: Var, v: Var, groups: usize, scale: R, probs: Vec<R> },
    Gather { x: Var, index: Vec<usize> },
    Embed { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
}

/// Recorded computation. Values are immutable once pushed.
pub struct Tape<R: Real> {
    values: Vec<Tensor<R>>,
    ops: Vec<Op<R>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<R>>>,
    consumed: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Drop every recorded node and gradient.
    pub fn reset(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.requires.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward pass with respect to a tracked leaf.
    /// `None` for untracked values and before backward runs.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<R>> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.values[v.0].shape(), g.clone()).ok()
    }

    /// Attention probabilities stored by an [`attention`](Self::attention)
    /// node, laid out as `groups` consecutive row-major `n × m` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[R]> {
        match &self.ops[v.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    // ------------------------------------------------------------------
    // Elementwise

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match kind {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => {
                let b = b.ok_or_else(|| Error::invalid("binary elementwise op needs two operands"))?;
                self.binary(kind, a, b)
            }
            ElementwiseKind::Scale => {
                let b = b.ok_or_else(|| Error::invalid("scale needs a scalar operand"))?;
                if self.value(b).len() != 1 {
                    return Err(Error::shape("scale", self.shape(a), self.shape(b)));
                }
                self.binary(ElementwiseKind::Mul, a, b)
            }
            ElementwiseKind::Silu => self.silu(a),
            ElementwiseKind::Square => self.square(a),
            ElementwiseKind::Sqrt => self.sqrt(a),
        }
    }

    fn binary(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (la, lb) = (va.len(), vb.len());
        let shape = if va.shape() == vb.shape() || lb == 1 {
            va.shape().to_vec()
        } else if la == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::shape("elementwise", va.shape(), vb.shape()));
        };
        let n = la.max(lb);
        let (da, db) = (va.data(), vb.data());
        let pick = |d: &[R], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data: Vec<R> = (0..n)
            .map(|i| {
                let (x, y) = (pick(da, i), pick(db, i));
                match kind {
                    ElementwiseKind::Add => x + y,
                    ElementwiseKind::Sub => x - y,
                    _ => x * y,
                }
            })
            .collect();
        let out = Tensor::new(&shape, data)?;
        out.check_finite("elementwise")?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(out, Op::Binary { kind, a, b }, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseKind::Mul, a, b)
    }

    /// Multiply by a fixed real.
    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        out.check_finite("scale")?;
        let req = self.requires[x.0];
        Ok(self.push(out, Op::Scale(x, c), req))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (R::one() + (-v).exp()));
        out.check_finite("silu")?;
        let req = self.requires[x.0];
        Ok(self.push(out, Op::Silu(x), req))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        out.check_finite("square")?;
        let req = self.requires[x.0];
        Ok(self.push(out, Op::Square(x), req))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < R::zero()) {
            return Err(Error::NonFinite("sqrt of a negative value"));
        }
        let out = self.value(x).map(|v| v.sqrt());
        let req = self.requires[x.0];
        Ok(self.push(out, Op::Sqrt(x), req))
    }

    // ------------------------------------------------------------------
    // Linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![R::zero(); m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let req = self.requires[a.0] || self.requires[b.0];
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), req))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "softmax_rows")?;
        let src = self.value(x);
        src.check_finite("softmax_rows input")?;
        let mut out = src.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let req = self.requires[x.0];
        let t = Tensor::new(&[rows, cols], out)?;
        Ok(self.push(t, Op::SoftmaxRows(x), req))
    }

    /// Normalize over the last axis, then apply `gain` and `bias`
    /// (both of length equal to the last dimension).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix_dims();
        if d == 0 || self.value(x).is_empty() {
            return Err(Error::Empty("layer_norm axis"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = R::of(d as f64);
        let mut xhat = vec![R::zero(); rows * d];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        t.check_finite("layer_norm")?;
        let req = self.requires[x.0] || self.requires[gain.0] || self.requires[bias.0];
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, req))
    }

    /// `out[r] = x[r] + p[r % p_rows]` over matrix rows. With a one-row `p`
    /// this is a bias add; with `p_rows` equal to a per-sample token count it
    /// adds positional encodings to a batch.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix_dims();
        let (prow, pd) = self.value(p).as_matrix_dims();
        if pd != d || prow == 0 || rows % prow != 0 {
            return Err(Error::shape("add_tiled", self.shape(x), self.shape(p)));
        }
        let pv = self.value(p).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            let pr = &pv[(r % prow) * d..(r % prow + 1) * d];
            for (o, &q) in out[r * d..(r + 1) * d].iter_mut().zip(pr) {
                *o += q;
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let req = self.requires[x.0] || self.requires[p.0];
        Ok(self.push(t, Op::AddTiled { x, p }, req))
    }

    /// `out[r] = x[r] + g[r / (rows / g_rows)]`: one row of `g` per
    /// contiguous group of rows of `x` (a per-sample vector added to every
    /// token of that sample).
    pub fn add_grouped(&mut self, x: Var, g: Var) -> Result<Var> {
        let (rows, d) = self.value(x).as_matrix_dims();
        let (grows, gd) = self.value(g).as_matrix_dims();
        if gd != d || grows == 0 || rows % grows != 0 {
            return Err(Error::shape("add_grouped", self.shape(x), self.shape(g)));
        }
        let per = rows / grows;
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            let gr = &gv[(r / per) * d..(r / per + 1) * d];
            for (o, &q) in out[r * d..(r + 1) * d].iter_mut().zip(gr) {
                *o += q;
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let req = self.requires[x.0] || self.requires[g.0];
        Ok(self.push(t, Op::AddGrouped { x, g }, req))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let req = self.requires[x.0];
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), req))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / R::of(v.len() as f64);
        let req = self.requires[x.0];
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), req))
    }

    /// Grouped scaled dot-product attention.
    ///
    /// `q` is `[groups·n, d]`, `k` is `[groups·m, d]`, `v` is `[groups·m, dv]`.
    /// Group `g` attends with its own `n` query rows over its own `m` key
    /// rows: `softmax(scale · Q_g K_gᵀ) V_g`. The probabilities are kept on
    /// the tape and can be read back with [`attention_probs`](Self::attention_probs).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, scale: R) -> Result<Var> {
        let (qr, d) = self.dims2(q, "attention")?;
        let (kr, dk) = self.dims2(k, "attention")?;
        let (vr, dv) = self.dims2(v, "attention")?;
        if groups == 0 || d != dk || kr != vr || qr % groups != 0 || kr % groups != 0 {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let (n, m) = (qr / groups, kr / groups);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![R::zero(); groups * n * m];
        let mut out = vec![R::zero(); qr * dv];
        for g in 0..groups {
            let qg = &qd[g * n * d..(g + 1) * n * d];
            let kg = &kd[g * m * d..(g + 1) * m * d];
            let vg = &vd[g * m * dv..(g + 1) * m * dv];
            let pg = &mut probs[g * n * m..(g + 1) * n * m];
            mm_bt(qg, kg, n, d, m, pg);
            for row in pg.chunks_mut(m) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(row);
            }
            mm(pg, vg, n, m, dv, &mut out[g * n * dv..(g + 1) * n * dv]);
        }
        let t = Tensor::new(&[qr, dv], out)?;
        t.check_finite("attention")?;
        let req = self.requires[q.0] || self.requires[k.0] || self.requires[v.0];
        Ok(self.push(t, Op::Attention { q, k, v, groups, scale, probs }, req))
    }

    /// `out[i] = x[index[i]]` over flattened storage, with the given shape.
    /// Covers reshape, transposition, patch extraction and slicing.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.iter().any(|&i| i >= src.len()) {
            return Err(Error::invalid("gather index out of bounds"));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let req = self.requires[x.0];
        Ok(self.push(t, Op::Gather { x, index }, req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != n {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        self.gather(x, (0..n).collect(), shape)
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embed")?;
        if ids.is_empty() {
            return Err(Error::Empty("embed ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(alloc::format!("token id {bad} outside table of {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let req = self.requires[table.0];
        Ok(self.push(t, Op::Embed { table, ids: ids.to_vec() }, req))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (rows, _) = self.value(first).as_matrix_dims();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix_dims();
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![R::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(&[rows, total], out)?;
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), req))
    }

    // ------------------------------------------------------------------
    // Reverse pass

    /// Populate gradients of a scalar `loss` with respect to every tracked
    /// leaf. Errors on a non-scalar loss or a second call without
    /// [`reset`](Self::reset).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss(self.values[loss.0].shape().to_vec()));
        }
        self.consumed = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) || !self.requires[i] {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gout);
        }
        Ok(())
    }

    fn slot(&mut self, v: Var) -> Option<&mut [R]> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
    }

    fn backprop_node(&mut self, i: usize, gout: &[R]) {
        // Temporarily move the op out so inputs' grads can be borrowed mutably.
        let op = core::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let va = self.values[a.0].data().to_vec();
                let vb = self.values[b.0].data().to_vec();
                let pick = |d: &[R], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                let ga: Vec<R> = gout
                    .iter()
                    .enumerate()
                    .map(|(j, &g)| match kind {
                        ElementwiseKind::Mul => g * pick(&vb, j),
                        _ => g,
                    })
                    .collect();
                let gb: Vec<R> = gout
                    .iter()
                    .enumerate()
                    .map(|(j, &g)| match kind {
                        ElementwiseKind::Sub => -g,
                        ElementwiseKind::Mul => g * pick(&va, j),
                        _ => g,
                    })
                    .collect();
                if let Some(s) = self.slot(a) {
                    accumulate_broadcast(s, &ga);
                }
                if let Some(s) = self.slot(b) {
                    accumulate_broadcast(s, &gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(s) = self.slot(*x) {
                    for (s, &g) in s.iter_mut().zip(gout) {
                        *s += g * c;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.values[x.0].data().to_vec();
                if let Some(s) = self.slot(*x) {
                    for ((s, &g), &v) in s.iter_mut().zip(gout).zip(&xv) {
                        let sig = R::one() / (R::one() + (-v).exp());
                        *s += g * sig * (R::one() + v * (R::one() - sig));
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.values[x.0].data().to_vec();
                if let Some(s) = self.slot(*x) {
                    for ((s, &g), &v) in s.iter_mut().zip(gout).zip(&xv) {
                        *s += g * (v + v);
                    }
                }
            }
            Op::Sqrt(x) => {
                let yv = self.values[i].data().to_vec();
                if let Some(s) = self.slot(*x) {
                    for ((s, &g), &y) in s.iter_mut().zip(gout).zip(&yv) {
                        *s += g / (y + y);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.values[a.0].shape().to_vec();
                let sb = self.values[b.0].shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires[a.0] {
                    let bv = self.values[b.0].data().to_vec();
                    let s = self.slot(a).expect("tracked");
                    mm_bt(gout, &bv, m, n, k, s);
                }
                if self.requires[b.0] {
                    let av = self.values[a.0].data().to_vec();
                    let s = self.slot(b).expect("tracked");
                    mm_at(&av, gout, m, k, n, s);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.values[i].data().to_vec();
                let cols = *self.values[i].shape().last().unwrap_or(&1);
                if let Some(s) = self.slot(*x) {
                    softmax_backward(&y, gout, cols, s);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.values[gain.0].len();
                let rows = rstd.len();
                let gv = self.values[gain.0].data().to_vec();
                if let Some(s) = self.slot(*gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.slot(*bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += gout[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.slot(*x) {
                    let dn = R::of(d as f64);
                    for r in 0..rows {
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for j in 0..d {
                            let dh = gout[r * d + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = gout[r * d + j] * gv[j];
                            s[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::AddTiled { x, p } => {
                let (prow, d) = self.values[p.0].as_matrix_dims();
                if let Some(s) = self.slot(*x) {
                    add_assign(s, gout);
                }
                if let Some(s) = self.slot(*p) {
                    for (r, row) in gout.chunks(d).enumerate() {
                        let pr = r % prow;
                        add_assign(&mut s[pr * d..(pr + 1) * d], row);
                    }
                }
            }
            Op::AddGrouped { x, g } => {
                let (grows, d) = self.values[g.0].as_matrix_dims();
                let rows = gout.len() / d;
                let per = rows / grows;
                if let Some(s) = self.slot(*x) {
                    add_assign(s, gout);
                }
                if let Some(s) = self.slot(*g) {
                    for (r, row) in gout.chunks(d).enumerate() {
                        let gr = r / per;
                        add_assign(&mut s[gr * d..(gr + 1) * d], row);
                    }
                }
            }
            Op::Sum(x) => {
                let g = gout[0];
                if let Some(s) = self.slot(*x) {
                    for v in s.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Mean(x) => {
                let n = R::of(self.values[x.0].len() as f64);
                let g = gout[0] / n;
                if let Some(s) = self.slot(*x) {
                    for v in s.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Attention { q, k, v, groups, scale, probs } => {
                let (q, k, v, groups, scale) = (*q, *k, *v, *groups, *scale);
                let (qr, d) = self.values[q.0].as_matrix_dims();
                let (kr, dv) = self.values[v.0].as_matrix_dims();
                let (n, m) = (qr / groups, kr / groups);
                let qd = self.values[q.0].data().to_vec();
                let kd = self.values[k.0].data().to_vec();
                let vd = self.values[v.0].data().to_vec();
                let mut gq = vec![R::zero(); qr * d];
                let mut gk = vec![R::zero(); kr * d];
                let mut gv = vec![R::zero(); kr * dv];
                let mut dp = vec![R::zero(); n * m];
                let mut ds = vec![R::zero(); n * m];
                for g in 0..groups {
                    let pg = &probs[g * n * m..(g + 1) * n * m];
                    let go = &gout[g * n * dv..(g + 1) * n * dv];
                    let vg = &vd[g * m * dv..(g + 1) * m * dv];
                    mm_at(pg, go, n, m, dv, &mut gv[g * m * dv..(g + 1) * m * dv]);
                    dp.iter_mut().for_each(|x| *x = R::zero());
                    mm_bt(go, vg, n, dv, m, &mut dp);
                    ds.iter_mut().for_each(|x| *x = R::zero());
                    softmax_backward(pg, &dp, m, &mut ds);
                    for x in ds.iter_mut() {
                        *x *= scale;
                    }
                    let kg = &kd[g * m * d..(g + 1) * m * d];
                    let qg = &qd[g * n * d..(g + 1) * n * d];
                    mm(&ds, kg, n, m, d, &mut gq[g * n * d..(g + 1) * n * d]);
                    mm_at(&ds, qg, n, m, d, &mut gk[g * m * d..(g + 1) * m * d]);
                }
                if let Some(s) = self.slot(q) {
                    add_assign(s, &gq);
                }
                if let Some(s) = self.slot(k) {
                    add_assign(s, &gk);
                }
                if let Some(s) = self.slot(v) {
                    add_assign(s, &gv);
                }
            }
            Op::Gather { x, index } => {
                if let Some(s) = self.slot(*x) {
                    for (&j, &g) in index.iter().zip(gout) {
                        s[j] += g;
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = self.values[table.0].shape()[1];
                if let Some(s) = self.slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut s[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.values[i].shape()[0];
                let total = self.values[i].shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.values[p.0].len() / rows;
                    if let Some(s) = self.slot(p) {
                        for r in 0..rows {
                            add_assign(&mut s[r * w..(r + 1) * w], &gout[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
        }
        self.ops[i] = op;
    }
}

fn add_assign<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate_broadcast<R: Real>(dst: &mut [R], g: &[R]) {
    if dst.len() == g.len() {
        add_assign(dst, g);
    } else {
        dst[0] += g.iter().copied().sum::<R>();
    }
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ds += y ⊙ (dy − rowsum(dy ⊙ y))` for row-softmax outputs `y`.
fn softmax_backward<R: Real>(y: &[R], dy: &[R], cols: usize, ds: &mut [R]) {
    for ((yr, dyr), dsr) in y.chunks(cols).zip(dy.chunks(cols)).zip(ds.chunks_mut(cols)) {
        let dot: R = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in dsr.iter_mut().zip(yr).zip(dyr) {
            *d += a * (b - dot);
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    R::gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn mm_bt<R: Real>(a: &[R], b: &[R], m: usize, n: usize, k: usize, out: &mut [R]) {
    R::gemm_acc(m, n, k, a, (n as isize, 1), b, (1, n as isize), out);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_at<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    R::gemm_acc(k, m, n, a, (1, k as isize), b, (n as isize, 1), out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_is_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.elementwise(ElementwiseKind::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 1.0]));
        let y = tape.silu(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        // 1 / (1 + e^-1)
        assert!((tape.value(y).data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn scalar_broadcast_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.constant(t(&[1], &[2.0]));
        let c = tape.elementwise(ElementwiseKind::Scale, a, Some(s)).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0, 6.0]);
        let b = tape.constant(t(&[2], &[1.0, 1.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[f64::MAX]));
        assert_eq!(tape.mul(a, a), Err(Error::NonFinite("elementwise")));
        let n = tape.constant(t(&[1], &[-1.0]));
        assert!(tape.sqrt(n).is_err());
    }

    #[test]
    fn matmul_identity_and_pick() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = tape.constant(t(&[2, 1], &[0.0, 5.0]));
        let o = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(o).data(), &[0.0]);
        assert!(tape.matmul(r, r).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[0.0, 0.0, 2f64.ln(), 0.0, 1000.0, 1000.0]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[0..2], &[0.5, 0.5]);
        assert!((d[2] - 2.0 / 3.0).abs() < 1e-15 && (d[3] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&d[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let x = tape.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[0..2], &[0.0, 0.0]);
        assert!((d[2] - 1.0).abs() < 1e-9 && (d[3] + 1.0).abs() < 1e-9);
        let g3 = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(tape.layer_norm(x, g3, b, 1e-5).is_err());
    }

    #[test]
    fn power_rule_and_tracking_contract() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let c = tape.constant(t(&[1], &[2.0]));
        let y = tape.square(x).unwrap();
        let z = tape.mul(y, c).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[12.0][..]));
        assert_eq!(tape.grad(c), None);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.backward(l), Err(Error::TapeConsumed));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn attention_single_key_copies_value() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[2, 2], &[0.3, -1.0, 2.0, 0.5]));
        let k = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let v = tape.constant(t(&[1, 3], &[7.0, 8.0, 9.0]));
        let o = tape.attention(q, k, v, 1, 0.5).unwrap();
        assert_eq!(tape.value(o).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
        assert_eq!(tape.attention_probs(o).unwrap(), &[1.0, 1.0]);
    }
}
