//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. `backward` walks the tape in reverse and
//! accumulates gradients into the [`ParamStore`].

use super::kernels::{axpy, dot, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, softmax_row, softmax_row_backward, transpose};
use super::param::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use super::KernelError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatBatched { a: Var, b: Var, batch: usize },
    ConvPatchify { image: Var, kernel: Var, patch: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, batch: usize, tq: usize, tk: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, weights: Vec<T> },
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> KernelError {
    KernelError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node from `len` onward, so a prefix of the tape can be
    /// reused for several continuations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for slot in &mut self.param_vars {
            if matches!(slot, Some(v) if v.0 >= len) {
                *slot = None;
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients flow into it but are not stored anywhere.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated requests for the same parameter return the
    /// same node, so tied weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a[..., m, k] · b[k, n]` or `a[..., m, k] · b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if k != kb || (b_batched && lead_a != lead_b) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let a_blk = &av[bi * m * k..(bi + 1) * m * k];
                let b_blk = if b_batched { &bv[bi * k * n..(bi + 1) * k * n] } else { bv };
                gemm_nn_acc(m, k, n, a_blk, b_blk, &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, batch, m, k, n, b_batched }))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, KernelError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", &s, &[]));
        }
        let data = transpose(s[0], s[1], self.value(a).data());
        let value = Tensor::new(&[s[1], s[0]], data)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a vector `b[n]` to every row of `a[..., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rank() != 1 || va.last_dim() != vb.len() {
            return Err(shape_err("add_row", va.shape(), vb.shape()));
        }
        let n = vb.len();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    /// Side of the kink of every ReLU input element, in recording order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|v| v.data().iter().map(|&x| x > T::zero()))
            .collect()
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.last_dim();
        let mut value = va.clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_row(row);
        }
        self.push(value, Op::Softmax(a))
    }

    /// Layer normalization over the last axis with ε = 1e-6.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, KernelError> {
        let vx = self.value(x);
        let n = vx.last_dim();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let eps = T::of(1e-6);
        let nf = T::of(n as f64);
        let rows = vx.rows();
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, KernelError> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(shape_err("gather", vt.shape(), &[ids.len()]));
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(KernelError::InvalidArgument(format!(
                    "gather index {id} out of range for table of {rows} rows"
                )));
            }
            out.extend_from_slice(vt.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Per-example row concatenation: `a[B·m1, d]` and `b[B·m2, d]` become
    /// `[B·(m1+m2), d]` with each example's rows of `a` followed by its rows
    /// of `b`.
    pub fn concat_batched(&mut self, a: Var, b: Var, batch: usize) -> Result<Var, KernelError> {
        let (va, vb) = (self.value(a), self.value(b));
        let d = va.last_dim();
        if va.rank() != 2
            || vb.rank() != 2
            || vb.last_dim() != d
            || batch == 0
            || va.rows() % batch != 0
            || vb.rows() % batch != 0
        {
            return Err(shape_err("concat_batched", va.shape(), vb.shape()));
        }
        let (m1, m2) = (va.rows() / batch, vb.rows() / batch);
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for bi in 0..batch {
            out.extend_from_slice(&va.data()[bi * m1 * d..(bi + 1) * m1 * d]);
            out.extend_from_slice(&vb.data()[bi * m2 * d..(bi + 1) * m2 * d]);
        }
        let value = Tensor::new(&[batch * (m1 + m2), d], out)?;
        Ok(self.push(value, Op::ConcatBatched { a, b, batch }))
    }

    /// Non-overlapping patch convolution (stride = kernel size).
    ///
    /// `image` is `[B, H, W, C]`, `kernel` is `[p·p·C, D]` with rows ordered
    /// by (row offset, column offset, channel). The result is
    /// `[B·(H/p)·(W/p), D]` with patches in row-major order.
    pub fn conv_patchify(&mut self, image: Var, kernel: Var, patch: usize) -> Result<Var, KernelError> {
        let (vi, vk) = (self.value(image), self.value(kernel));
        if vi.rank() != 4 || vk.rank() != 2 || patch == 0 {
            return Err(shape_err("conv_patchify", vi.shape(), vk.shape()));
        }
        let [b, h, w, c] = [vi.shape()[0], vi.shape()[1], vi.shape()[2], vi.shape()[3]];
        let d = vk.shape()[1];
        if h % patch != 0 || w % patch != 0 || vk.shape()[0] != patch * patch * c {
            return Err(shape_err("conv_patchify", vi.shape(), vk.shape()));
        }
        let (ph, pw) = (h / patch, w / patch);
        let img = vi.data();
        let ker = vk.data();
        let mut out = vec![T::zero(); b * ph * pw * d];
        for bi in 0..b {
            for py in 0..ph {
                for px in 0..pw {
                    let o = ((bi * ph + py) * pw + px) * d;
                    let out_row = &mut out[o..o + d];
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let base = ((bi * h + py * patch + dy) * w + px * patch + dx) * c;
                            for ch in 0..c {
                                let kr = ((dy * patch + dx) * c + ch) * d;
                                axpy(img[base + ch], &ker[kr..kr + d], out_row);
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b * ph * pw, d], out)?;
        Ok(self.push(value, Op::ConvPatchify { image, kernel, patch }))
    }

    /// Multi-head scaled dot-product attention over a batch.
    ///
    /// `q` is `[B·Tq, D]`, `k` and `v` are `[B·Tk, D]`; `mask` is an additive
    /// `[B, Tq, Tk]` tensor whose entries are 0 or `-inf`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Tensor<T>, heads: usize) -> Result<Var, KernelError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if mask.rank() != 3 || vq.rank() != 2 || vk.rank() != 2 || vv.shape() != vk.shape() {
            return Err(shape_err("attention", vq.shape(), vk.shape()));
        }
        let [batch, tq, tk] = [mask.shape()[0], mask.shape()[1], mask.shape()[2]];
        let d = vq.last_dim();
        if vq.rows() != batch * tq || vk.rows() != batch * tk || vk.last_dim() != d || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", vq.shape(), vk.shape()));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut out = vec![T::zero(); batch * tq * d];
        let (qd, kd, vd, md) = (vq.data(), vk.data(), vv.data(), mask.data());
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let mrow = &md[(b * tq + i) * tk..(b * tq + i + 1) * tk];
                    for j in 0..tk {
                        p[j] = if mrow[j] == T::neg_infinity() {
                            T::neg_infinity()
                        } else {
                            let krow = &kd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                            dot(qrow, krow) * scale + mrow[j]
                        };
                    }
                    softmax_row(p);
                    let orow = &mut out[(b * tq + i) * d + off..(b * tq + i) * d + off + dh];
                    for j in 0..tk {
                        if p[j] != T::zero() {
                            let vrow = &vd[(b * tk + j) * d + off..(b * tk + j) * d + off + dh];
                            axpy(p[j], vrow, orow);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[batch * tq, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, batch, tq, tk, probs }))
    }

    /// Mean token negative log-likelihood over positions with `mask = 1`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[T]) -> Result<Var, KernelError> {
        let vl = self.value(logits);
        let vocab = vl.last_dim();
        let rows = vl.rows();
        if vl.rank() != 2 || targets.len() != rows || mask.len() != rows {
            return Err(shape_err("cross_entropy_masked", vl.shape(), &[targets.len()]));
        }
        let count: T = mask.iter().copied().sum();
        if count == T::zero() {
            return Err(KernelError::EmptyMask);
        }
        let mut probs = vl.data().to_vec();
        let mut loss = T::zero();
        let mut weights = vec![T::zero(); rows];
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            if targets[r] >= vocab {
                return Err(KernelError::InvalidArgument(format!(
                    "target id {} outside vocabulary of {vocab}",
                    targets[r]
                )));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            if mask[r] != T::zero() {
                loss += mask[r] * (lse - row[targets[r]]);
            }
            weights[r] = mask[r] / count;
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / count);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, weights }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Reverse pass from a scalar. Parameter gradients are added to `store`
    /// (accumulating across calls until [`ParamStore::zero_grad`]).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>, KernelError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(KernelError::NonScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], store: &mut ParamStore<T>) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.get_mut(*id).grad.add_assign(g),
            Op::MatMul { a, b, batch, m, k, n, b_batched } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let b_blk = |bi: usize| {
                    if *b_batched {
                        &bv[bi * k * n..(bi + 1) * k * n]
                    } else {
                        bv
                    }
                };
                {
                    let da = self.grad_slot(grads, *a).data_mut();
                    for bi in 0..*batch {
                        gemm_nt_acc(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            b_blk(bi),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                let db = self.grad_slot(grads, *b).data_mut();
                for bi in 0..*batch {
                    let out = if *b_batched { &mut db[bi * k * n..(bi + 1) * k * n] } else { &mut db[..] };
                    gemm_tn_acc(m, k, n, &av[bi * m * k..(bi + 1) * m * k], &gd[bi * m * n..(bi + 1) * m * n], out);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let t = transpose(s[0], s[1], gd);
                axpy(T::one(), &t, self.grad_slot(grads, *a).data_mut());
            }
            Op::Add(a, b) => {
                axpy(T::one(), gd, self.grad_slot(grads, *a).data_mut());
                axpy(T::one(), gd, self.grad_slot(grads, *b).data_mut());
            }
            Op::AddRow(a, b) => {
                axpy(T::one(), gd, self.grad_slot(grads, *a).data_mut());
                let db = self.grad_slot(grads, *b).data_mut();
                let n = db.len();
                for row in gd.chunks(n) {
                    axpy(T::one(), row, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                {
                    let da = self.grad_slot(grads, *a).data_mut();
                    for ((d, &gi), &bi) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gi * bi;
                    }
                }
                let db = self.grad_slot(grads, *b).data_mut();
                for ((d, &gi), &ai) in db.iter_mut().zip(gd).zip(av) {
                    *d += gi * ai;
                }
            }
            Op::Scale(a, s) => axpy(*s, gd, self.grad_slot(grads, *a).data_mut()),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let da = self.grad_slot(grads, *a).data_mut();
                for ((d, &gi), &x) in da.iter_mut().zip(gd).zip(av) {
                    if x > T::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.last_dim();
                let y = node.value.data();
                let da = self.grad_slot(grads, *a).data_mut();
                for ((yr, gr), dr) in y.chunks(n).zip(gd.chunks(n)).zip(da.chunks_mut(n)) {
                    softmax_row_backward(yr, gr, dr);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = node.value.last_dim();
                let nf = T::of(n as f64);
                let gv = self.value(*gain).data().to_vec();
                {
                    let dg = self.grad_slot(grads, *gain).data_mut();
                    for (hr, gr) in xhat.chunks(n).zip(gd.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                {
                    let db = self.grad_slot(grads, *bias).data_mut();
                    for gr in gd.chunks(n) {
                        axpy(T::one(), gr, db);
                    }
                }
                let dx = self.grad_slot(grads, *x).data_mut();
                let mut dxhat = vec![T::zero(); n];
                for (r, ((hr, gr), dr)) in xhat.chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    for j in 0..n {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dh: T = dot(&dxhat, hr);
                    let c = inv_std[r] / nf;
                    for j in 0..n {
                        dr[j] += c * (nf * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let dt = self.grad_slot(grads, *table);
                let d = dt.last_dim();
                let dtd = dt.data_mut();
                for (i, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &gd[i * d..(i + 1) * d], &mut dtd[id * d..(id + 1) * d]);
                }
            }
            Op::ConcatBatched { a, b, batch } => {
                let d = node.value.last_dim();
                let m1 = self.value(*a).rows() / batch;
                let m2 = self.value(*b).rows() / batch;
                {
                    let da = self.grad_slot(grads, *a).data_mut();
                    for bi in 0..*batch {
                        let src = &gd[bi * (m1 + m2) * d..][..m1 * d];
                        axpy(T::one(), src, &mut da[bi * m1 * d..(bi + 1) * m1 * d]);
                    }
                }
                let db = self.grad_slot(grads, *b).data_mut();
                for bi in 0..*batch {
                    let src = &gd[(bi * (m1 + m2) + m1) * d..][..m2 * d];
                    axpy(T::one(), src, &mut db[bi * m2 * d..(bi + 1) * m2 * d]);
                }
            }
            Op::ConvPatchify { image, kernel, patch } => {
                let patch = *patch;
                let vi = self.value(*image);
                let vk = self.value(*kernel);
                let [b, h, w, c] = [vi.shape()[0], vi.shape()[1], vi.shape()[2], vi.shape()[3]];
                let d = vk.shape()[1];
                let (ph, pw) = (h / patch, w / patch);
                let (img, ker) = (vi.data(), vk.data());
                {
                    let dk = self.grad_slot(grads, *kernel).data_mut();
                    for bi in 0..b {
                        for py in 0..ph {
                            for px in 0..pw {
                                let grow = &gd[((bi * ph + py) * pw + px) * d..][..d];
                                for dy in 0..patch {
                                    for dx in 0..patch {
                                        let base = ((bi * h + py * patch + dy) * w + px * patch + dx) * c;
                                        for ch in 0..c {
                                            let kr = ((dy * patch + dx) * c + ch) * d;
                                            axpy(img[base + ch], grow, &mut dk[kr..kr + d]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let di = self.grad_slot(grads, *image).data_mut();
                for bi in 0..b {
                    for py in 0..ph {
                        for px in 0..pw {
                            let grow = &gd[((bi * ph + py) * pw + px) * d..][..d];
                            for dy in 0..patch {
                                for dx in 0..patch {
                                    let base = ((bi * h + py * patch + dy) * w + px * patch + dx) * c;
                                    for ch in 0..c {
                                        let kr = ((dy * patch + dx) * c + ch) * d;
                                        di[base + ch] += dot(&ker[kr..kr + d], grow);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, batch, tq, tk, probs } => {
                let (heads, batch, tq, tk) = (*heads, *batch, *tq, *tk);
                let d = node.value.last_dim();
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); tk];
                let mut ds = vec![T::zero(); tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                            let go = &gd[(b * tq + i) * d + off..][..dh];
                            for j in 0..tk {
                                if p[j] == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                let vrow = &vd[(b * tk + j) * d + off..][..dh];
                                dp[j] = dot(go, vrow);
                                axpy(p[j], go, &mut dv[(b * tk + j) * d + off..][..dh]);
                            }
                            ds.iter_mut().for_each(|x| *x = T::zero());
                            softmax_row_backward(p, &dp, &mut ds);
                            let qrow = &qd[(b * tq + i) * d + off..][..dh];
                            for j in 0..tk {
                                if ds[j] == T::zero() {
                                    continue;
                                }
                                let sj = ds[j] * scale;
                                let krow = &kd[(b * tk + j) * d + off..][..dh];
                                axpy(sj, krow, &mut dq[(b * tq + i) * d + off..][..dh]);
                                axpy(sj, qrow, &mut dk[(b * tk + j) * d + off..][..dh]);
                            }
                        }
                    }
                }
                axpy(T::one(), &dq, self.grad_slot(grads, *q).data_mut());
                axpy(T::one(), &dk, self.grad_slot(grads, *k).data_mut());
                axpy(T::one(), &dv, self.grad_slot(grads, *v).data_mut());
            }
            Op::CrossEntropy { logits, targets, probs, weights } => {
                let g0 = gd[0];
                let dl = self.grad_slot(grads, *logits);
                let vocab = dl.last_dim();
                let dld = dl.data_mut();
                for (r, (pr, dr)) in probs.chunks(vocab).zip(dld.chunks_mut(vocab)).enumerate() {
                    let w = weights[r] * g0;
                    if w == T::zero() {
                        continue;
                    }
                    axpy(w, pr, dr);
                    dr[targets[r]] -= w;
                }
            }
            Op::SumAll(a) => {
                let g0 = gd[0];
                for x in self.grad_slot(grads, *a).data_mut() {
                    *x += g0;
                }
            }
        }
    }
}
