//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every differentiable operation of one forward pass as a
//! node holding the output [`Tensor`] plus the op that produced it. Calling
//! [`Tape::backward`] on a scalar node walks the nodes in exact reverse
//! execution order and accumulates gradients into every reachable node that
//! tracks them. All kernels are sequential with a fixed summation order, so
//! two identical tapes produce bitwise-identical gradients.
//!
//! Matmul supports leading batch dimensions (equal or broadcastable); the
//! elementwise ops broadcast in the usual trailing-aligned way.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: S },
    Neg { a: TensorId },
    Square { a: TensorId },
    Gelu { a: TensorId },
    Sum { a: TensorId, axes: Vec<usize> },
    Mean { a: TensorId, axes: Vec<usize> },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { a: TensorId, gain: TensorId, bias: TensorId, axis: usize, eps: S },
    Reshape { a: TensorId },
    Permute { a: TensorId, axes: Vec<usize> },
    Concat { parts: Vec<TensorId>, axis: usize },
    Narrow { a: TensorId, axis: usize, start: usize },
    GatherRows { table: TensorId, indices: Vec<usize> },
}

struct Node<S: Scalar> {
    tensor: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as a leaf, keeping its tracking flag.
    pub fn input(&mut self, t: &Tensor<S>) -> TensorId {
        self.push(t.clone(), Op::Leaf)
    }

    /// Leaf from raw parts.
    pub fn input_parts(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<TensorId> {
        let mut t = Tensor::new(shape, data)?;
        t.set_requires_grad(requires_grad);
        Ok(self.push(t, Op::Leaf))
    }

    /// Untracked leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<TensorId> {
        self.input_parts(shape, data, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        self.push(Tensor::zeros(shape), Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        self.nodes[id.0].tensor.data()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    /// Detached copy of a node's value.
    pub fn value(&self, id: TensorId) -> Tensor<S> {
        let t = &self.nodes[id.0].tensor;
        let mut out = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("node is consistent");
        out.set_requires_grad(false);
        out
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> TensorId {
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape");
        t.set_requires_grad(requires_grad);
        self.push(t, op)
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad())
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// `[.., n, k] · [.., k, m] -> [.., n, m]` with broadcastable leading
    /// batch dims. Gradients: dA = dC·Bᵀ, dB = Aᵀ·dC per batch.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let data = plan.forward(self.data(a), self.data(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push_result(plan.out_shape.clone(), data, rg, Op::Matmul { a, b }))
    }

    /// Swaps the last two axes (rank >= 2).
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Dimension(format!(
                "transpose requires rank >= 2, got shape {:?}",
                self.shape(a)
            )));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x + y, BinKind::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x - y, BinKind::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, |x, y| x * y, BinKind::Mul)
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(S, S) -> S,
        kind: BinKind,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let data = broadcast_zip(self.data(a), self.shape(a), self.data(b), self.shape(b), &out_shape, f);
        let rg = self.any_grad(&[a, b]);
        let op = match kind {
            BinKind::Add => Op::Add { a, b },
            BinKind::Sub => Op::Sub { a, b },
            BinKind::Mul => Op::Mul { a, b },
        };
        Ok(self.push_result(out_shape, data, rg, op))
    }

    pub fn scale(&mut self, a: TensorId, factor: S) -> TensorId {
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        let rg = self.requires_grad(a);
        self.push_result(self.shape(a).to_vec(), data, rg, Op::Scale { a, factor })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| -x).collect();
        let rg = self.requires_grad(a);
        self.push_result(self.shape(a).to_vec(), data, rg, Op::Neg { a })
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| x * x).collect();
        let rg = self.requires_grad(a);
        self.push_result(self.shape(a).to_vec(), data, rg, Op::Square { a })
    }

    /// GELU via the tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| gelu_forward(x)).collect();
        let rg = self.requires_grad(a);
        self.push_result(self.shape(a).to_vec(), data, rg, Op::Gelu { a })
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, true)
    }

    fn reduce(&mut self, a: TensorId, axes: &[usize], take_mean: bool) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        let axes = normalize_axes(axes, in_shape.len())?;
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &e)| e)
            .collect();
        let out_numel: usize = out_shape.iter().product::<usize>().max(1);
        let mut out = vec![S::zero(); out_numel];
        let map = ReduceMap::new(&in_shape, &axes);
        for (i, &x) in self.data(a).iter().enumerate() {
            out[map.out_index(i)] += x;
        }
        let count: usize = axes.iter().map(|&d| in_shape[d]).product::<usize>().max(1);
        if take_mean {
            let inv = S::from_f64(1.0 / count as f64);
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.requires_grad(a);
        let op = if take_mean { Op::Mean { a, axes } } else { Op::Sum { a, axes } };
        Ok(self.push_result(out_shape, out, rg, op))
    }

    // ── normalizations ──────────────────────────────────────────────────

    /// Softmax along `axis`; rows sum to 1.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = slice_dims(&shape, axis);
        let src = self.data(a);
        let mut out = vec![S::zero(); src.len()];
        let mut slice = vec![S::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, v) in slice.iter_mut().enumerate() {
                    *v = src[base + j * inner];
                }
                let max = slice.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let mut denom = S::zero();
                for v in slice.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                for (j, &v) in slice.iter().enumerate() {
                    out[base + j * inner] = v / denom;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push_result(shape, out, rg, Op::Softmax { a, axis }))
    }

    /// Layer normalization over `axis` followed by an affine map:
    /// `gain * (x - mean) / sqrt(var + eps) + bias`. `gain` and `bias` are
    /// vectors along the normalized axis.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        axis: usize,
        eps: S,
    ) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("layer_norm axis {} out of range for {:?}", axis, shape)));
        }
        if eps <= S::zero() {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        let len = shape[axis];
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must have shape [{}], got {:?} and {:?}",
                len,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (outer, _, inner) = slice_dims(&shape, axis);
        let src = self.data(a);
        let gain_data = self.data(gain).to_vec();
        let bias_data = self.data(bias).to_vec();
        let mut out = vec![S::zero(); src.len()];
        let inv_len = S::from_f64(1.0 / len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mean = S::zero();
                for j in 0..len {
                    mean += src[base + j * inner];
                }
                mean *= inv_len;
                let mut var = S::zero();
                for j in 0..len {
                    let d = src[base + j * inner] - mean;
                    var += d * d;
                }
                var *= inv_len;
                let inv_std = (var + eps).sqrt().recip();
                for j in 0..len {
                    let xhat = (src[base + j * inner] - mean) * inv_std;
                    out[base + j * inner] = gain_data[j] * xhat + bias_data[j];
                }
            }
        }
        let rg = self.any_grad(&[a, gain, bias]);
        Ok(self.push_result(shape, out, rg, Op::LayerNorm { a, gain, bias, axis, eps }))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data(a).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                new_shape
            )));
        }
        let data = self.data(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push_result(new_shape, data, rg, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::Dimension(format!("invalid permutation {:?} for shape {:?}", axes, in_shape)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&d| in_shape[d]).collect();
        let src = self.data(a);
        let mut out = vec![S::zero(); src.len()];
        permute_copy(src, &in_shape, axes, &mut out);
        let rg = self.requires_grad(a);
        Ok(self.push_result(out_shape, out, rg, Op::Permute { a, axes: axes.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!("concat axis {} out of range for {:?}", axis, first)));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::Dimension(format!(
                    "concat shapes {:?} and {:?} differ off axis {}",
                    first,
                    s,
                    axis
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = slice_dims(&out_shape, axis);
        let total: usize = out_shape.iter().product();
        let mut out = vec![S::zero(); total];
        let row = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0usize;
            for &p in parts {
                let plen = self.shape(p)[axis] * inner;
                let src = &self.data(p)[o * plen..(o + 1) * plen];
                out[o * row + offset..o * row + offset + plen].copy_from_slice(src);
                offset += plen;
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push_result(out_shape, out, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let in_shape = self.shape(a).to_vec();
        if axis >= in_shape.len() || start + len > in_shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow [{}, {}) on axis {} out of range for {:?}",
                start,
                start + len,
                axis,
                in_shape
            )));
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let (outer, full, inner) = slice_dims(&in_shape, axis);
        let src = self.data(a);
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = o * full * inner + start * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push_result(out_shape, out, rg, Op::Narrow { a, axis, start }))
    }

    /// Gathers rows of a `[rows, cols]` table. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("gather_rows needs a 2-d table, got {:?}", shape)));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Usage(format!("row index {} out of range for table with {} rows", bad, rows)));
        }
        let src = self.data(table);
        let mut out = vec![S::zero(); indices.len() * cols];
        for (i, &r) in indices.iter().enumerate() {
            out[i * cols..(i + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push_result(vec![indices.len(), cols], out, rg, Op::GatherRows { table, indices: indices.to_vec() }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates `grad` on every reachable
    /// node that requires gradients; untracked nodes are left untouched.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            // Nothing upstream tracks gradients.
            return Ok(());
        }
        self.nodes[loss.0].tensor.set_grad(Some(vec![S::one()]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            let Some(grad) = self.nodes[i].tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            let contributions = self.op_backward(i, &op, &grad);
            for (target, delta) in contributions {
                self.nodes[target.0].tensor.accumulate_grad(&delta);
            }
        }
        Ok(())
    }

    fn op_backward(&self, node: usize, op: &Op<S>, grad: &[S]) -> Vec<(TensorId, Vec<S>)> {
        let mut out: Vec<(TensorId, Vec<S>)> = Vec::new();
        let wants = |t: &Self, id: TensorId| t.nodes[id.0].tensor.requires_grad();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let plan = MatmulPlan::new(self.shape(*a), self.shape(*b)).expect("validated at forward");
                if wants(self, *a) {
                    out.push((*a, plan.grad_a(grad, self.data(*b))));
                }
                if wants(self, *b) {
                    out.push((*b, plan.grad_b(self.data(*a), grad)));
                }
            }
            Op::Add { a, b } => {
                let os = self.shape(TensorId(node)).to_vec();
                if wants(self, *a) {
                    out.push((*a, reduce_to_shape(grad, &os, self.shape(*a))));
                }
                if wants(self, *b) {
                    out.push((*b, reduce_to_shape(grad, &os, self.shape(*b))));
                }
            }
            Op::Sub { a, b } => {
                let os = self.shape(TensorId(node)).to_vec();
                if wants(self, *a) {
                    out.push((*a, reduce_to_shape(grad, &os, self.shape(*a))));
                }
                if wants(self, *b) {
                    let neg: Vec<S> = grad.iter().map(|&g| -g).collect();
                    out.push((*b, reduce_to_shape(&neg, &os, self.shape(*b))));
                }
            }
            Op::Mul { a, b } => {
                let os = self.shape(TensorId(node)).to_vec();
                if wants(self, *a) {
                    let full = broadcast_zip(grad, &os, self.data(*b), self.shape(*b), &os, |g, y| g * y);
                    out.push((*a, reduce_to_shape(&full, &os, self.shape(*a))));
                }
                if wants(self, *b) {
                    let full = broadcast_zip(grad, &os, self.data(*a), self.shape(*a), &os, |g, x| g * x);
                    out.push((*b, reduce_to_shape(&full, &os, self.shape(*b))));
                }
            }
            Op::Scale { a, factor } => {
                if wants(self, *a) {
                    out.push((*a, grad.iter().map(|&g| g * *factor).collect()));
                }
            }
            Op::Neg { a } => {
                if wants(self, *a) {
                    out.push((*a, grad.iter().map(|&g| -g).collect()));
                }
            }
            Op::Square { a } => {
                if wants(self, *a) {
                    let two = S::from_f64(2.0);
                    let d = self.data(*a).iter().zip(grad).map(|(&x, &g)| two * x * g).collect();
                    out.push((*a, d));
                }
            }
            Op::Gelu { a } => {
                if wants(self, *a) {
                    let d = self.data(*a).iter().zip(grad).map(|(&x, &g)| gelu_backward(x) * g).collect();
                    out.push((*a, d));
                }
            }
            Op::Sum { a, axes } | Op::Mean { a, axes } => {
                if wants(self, *a) {
                    let in_shape = self.shape(*a).to_vec();
                    let map = ReduceMap::new(&in_shape, axes);
                    let scale = if matches!(op, Op::Mean { .. }) {
                        let count: usize = axes.iter().map(|&d| in_shape[d]).product::<usize>().max(1);
                        S::from_f64(1.0 / count as f64)
                    } else {
                        S::one()
                    };
                    let numel: usize = in_shape.iter().product();
                    let mut d = vec![S::zero(); numel];
                    for (i, v) in d.iter_mut().enumerate() {
                        *v = grad[map.out_index(i)] * scale;
                    }
                    out.push((*a, d));
                }
            }
            Op::Softmax { a, axis } => {
                if wants(self, *a) {
                    let shape = self.shape(TensorId(node)).to_vec();
                    let y = self.data(TensorId(node));
                    let (outer, len, inner) = slice_dims(&shape, *axis);
                    let mut d = vec![S::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = S::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += grad[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                d[idx] = y[idx] * (grad[idx] - dot);
                            }
                        }
                    }
                    out.push((*a, d));
                }
            }
            Op::LayerNorm { a, gain, bias, axis, eps } => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = slice_dims(&shape, *axis);
                let x = self.data(*a);
                let gain_data = self.data(*gain);
                let inv_len = S::from_f64(1.0 / len as f64);
                let want_x = wants(self, *a);
                let want_gain = wants(self, *gain);
                let want_bias = wants(self, *bias);
                let mut dx = if want_x { vec![S::zero(); x.len()] } else { Vec::new() };
                let mut dgain = if want_gain { vec![S::zero(); len] } else { Vec::new() };
                let mut dbias = if want_bias { vec![S::zero(); len] } else { Vec::new() };
                let mut xhat = vec![S::zero(); len];
                let mut dxhat = vec![S::zero(); len];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut mean = S::zero();
                        for j in 0..len {
                            mean += x[base + j * inner];
                        }
                        mean *= inv_len;
                        let mut var = S::zero();
                        for j in 0..len {
                            let d = x[base + j * inner] - mean;
                            var += d * d;
                        }
                        var *= inv_len;
                        let inv_std = (var + *eps).sqrt().recip();
                        for j in 0..len {
                            xhat[j] = (x[base + j * inner] - mean) * inv_std;
                            dxhat[j] = grad[base + j * inner] * gain_data[j];
                        }
                        if want_gain || want_bias {
                            for j in 0..len {
                                let g = grad[base + j * inner];
                                if want_gain {
                                    dgain[j] += g * xhat[j];
                                }
                                if want_bias {
                                    dbias[j] += g;
                                }
                            }
                        }
                        if want_x {
                            let mut sum_dxhat = S::zero();
                            let mut sum_dxhat_xhat = S::zero();
                            for j in 0..len {
                                sum_dxhat += dxhat[j];
                                sum_dxhat_xhat += dxhat[j] * xhat[j];
                            }
                            for j in 0..len {
                                let n = S::from_f64(len as f64);
                                dx[base + j * inner] = inv_std * inv_len
                                    * (n * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                if want_x {
                    out.push((*a, dx));
                }
                if want_gain {
                    out.push((*gain, dgain));
                }
                if want_bias {
                    out.push((*bias, dbias));
                }
            }
            Op::Reshape { a } => {
                if wants(self, *a) {
                    out.push((*a, grad.to_vec()));
                }
            }
            Op::Permute { a, axes } => {
                if wants(self, *a) {
                    let out_shape = self.shape(TensorId(node)).to_vec();
                    let mut inverse = vec![0usize; axes.len()];
                    for (d, &src) in axes.iter().enumerate() {
                        inverse[src] = d;
                    }
                    let mut d = vec![S::zero(); grad.len()];
                    permute_copy(grad, &out_shape, &inverse, &mut d);
                    out.push((*a, d));
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(TensorId(node)).to_vec();
                let (outer, total_len, inner) = slice_dims(&out_shape, *axis);
                let row = total_len * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let plen = self.shape(p)[*axis] * inner;
                    if wants(self, p) {
                        let mut d = vec![S::zero(); outer * plen];
                        for o in 0..outer {
                            d[o * plen..(o + 1) * plen]
                                .copy_from_slice(&grad[o * row + offset..o * row + offset + plen]);
                        }
                        out.push((p, d));
                    }
                    offset += plen;
                }
            }
            Op::Narrow { a, axis, start } => {
                if wants(self, *a) {
                    let in_shape = self.shape(*a).to_vec();
                    let out_shape = self.shape(TensorId(node)).to_vec();
                    let (outer, full, inner) = slice_dims(&in_shape, *axis);
                    let len = out_shape[*axis];
                    let numel: usize = in_shape.iter().product();
                    let mut d = vec![S::zero(); numel];
                    for o in 0..outer {
                        let dst_base = o * full * inner + start * inner;
                        let src_base = o * len * inner;
                        d[dst_base..dst_base + len * inner]
                            .copy_from_slice(&grad[src_base..src_base + len * inner]);
                    }
                    out.push((*a, d));
                }
            }
            Op::GatherRows { table, indices } => {
                if wants(self, *table) {
                    let shape = self.shape(*table);
                    let cols = shape[1];
                    let mut d = vec![S::zero(); shape[0] * cols];
                    for (i, &r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            d[r * cols + c] += grad[i * cols + c];
                        }
                    }
                    out.push((*table, d));
                }
            }
        }
        out
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
}

// ── gelu ────────────────────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_forward<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_backward<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    let du = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * sech2 * du
}

// ── shape helpers ───────────────────────────────────────────────────────

/// (product of dims before `axis`, extent of `axis`, product after).
fn slice_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut v = axes.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.len() != axes.len() {
        return Err(Error::Dimension(format!("duplicate reduction axes {:?}", axes)));
    }
    if let Some(&bad) = v.iter().find(|&&d| d >= rank) {
        return Err(Error::Dimension(format!("axis {} out of range for rank {}", bad, rank)));
    }
    Ok(v)
}

/// Maps flat input indices to flat output indices for a reduction.
struct ReduceMap {
    in_strides: Vec<usize>,
    in_shape: Vec<usize>,
    out_strides_per_dim: Vec<usize>,
}

impl ReduceMap {
    fn new(in_shape: &[usize], axes: &[usize]) -> Self {
        let in_strides = strides(in_shape);
        let kept: Vec<usize> = (0..in_shape.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&d| in_shape[d]).collect();
        let out_strides = strides(&out_shape);
        let mut per_dim = vec![0usize; in_shape.len()];
        for (k, &d) in kept.iter().enumerate() {
            per_dim[d] = out_strides[k];
        }
        ReduceMap { in_strides, in_shape: in_shape.to_vec(), out_strides_per_dim: per_dim }
    }

    fn out_index(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut out = 0usize;
        for d in 0..self.in_shape.len() {
            let coord = rem / self.in_strides[d];
            rem %= self.in_strides[d];
            out += coord * self.out_strides_per_dim[d];
        }
        out
    }
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Dimension(format!("shapes {:?} and {:?} do not broadcast", a, b)));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Elementwise combine with trailing-aligned broadcasting. Fast paths cover
/// equal shapes, scalar operands, and a trailing-suffix operand.
fn broadcast_zip<S: Scalar>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a_shape == out_shape && b.len() == 1 {
        return a.iter().map(|&x| f(x, b[0])).collect();
    }
    if b_shape == out_shape && a.len() == 1 {
        return b.iter().map(|&y| f(a[0], y)).collect();
    }
    if a_shape == out_shape && !b.is_empty() && numel % b.len() == 0 && is_suffix(b_shape, out_shape) {
        let mut out = Vec::with_capacity(numel);
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    if b_shape == out_shape && !a.is_empty() && numel % a.len() == 0 && is_suffix(a_shape, out_shape) {
        let mut out = Vec::with_capacity(numel);
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    // General case: per-element index mapping.
    let a_bstrides = broadcast_strides(a_shape, out_shape);
    let b_bstrides = broadcast_strides(b_shape, out_shape);
    let out_strides = strides(out_shape);
    let mut out = vec![S::zero(); numel];
    for (i, v) in out.iter_mut().enumerate() {
        let mut rem = i;
        let mut ai = 0usize;
        let mut bi = 0usize;
        for d in 0..out_shape.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            ai += coord * a_bstrides[d];
            bi += coord * b_bstrides[d];
        }
        *v = f(a[ai], b[bi]);
    }
    out
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Per-output-dim strides into a broadcast operand (0 where broadcast).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for d in 0..out_shape.len() {
        if d >= offset && shape[d - offset] != 1 {
            out[d] = in_strides[d - offset];
        }
    }
    out
}

/// Sums a gradient of `from_shape` down to `to_shape` (inverse of broadcast).
fn reduce_to_shape<S: Scalar>(grad: &[S], from_shape: &[usize], to_shape: &[usize]) -> Vec<S> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let to_numel: usize = to_shape.iter().product::<usize>().max(1);
    let t_bstrides = broadcast_strides(to_shape, from_shape);
    let f_strides = strides(from_shape);
    let mut out = vec![S::zero(); to_numel];
    for (i, &g) in grad.iter().enumerate() {
        let mut rem = i;
        let mut ti = 0usize;
        for d in 0..from_shape.len() {
            let coord = rem / f_strides[d];
            rem %= f_strides[d];
            ti += coord * t_bstrides[d];
        }
        out[ti] += g;
    }
    out
}

fn permute_copy<S: Scalar>(src: &[S], in_shape: &[usize], axes: &[usize], out: &mut [S]) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&d| in_shape[d]).collect();
    let out_strides = strides(&out_shape);
    let rank = in_shape.len();
    if rank == 0 {
        out[0] = src[0];
        return;
    }
    // Odometer over output coordinates; src index tracked incrementally.
    let mut coords = vec![0usize; rank];
    let src_stride_per_out_dim: Vec<usize> = axes.iter().map(|&d| in_strides[d]).collect();
    let mut si = 0usize;
    for v in out.iter_mut() {
        *v = src[si];
        for d in (0..rank).rev() {
            coords[d] += 1;
            si += src_stride_per_out_dim[d];
            if coords[d] < out_shape[d] {
                break;
            }
            si -= src_stride_per_out_dim[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    let _ = out_strides;
}

// ── matmul plan ─────────────────────────────────────────────────────────

struct MatmulPlan {
    n: usize,
    k: usize,
    m: usize,
    batch: Vec<usize>,
    a_bstrides: Vec<usize>,
    b_bstrides: Vec<usize>,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a_shape: &[usize], b_shape: &[usize]) -> Result<Self> {
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::Dimension(format!(
                "matmul needs rank >= 2 operands, got {:?} and {:?}",
                a_shape, b_shape
            )));
        }
        let (n, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, m) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                a_shape, b_shape
            )));
        }
        let a_batch = &a_shape[..a_shape.len() - 2];
        let b_batch = &b_shape[..b_shape.len() - 2];
        let batch = broadcast_shapes(a_batch, b_batch).map_err(|_| {
            Error::Dimension(format!(
                "matmul batch extents do not broadcast: {:?} vs {:?}",
                a_shape, b_shape
            ))
        })?;
        let a_bstrides = batch_strides(a_batch, &batch, n * k);
        let b_bstrides = batch_strides(b_batch, &batch, k * m);
        let mut out_shape = batch.clone();
        out_shape.push(n);
        out_shape.push(m);
        Ok(MatmulPlan {
            n,
            k,
            m,
            batch,
            a_bstrides,
            b_bstrides,
            a_shape: a_shape.to_vec(),
            b_shape: b_shape.to_vec(),
            out_shape,
        })
    }

    fn batch_count(&self) -> usize {
        self.batch.iter().product::<usize>().max(1)
    }

    fn offsets(&self, batch_flat: usize) -> (usize, usize) {
        if self.batch.is_empty() {
            return (0, 0);
        }
        let bstrides = strides(&self.batch);
        let mut rem = batch_flat;
        let mut ao = 0usize;
        let mut bo = 0usize;
        for d in 0..self.batch.len() {
            let coord = rem / bstrides[d];
            rem %= bstrides[d];
            ao += coord * self.a_bstrides[d];
            bo += coord * self.b_bstrides[d];
        }
        (ao, bo)
    }

    fn forward<S: Scalar>(&self, a: &[S], b: &[S]) -> Vec<S> {
        let (n, k, m) = (self.n, self.k, self.m);
        let mut out = vec![S::zero(); self.batch_count() * n * m];
        for bi in 0..self.batch_count() {
            let (ao, bo) = self.offsets(bi);
            mm_nn_acc(&a[ao..ao + n * k], &b[bo..bo + k * m], &mut out[bi * n * m..(bi + 1) * n * m], n, k, m);
        }
        out
    }

    /// dA = dC · Bᵀ, accumulated over broadcast batches.
    fn grad_a<S: Scalar>(&self, grad: &[S], b: &[S]) -> Vec<S> {
        let (n, k, m) = (self.n, self.k, self.m);
        let numel: usize = self.a_shape.iter().product();
        let mut out = vec![S::zero(); numel];
        for bi in 0..self.batch_count() {
            let (ao, bo) = self.offsets(bi);
            mm_nt_acc(&grad[bi * n * m..(bi + 1) * n * m], &b[bo..bo + k * m], &mut out[ao..ao + n * k], n, m, k);
        }
        out
    }

    /// dB = Aᵀ · dC, accumulated over broadcast batches.
    fn grad_b<S: Scalar>(&self, a: &[S], grad: &[S]) -> Vec<S> {
        let (n, k, m) = (self.n, self.k, self.m);
        let numel: usize = self.b_shape.iter().product();
        let mut out = vec![S::zero(); numel];
        for bi in 0..self.batch_count() {
            let (ao, bo) = self.offsets(bi);
            mm_tn_acc(&a[ao..ao + n * k], &grad[bi * n * m..(bi + 1) * n * m], &mut out[bo..bo + k * m], n, k, m);
        }
        out
    }
}

/// Per-batch-dim element offsets into an operand, 0 where it broadcasts.
fn batch_strides(op_batch: &[usize], out_batch: &[usize], mat_elems: usize) -> Vec<usize> {
    let mut elem_strides = strides(op_batch);
    for s in elem_strides.iter_mut() {
        *s *= mat_elems;
    }
    let offset = out_batch.len() - op_batch.len();
    let mut out = vec![0usize; out_batch.len()];
    for d in 0..out_batch.len() {
        if d >= offset && op_batch[d - offset] != 1 {
            out[d] = elem_strides[d - offset];
        }
    }
    out
}

// ── 2-d matmul kernels (all accumulate into c) ──────────────────────────

/// c[n,m] += a[n,k] · b[k,m]
fn mm_nn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// c[n,k] += a[n,m] · b[k,m]ᵀ  (rows of b are dotted against rows of a)
fn mm_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *cj += acc;
        }
    }
}

/// c[k,m] += a[n,k]ᵀ · b[n,m]
fn mm_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], n: usize, k: usize, m: usize) {
    for p in 0..n {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * m..(i + 1) * m];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, fd_gradcheck, randn_vec};

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_outer_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let b = tape.constant(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[0.0, 1.0, 0.0, 0.0]);
    }

    /// Naive triple loop, the independent matmul oracle.
    fn matmul_oracle(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * m + j];
                }
                c[i * m + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = randn_vec(12, 1);
        let b = randn_vec(8, 2);
        let mut tape = Tape::<f64>::new();
        let ai = tape.constant(vec![3, 4], a.clone()).unwrap();
        let bi = tape.constant(vec![4, 2], b.clone()).unwrap();
        let c = tape.matmul(ai, bi).unwrap();
        let want = matmul_oracle(&a, &b, 3, 4, 2);
        assert_eq!(tape.data(c), &want[..]);
    }

    #[test]
    fn matmul_exact_on_small_shapes() {
        // Exact double-precision agreement with the oracle up to 8x8.
        for &(n, k, m) in &[(1usize, 1usize, 1usize), (2, 3, 4), (8, 8, 8), (5, 8, 2)] {
            let a = randn_vec(n * k, (n * 31 + m) as u64);
            let b = randn_vec(k * m, (k * 17 + 3) as u64);
            let mut tape = Tape::<f64>::new();
            let ai = tape.constant(vec![n, k], a.clone()).unwrap();
            let bi = tape.constant(vec![k, m], b.clone()).unwrap();
            let c = tape.matmul(ai, bi).unwrap();
            assert_eq!(tape.data(c), &matmul_oracle(&a, &b, n, k, m)[..]);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.zeros(vec![2, 3]);
        let b = tape.zeros(vec![4, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_slice_oracle() {
        let a = randn_vec(2 * 3 * 4, 5);
        let b = randn_vec(2 * 4 * 2, 6);
        let mut tape = Tape::<f64>::new();
        let ai = tape.constant(vec![2, 3, 4], a.clone()).unwrap();
        let bi = tape.constant(vec![2, 4, 2], b.clone()).unwrap();
        let c = tape.matmul(ai, bi).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        for s in 0..2 {
            let want = matmul_oracle(&a[s * 12..(s + 1) * 12], &b[s * 8..(s + 1) * 8], 3, 4, 2);
            assert_eq!(&tape.data(c)[s * 6..(s + 1) * 6], &want[..]);
        }
    }

    #[test]
    fn batched_matmul_broadcasts_unbatched_rhs() {
        let a = randn_vec(2 * 3 * 4, 7);
        let b = randn_vec(4 * 2, 8);
        let mut tape = Tape::<f64>::new();
        let ai = tape.constant(vec![2, 3, 4], a.clone()).unwrap();
        let bi = tape.constant(vec![4, 2], b.clone()).unwrap();
        let c = tape.matmul(ai, bi).unwrap();
        for s in 0..2 {
            let want = matmul_oracle(&a[s * 12..(s + 1) * 12], &b, 3, 4, 2);
            assert_eq!(&tape.data(c)[s * 6..(s + 1) * 6], &want[..]);
        }
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let z = tape.zeros(vec![3]);
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn gelu_fixes_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.gelu(x);
        assert_eq!(tape.data(y), &[0.0]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input_parts(vec![1], vec![3.0], true).unwrap();
        let y = tape.square(x);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap()[0], 6.0, 1e-12);
    }

    #[test]
    fn non_broadcastable_shapes_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.zeros(vec![2, 3]);
        let b = tape.zeros(vec![2, 4]);
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_of_two_and_four_is_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2], vec![2.0, 4.0]).unwrap();
        let m = tape.mean_all(x).unwrap();
        assert_eq!(tape.data(m), &[3.0]);
    }

    #[test]
    fn sum_of_ones_along_axis_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let s = tape.sum(x, &[1]).unwrap();
        assert_eq!(tape.shape(s), &[2]);
        assert_eq!(tape.data(s), &[3.0, 3.0]);
    }

    #[test]
    fn invalid_axis_is_a_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.zeros(vec![2, 3]);
        assert!(matches!(tape.sum(x, &[2]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_gradient_broadcasts_inverse_count() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input_parts(vec![4], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let m = tape.mean_all(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let data = randn_vec(12, 42);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3, 4], data).unwrap();
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.data(s).chunks(4) {
            let total: f64 = row.iter().sum();
            assert_close(total, 1.0, 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![4], vec![7.0; 4]).unwrap();
        let gain = tape.constant(vec![4], vec![1.0; 4]).unwrap();
        let bias = tape.zeros(vec![4]);
        let y = tape.layer_norm(x, gain, bias, 0, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert_close(v, 0.0, 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_slices() {
        let data = randn_vec(6, 3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2, 3], data).unwrap();
        let gain = tape.constant(vec![3], vec![1.0; 3]).unwrap();
        let bias = tape.zeros(vec![3]);
        let y = tape.layer_norm(x, gain, bias, 1, 1e-10).unwrap();
        for row in tape.data(y).chunks(3) {
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert_close(mean, 0.0, 1e-8);
            assert_close(var, 1.0, 1e-6);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let data = randn_vec(8, 11);
        let max_rel = fd_gradcheck(
            &[(vec![2, 4], data)],
            |tape, inputs| {
                let s = tape.softmax(inputs[0], 1)?;
                let w = tape.constant(vec![2, 4], (1..=8).map(|i| i as f64 * 0.3).collect())?;
                let p = tape.mul(s, w)?;
                tape.sum_all(p)
            },
            1e-5,
        );
        assert!(max_rel < 1e-6, "softmax rel err {max_rel}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let max_rel = fd_gradcheck(
            &[
                (vec![2, 3], randn_vec(6, 21)),
                (vec![3], vec![1.1, 0.9, 1.0]),
                (vec![3], vec![0.1, -0.2, 0.0]),
            ],
            |tape, inputs| {
                let y = tape.layer_norm(inputs[0], inputs[1], inputs[2], 1, 1e-6)?;
                let sq = tape.square(y);
                tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(max_rel < 1e-5, "layer_norm rel err {max_rel}");
    }

    #[test]
    fn backward_of_linear_form_gives_input() {
        // loss = sum(w · x) with w tracked: grad(w) = x broadcast over rows.
        let mut tape = Tape::<f64>::new();
        let w = tape.input_parts(vec![1, 3], vec![0.5, -1.0, 2.0], true).unwrap();
        let x = tape.constant(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn frozen_tensor_gets_no_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.input_parts(vec![2], vec![1.0, 2.0], true).unwrap();
        let frozen = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let p = tape.mul(w, frozen).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_some());
        assert!(tape.grad(frozen).is_none());
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input_parts(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn three_layer_mlp_gradient_matches_finite_differences() {
        let inputs = vec![
            (vec![2, 3], randn_vec(6, 31)),
            (vec![3, 4], randn_vec(12, 32)),
            (vec![4], randn_vec(4, 33)),
            (vec![4, 4], randn_vec(16, 34)),
            (vec![4], randn_vec(4, 35)),
            (vec![4, 2], randn_vec(8, 36)),
        ];
        let max_rel = fd_gradcheck(
            &inputs,
            |tape, ids| {
                let h1 = tape.matmul(ids[0], ids[1])?;
                let h1 = tape.add(h1, ids[2])?;
                let h1 = tape.gelu(h1);
                let h2 = tape.matmul(h1, ids[3])?;
                let h2 = tape.add(h2, ids[4])?;
                let h2 = tape.gelu(h2);
                let out = tape.matmul(h2, ids[5])?;
                let sq = tape.square(out);
                tape.mean_all(sq)
            },
            1e-5,
        );
        assert!(max_rel < 1e-4, "mlp rel err {max_rel}");
    }

    #[test]
    fn shape_ops_gradients_match_finite_differences() {
        let max_rel = fd_gradcheck(
            &[(vec![2, 3, 2], randn_vec(12, 41)), (vec![4, 3], randn_vec(12, 42))],
            |tape, ids| {
                let p = tape.permute(ids[0], &[1, 0, 2])?;
                let r = tape.reshape(p, vec![3, 4])?;
                let g = tape.gather_rows(ids[1], &[0, 2, 1, 2])?;
                let gt = tape.transpose(g)?;
                let joined = tape.concat(&[r, gt], 1)?;
                let cut = tape.narrow(joined, 1, 1, 5)?;
                let sq = tape.square(cut);
                tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(max_rel < 1e-6, "shape ops rel err {max_rel}");
    }

    #[test]
    fn batched_matmul_gradients_match_finite_differences() {
        let max_rel = fd_gradcheck(
            &[(vec![2, 3, 4], randn_vec(24, 51)), (vec![4, 2], randn_vec(8, 52))],
            |tape, ids| {
                let c = tape.matmul(ids[0], ids[1])?;
                let sq = tape.square(c);
                tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(max_rel < 1e-6, "batched matmul rel err {max_rel}");
    }

    #[test]
    fn broadcast_binary_gradients_match_finite_differences() {
        let max_rel = fd_gradcheck(
            &[(vec![2, 3], randn_vec(6, 61)), (vec![3], randn_vec(3, 62)), (vec![2, 1], randn_vec(2, 63))],
            |tape, ids| {
                let s = tape.add(ids[0], ids[1])?;
                let p = tape.mul(s, ids[2])?;
                let d = tape.sub(p, ids[1])?;
                let sq = tape.square(d);
                tape.sum_all(sq)
            },
            1e-5,
        );
        assert!(max_rel < 1e-6, "broadcast rel err {max_rel}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.input_parts(vec![4, 4], randn_vec(16, 71).iter().map(|&v| v as f32).collect(), true).unwrap();
            let w = tape.input_parts(vec![4, 4], randn_vec(16, 72).iter().map(|&v| v as f32).collect(), true).unwrap();
            let h = tape.matmul(x, w).unwrap();
            let s = tape.softmax(h, 1).unwrap();
            let g = tape.gelu(s);
            let loss = tape.mean_all(g).unwrap();
            tape.backward(loss).unwrap();
            (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
