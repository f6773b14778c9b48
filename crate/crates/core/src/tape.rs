//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A `Tape` records every operation of one forward pass in execution order
//! and replays the records in exact reverse order to accumulate gradients.
//! Gradients along multiple paths to the same node are summed. Execution is
//! single-threaded and fully deterministic: identical inputs and parameters
//! produce bitwise-identical outputs and gradients.
//!
//! Accumulation order contract: every reduction (matmul inner product, sums,
//! means, variances) iterates indices in ascending order. The plain-loop
//! reference implementation in [`crate::reference`] mirrors this order so the
//! degeneracy equivalences can be checked bitwise.

use std::collections::HashMap;

use crate::params::{ParamId, ParamSet};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Errors surfaced by numerically sensitive tape operations.
#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("non-finite values in {op} input")]
    NonFinite { op: &'static str },
    #[error("backward called twice on the same tape")]
    DoubleBackward,
    #[error("batch norm requires batch size >= 2 in train mode, got {batch}")]
    BatchTooSmall { batch: usize },
    #[error("cross entropy: {0}")]
    InvalidTargets(String),
}

/// Classification targets for [`Tape::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Targets<S: Scalar> {
    /// Class indices, one per batch row.
    Hard(Vec<usize>),
    /// Soft label distribution of shape `[batch, classes]`, rows summing to 1.
    Soft(Tensor<S>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
}

enum Op<S: Scalar> {
    MatMul { a: NodeId, b: NodeId },
    TransposeLast2 { x: NodeId },
    Add { a: NodeId, b: NodeId },
    /// `b` has the trailing shape of `a` and is broadcast over the leading axes.
    AddBroadcast { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: S },
    Sin { x: NodeId },
    Cos { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Gelu { x: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    SoftmaxRows { x: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<S>, inv_std: Vec<S>, train: bool },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<S>, inv_std: Vec<S> },
    CrossEntropy { logits: NodeId, probs: Vec<S>, targets: Targets<S> },
    MeanAxis { x: NodeId, axis: usize },
    BroadcastLast { x: NodeId, n: usize },
    BroadcastLeading { x: NodeId, reps: usize },
    SumAll { x: NodeId },
}

/// Batch statistics produced by a train-mode batch norm, for the caller's
/// running-statistics update.
pub struct BatchStats<S: Scalar> {
    pub mean: Vec<S>,
    /// Unbiased (n/(n-1)) variance over the flattened token axis.
    pub var_unbiased: Vec<S>,
}

/// One forward pass worth of recorded operations.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    ops: Vec<(Op<S>, NodeId)>,
    grads: Vec<Option<Tensor<S>>>,
    bound_params: HashMap<usize, NodeId>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            bound_params: HashMap::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, requires_grad });
        self.grads.push(None);
        id
    }

    fn record(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        let out = self.push(value, requires_grad);
        self.ops.push((op, out));
        out
    }

    /// Register a tensor that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, false)
    }

    /// Register a differentiable leaf (an input under test, or a parameter).
    pub fn leaf(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, true)
    }

    /// Register a trainable parameter from a parameter set. Binding is
    /// memoized, so a parameter referenced by several layers (the shared
    /// adjacency pair) maps to a single node and its gradient accumulates
    /// contributions from every use.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> NodeId {
        if let Some(&node) = self.bound_params.get(&id.index()) {
            return node;
        }
        assert!(params.is_trainable(id), "param {} is not trainable", params.name(id));
        let node = self.leaf(params.get(id).clone());
        self.bound_params.insert(id.index(), node);
        node
    }

    /// Node for `id` if it was bound during this forward pass.
    pub fn bound(&self, id: ParamId) -> Option<NodeId> {
        self.bound_params.get(&id.index()).copied()
    }

    /// Pre-bind a parameter to an existing node, so later `param` calls for
    /// `id` resolve to `node`. Lets gradient checkers and equivalence tests
    /// drive the real forward code with externally owned leaves.
    pub fn bind_param(&mut self, id: ParamId, node: NodeId) {
        let prev = self.bound_params.insert(id.index(), node);
        assert!(prev.is_none(), "param already bound on this tape");
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the backward root with respect to `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- primitives ------------------------------------------------------

    /// Batched matrix product over the two trailing axes. Leading axes must
    /// match exactly, or `b` may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2, got {:?} x {:?}", sa, sb);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul inner dims disagree: {:?} x {:?}", sa, sb);
        let shared_b = sb.len() == 2;
        if !shared_b {
            assert_eq!(sa[..sa.len() - 2], sb[..sb.len() - 2], "matmul batch dims disagree: {:?} x {:?}", sa, sb);
        }
        let batch = sa[..sa.len() - 2].iter().product::<usize>();
        let mut out = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            let a_off = t * m * k;
            let b_off = if shared_b { 0 } else { t * k * n };
            matmul_raw(
                &va.data()[a_off..a_off + m * k],
                &vb.data()[b_off..b_off + k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let req = self.requires(a) || self.requires(b);
        self.record(Op::MatMul { a, b }, Tensor::new(shape, out), req)
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        assert!(shape.len() >= 2, "transpose_last2 needs rank >= 2");
        let value = transpose_last2_raw(v);
        let req = self.requires(x);
        self.record(Op::TransposeLast2 { x }, value, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let req = self.requires(a) || self.requires(b);
        self.record(Op::Add { a, b }, value, req)
    }

    /// `a + b` where `b`'s shape equals the trailing shape of `a`.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_broadcast: {:?} is not a suffix of {:?}", sb, sa);
        let bn = vb.numel().max(1);
        let data: Vec<S> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % bn])
            .collect();
        let value = Tensor::new(sa.to_vec(), data);
        let req = self.requires(a) || self.requires(b);
        self.record(Op::AddBroadcast { a, b }, value, req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let req = self.requires(a) || self.requires(b);
        self.record(Op::Mul { a, b }, value, req)
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let req = self.requires(x);
        self.record(Op::Scale { x, c }, value, req)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.sin());
        let req = self.requires(x);
        self.record(Op::Sin { x }, value, req)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.cos());
        let req = self.requires(x);
        self.record(Op::Cos { x }, value, req)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let req = self.requires(x);
        self.record(Op::Relu { x }, value, req)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid_scalar);
        let req = self.requires(x);
        self.record(Op::Sigmoid { x }, value, req)
    }

    /// Tanh-approximation GELU, matching its own analytic derivative.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_scalar);
        let req = self.requires(x);
        self.record(Op::Gelu { x }, value, req)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = self.value(parts[0]).shape().to_vec();
        assert!(axis < first.len(), "concat axis {} out of range for {:?}", axis, first);
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.value(p).shape();
            assert_eq!(sp.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in first.iter().zip(sp).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat non-axis dim mismatch at axis {}", d);
                }
            }
            axis_total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let vp = self.value(p);
            let plen = vp.shape()[axis];
            for o in 0..outer {
                let src = &vp.data()[o * plen * inner..(o + 1) * plen * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + plen * inner].copy_from_slice(src);
            }
            offset += plen;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.record(Op::Concat { parts: parts.to_vec(), axis }, Tensor::new(shape, out), req)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        assert!(axis < shape.len(), "slice axis out of range");
        assert!(start + len <= shape[axis], "slice [{}, {}) exceeds axis size {}", start, start + len, shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&v.data()[src_start..src_start + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let req = self.requires(x);
        self.record(Op::Slice { x, axis, start, len }, Tensor::new(new_shape, out), req)
    }

    /// Numerically stable softmax over the final axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(TapeError::NonFinite { op: "softmax_rows" });
        }
        let value = softmax_rows_raw(v);
        let req = self.requires(x);
        Ok(self.record(Op::SoftmaxRows { x }, value, req))
    }

    /// Batch normalization over the flattened leading (token) axes, one
    /// statistic per final-axis feature. Returns the output node plus, in
    /// train mode, the batch statistics for the running-average update.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        mode: NormMode,
        eps: S,
    ) -> Result<(NodeId, Option<BatchStats<S>>), TapeError> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(TapeError::NonFinite { op: "batchnorm" });
        }
        let d = v.last_dim();
        let n = v.rows();
        assert_eq!(self.value(gamma).numel(), d, "batchnorm gamma size");
        assert_eq!(self.value(beta).numel(), d, "batchnorm beta size");
        let train = mode == NormMode::Train;
        if train {
            let batch = v.shape().first().copied().unwrap_or(1);
            if batch < 2 {
                return Err(TapeError::BatchTooSmall { batch });
            }
        }

        let (mean, var): (Vec<S>, Vec<S>) = if train {
            let mut mean = vec![S::zero(); d];
            for r in 0..n {
                for j in 0..d {
                    mean[j] = mean[j] + v.data()[r * d + j];
                }
            }
            let inv_n = S::one() / s::<S>(n as f64);
            for m in mean.iter_mut() {
                *m = *m * inv_n;
            }
            let mut var = vec![S::zero(); d];
            for r in 0..n {
                for j in 0..d {
                    let c = v.data()[r * d + j] - mean[j];
                    var[j] = var[j] + c * c;
                }
            }
            for vv in var.iter_mut() {
                *vv = *vv * inv_n;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };

        let inv_std: Vec<S> = var.iter().map(|&vv| S::one() / (vv + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); n * d];
        for r in 0..n {
            for j in 0..d {
                xhat[r * d + j] = (v.data()[r * d + j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); n * d];
        for r in 0..n {
            for j in 0..d {
                out[r * d + j] = g[j] * xhat[r * d + j] + b[j];
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out);
        let stats = if train {
            let unbias = s::<S>(n as f64 / (n as f64 - 1.0));
            Some(BatchStats {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&vv| vv * unbias).collect(),
            })
        } else {
            None
        };
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let node = self.record(Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, value, req);
        Ok((node, stats))
    }

    /// Layer normalization over the final axis with learnable scale/shift.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(TapeError::NonFinite { op: "layernorm" });
        }
        let d = v.last_dim();
        let n = v.rows();
        assert_eq!(self.value(gamma).numel(), d, "layernorm gamma size");
        assert_eq!(self.value(beta).numel(), d, "layernorm beta size");
        let inv_d = S::one() / s::<S>(d as f64);
        let mut xhat = vec![S::zero(); n * d];
        let mut inv_std = vec![S::zero(); n];
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![S::zero(); n * d];
        for r in 0..n {
            let row = &v.data()[r * d..(r + 1) * d];
            let mut mean = S::zero();
            for &x in row {
                mean = mean + x;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for &x in row {
                let c = x - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out);
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.record(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, value, req))
    }

    /// Mean of `-log softmax(logits)` weighted by the targets, averaged over
    /// the batch. Accepts hard class indices or soft label rows (Mixup).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Targets<S>) -> Result<NodeId, TapeError> {
        let v = self.value(logits);
        if !v.is_finite() {
            return Err(TapeError::NonFinite { op: "cross_entropy" });
        }
        let shape = v.shape();
        assert_eq!(shape.len(), 2, "cross_entropy expects [batch, classes] logits");
        let (bsz, k) = (shape[0], shape[1]);
        if k < 2 {
            return Err(TapeError::InvalidTargets(format!("need at least 2 classes, got {}", k)));
        }
        match &targets {
            Targets::Hard(idx) => {
                if idx.len() != bsz {
                    return Err(TapeError::InvalidTargets(format!(
                        "got {} targets for batch of {}",
                        idx.len(),
                        bsz
                    )));
                }
                if let Some(&bad) = idx.iter().find(|&&t| t >= k) {
                    return Err(TapeError::InvalidTargets(format!("class index {} out of range 0..{}", bad, k)));
                }
            }
            Targets::Soft(p) => {
                if p.shape() != shape {
                    return Err(TapeError::InvalidTargets(format!(
                        "soft label shape {:?} does not match logits {:?}",
                        p.shape(),
                        shape
                    )));
                }
                for r in 0..bsz {
                    let row_sum: f64 = p.data()[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).sum();
                    if (row_sum - 1.0).abs() > 1e-4 {
                        return Err(TapeError::InvalidTargets(format!("soft label row {} sums to {}", r, row_sum)));
                    }
                }
            }
        }

        let probs_t = softmax_rows_raw(v);
        let mut total = S::zero();
        for r in 0..bsz {
            let row = &v.data()[r * k..(r + 1) * k];
            let mut max = row[0];
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut denom = S::zero();
            for &x in row {
                denom = denom + (x - max).exp();
            }
            let lse = max + denom.ln();
            let row_loss = match &targets {
                Targets::Hard(idx) => lse - row[idx[r]],
                Targets::Soft(p) => {
                    let mut dot = S::zero();
                    for j in 0..k {
                        dot = dot + p.data()[r * k + j] * row[j];
                    }
                    lse - dot
                }
            };
            total = total + row_loss;
        }
        let loss = total / s::<S>(bsz as f64);
        let req = self.requires(logits);
        Ok(self.record(
            Op::CrossEntropy { logits, probs: probs_t.data().to_vec(), targets },
            Tensor::scalar(loss),
            req,
        ))
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        assert!(axis < shape.len(), "mean_axis out of range");
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv_n = S::one() / s::<S>(n as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + v.data()[(o * n + a) * inner + i];
                }
            }
        }
        for vv in out.iter_mut() {
            *vv = *vv * inv_n;
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let req = self.requires(x);
        self.record(Op::MeanAxis { x, axis }, Tensor::new(new_shape, out), req)
    }

    /// Repeat a trailing singleton axis `n` times: `[.., 1] -> [.., n]`.
    pub fn broadcast_last(&mut self, x: NodeId, n: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.last_dim(), 1, "broadcast_last expects a trailing axis of 1");
        let rows = v.rows();
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            let val = v.data()[r];
            out[r * n..(r + 1) * n].fill(val);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let req = self.requires(x);
        self.record(Op::BroadcastLast { x, n }, Tensor::new(shape, out), req)
    }

    /// Tile a tensor along a new leading axis: `shape -> [reps, shape..]`.
    pub fn broadcast_leading(&mut self, x: NodeId, reps: usize) -> NodeId {
        let v = self.value(x);
        let chunk = v.numel();
        let mut out = Vec::with_capacity(chunk * reps);
        for _ in 0..reps {
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![reps];
        shape.extend_from_slice(v.shape());
        let req = self.requires(x);
        self.record(Op::BroadcastLeading { x, reps }, Tensor::new(shape, out), req)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut total = S::zero();
        for &e in v.data() {
            total = total + e;
        }
        let req = self.requires(x);
        self.record(Op::SumAll { x }, Tensor::scalar(total), req)
    }

    // ---- backward --------------------------------------------------------

    fn accumulate(&mut self, id: NodeId, grad: Tensor<S>) {
        if !self.requires(id) {
            return;
        }
        debug_assert_eq!(self.nodes[id.0].value.shape(), grad.shape(), "gradient shape mismatch");
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e = *e + *g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    /// Reverse sweep from a scalar root. Visits the recorded operations in
    /// exact reverse execution order, summing gradients along all paths.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TapeError> {
        if self.backward_done {
            return Err(TapeError::DoubleBackward);
        }
        self.backward_done = true;
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        self.grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![S::one()]));

        for idx in (0..self.ops.len()).rev() {
            let out = self.ops[idx].1;
            if self.grads[out.0].is_none() {
                continue;
            }
            let g = self.grads[out.0].clone().unwrap();
            // Ops are moved out one at a time to satisfy the borrow checker;
            // the slot is restored after the VJP so values stay inspectable.
            let op = std::mem::replace(&mut self.ops[idx].0, Op::SumAll { x: out });
            self.backward_op(&op, out, &g);
            self.ops[idx].0 = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<S>, out: NodeId, g: &Tensor<S>) {
        match op {
            Op::MatMul { a, b } => {
                let va = self.value(*a).clone();
                let vb = self.value(*b).clone();
                let sa = va.shape().to_vec();
                let sb = vb.shape().to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared_b = sb.len() == 2;
                let batch = sa[..sa.len() - 2].iter().product::<usize>();
                if self.requires(*a) {
                    // dA = g . B^T
                    let mut da = vec![S::zero(); batch * m * k];
                    for t in 0..batch {
                        let b_off = if shared_b { 0 } else { t * k * n };
                        matmul_bt_raw(
                            &g.data()[t * m * n..(t + 1) * m * n],
                            &vb.data()[b_off..b_off + k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(*a, Tensor::new(sa.clone(), da));
                }
                if self.requires(*b) {
                    // dB = A^T . g, summed over the batch when B is shared
                    if shared_b {
                        let mut db = vec![S::zero(); k * n];
                        for t in 0..batch {
                            matmul_at_acc_raw(
                                &va.data()[t * m * k..(t + 1) * m * k],
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &mut db,
                                m,
                                k,
                                n,
                            );
                        }
                        self.accumulate(*b, Tensor::new(sb.clone(), db));
                    } else {
                        let mut db = vec![S::zero(); batch * k * n];
                        for t in 0..batch {
                            matmul_at_acc_raw(
                                &va.data()[t * m * k..(t + 1) * m * k],
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &mut db[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        self.accumulate(*b, Tensor::new(sb.clone(), db));
                    }
                }
            }
            Op::TransposeLast2 { x } => {
                let gt = transpose_last2_raw(g);
                self.accumulate(*x, gt);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::AddBroadcast { a, b } => {
                self.accumulate(*a, g.clone());
                if self.requires(*b) {
                    let vb_shape = self.value(*b).shape().to_vec();
                    let bn = vb_shape.iter().product::<usize>().max(1);
                    let mut db = vec![S::zero(); bn];
                    for (i, &gv) in g.data().iter().enumerate() {
                        db[i % bn] = db[i % bn] + gv;
                    }
                    self.accumulate(*b, Tensor::new(vb_shape, db));
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let vb = self.value(*b);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(vb.data()).map(|(&gv, &bv)| gv * bv).collect(),
                    );
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let va = self.value(*a);
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(&gv, &av)| gv * av).collect(),
                    );
                    self.accumulate(*b, db);
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(*x, g.map(|v| v * c));
            }
            Op::Sin { x } => {
                let vx = self.value(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vx.data()).map(|(&gv, &xv)| gv * xv.cos()).collect(),
                );
                self.accumulate(*x, dx);
            }
            Op::Cos { x } => {
                let vx = self.value(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vx.data()).map(|(&gv, &xv)| gv * (-xv.sin())).collect(),
                );
                self.accumulate(*x, dx);
            }
            Op::Relu { x } => {
                let vx = self.value(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect(),
                );
                self.accumulate(*x, dx);
            }
            Op::Sigmoid { x } => {
                let vy = self.value(out);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vy.data())
                        .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                        .collect(),
                );
                self.accumulate(*x, dx);
            }
            Op::Gelu { x } => {
                let vx = self.value(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect(),
                );
                self.accumulate(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.value(out).shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0usize;
                for &p in parts {
                    let p_shape = self.value(p).shape().to_vec();
                    let plen = p_shape[axis];
                    if self.requires(p) {
                        let mut dp = vec![S::zero(); outer * plen * inner];
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            dp[o * plen * inner..(o + 1) * plen * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + plen * inner]);
                        }
                        self.accumulate(p, Tensor::new(p_shape, dp));
                    }
                    offset += plen;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (axis, start, len) = (*axis, *start, *len);
                let x_shape = self.value(*x).shape().to_vec();
                let outer: usize = x_shape[..axis].iter().product();
                let inner: usize = x_shape[axis + 1..].iter().product();
                let axis_len = x_shape[axis];
                let mut dx = vec![S::zero(); outer * axis_len * inner];
                for o in 0..outer {
                    let dst_start = (o * axis_len + start) * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(*x, Tensor::new(x_shape, dx));
            }
            Op::SoftmaxRows { x } => {
                // dx = y * (g - sum(g * y)) per row
                let y = self.value(out).clone();
                let d = y.last_dim();
                let rows = y.rows();
                let mut dx = vec![S::zero(); rows * d];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot = dot + gr[j] * yr[j];
                    }
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = inv_std.len();
                let n = xhat.len() / d;
                let gam = self.value(*gamma).data().to_vec();
                if self.requires(*gamma) {
                    let mut dg = vec![S::zero(); d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] = dg[j] + g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(*gamma, Tensor::new(vec![d], dg));
                }
                if self.requires(*beta) {
                    let mut db = vec![S::zero(); d];
                    for r in 0..n {
                        for j in 0..d {
                            db[j] = db[j] + g.data()[r * d + j];
                        }
                    }
                    self.accumulate(*beta, Tensor::new(vec![d], db));
                }
                if self.requires(*x) {
                    let x_shape = self.value(*x).shape().to_vec();
                    let mut dx = vec![S::zero(); n * d];
                    if *train {
                        let inv_n = S::one() / s::<S>(n as f64);
                        let mut mean_dy = vec![S::zero(); d];
                        let mut mean_dy_xhat = vec![S::zero(); d];
                        for r in 0..n {
                            for j in 0..d {
                                let dy = g.data()[r * d + j] * gam[j];
                                mean_dy[j] = mean_dy[j] + dy;
                                mean_dy_xhat[j] = mean_dy_xhat[j] + dy * xhat[r * d + j];
                            }
                        }
                        for j in 0..d {
                            mean_dy[j] = mean_dy[j] * inv_n;
                            mean_dy_xhat[j] = mean_dy_xhat[j] * inv_n;
                        }
                        for r in 0..n {
                            for j in 0..d {
                                let dy = g.data()[r * d + j] * gam[j];
                                dx[r * d + j] =
                                    inv_std[j] * (dy - mean_dy[j] - xhat[r * d + j] * mean_dy_xhat[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..d {
                                dx[r * d + j] = g.data()[r * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(*x, Tensor::new(x_shape, dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = inv_std.len();
                let d = xhat.len() / n;
                let gam = self.value(*gamma).data().to_vec();
                if self.requires(*gamma) {
                    let mut dg = vec![S::zero(); d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] = dg[j] + g.data()[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(*gamma, Tensor::new(vec![d], dg));
                }
                if self.requires(*beta) {
                    let mut db = vec![S::zero(); d];
                    for r in 0..n {
                        for j in 0..d {
                            db[j] = db[j] + g.data()[r * d + j];
                        }
                    }
                    self.accumulate(*beta, Tensor::new(vec![d], db));
                }
                if self.requires(*x) {
                    let x_shape = self.value(*x).shape().to_vec();
                    let inv_d = S::one() / s::<S>(d as f64);
                    let mut dx = vec![S::zero(); n * d];
                    for r in 0..n {
                        let mut mean_dy = S::zero();
                        let mut mean_dy_xhat = S::zero();
                        for j in 0..d {
                            let dy = g.data()[r * d + j] * gam[j];
                            mean_dy = mean_dy + dy;
                            mean_dy_xhat = mean_dy_xhat + dy * xhat[r * d + j];
                        }
                        mean_dy = mean_dy * inv_d;
                        mean_dy_xhat = mean_dy_xhat * inv_d;
                        for j in 0..d {
                            let dy = g.data()[r * d + j] * gam[j];
                            dx[r * d + j] = inv_std[r] * (dy - mean_dy - xhat[r * d + j] * mean_dy_xhat);
                        }
                    }
                    self.accumulate(*x, Tensor::new(x_shape, dx));
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                if self.requires(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let (bsz, k) = (shape[0], shape[1]);
                    let gs = g.item() / s::<S>(bsz as f64);
                    let mut dx = vec![S::zero(); bsz * k];
                    for r in 0..bsz {
                        for j in 0..k {
                            let p_target = match targets {
                                Targets::Hard(idx) => {
                                    if idx[r] == j {
                                        S::one()
                                    } else {
                                        S::zero()
                                    }
                                }
                                Targets::Soft(p) => p.data()[r * k + j],
                            };
                            dx[r * k + j] = (probs[r * k + j] - p_target) * gs;
                        }
                    }
                    self.accumulate(*logits, Tensor::new(shape, dx));
                }
            }
            Op::MeanAxis { x, axis } => {
                let axis = *axis;
                let x_shape = self.value(*x).shape().to_vec();
                let outer: usize = x_shape[..axis].iter().product();
                let n = x_shape[axis];
                let inner: usize = x_shape[axis + 1..].iter().product();
                let inv_n = S::one() / s::<S>(n as f64);
                let mut dx = vec![S::zero(); outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            dx[(o * n + a) * inner + i] = g.data()[o * inner + i] * inv_n;
                        }
                    }
                }
                self.accumulate(*x, Tensor::new(x_shape, dx));
            }
            Op::BroadcastLast { x, n } => {
                let x_shape = self.value(*x).shape().to_vec();
                let rows = x_shape.iter().product::<usize>();
                let mut dx = vec![S::zero(); rows];
                for r in 0..rows {
                    for j in 0..*n {
                        dx[r] = dx[r] + g.data()[r * n + j];
                    }
                }
                self.accumulate(*x, Tensor::new(x_shape, dx));
            }
            Op::BroadcastLeading { x, reps } => {
                let x_shape = self.value(*x).shape().to_vec();
                let chunk = x_shape.iter().product::<usize>();
                let mut dx = vec![S::zero(); chunk];
                for t in 0..*reps {
                    for i in 0..chunk {
                        dx[i] = dx[i] + g.data()[t * chunk + i];
                    }
                }
                self.accumulate(*x, Tensor::new(x_shape, dx));
            }
            Op::SumAll { x } => {
                let x_shape = self.value(*x).shape().to_vec();
                let gv = g.item();
                self.accumulate(*x, Tensor::filled(x_shape, gv));
            }
        }
    }
}

// ---- raw kernels ---------------------------------------------------------

/// `out = a . b`; per-element accumulation runs over `k` in ascending order.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// `out = g . b^T` where g: m x n, b: k x n, out: m x k.
fn matmul_bt_raw<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for kk in 0..k {
            let mut acc = S::zero();
            for j in 0..n {
                acc = acc + g[i * n + j] * b[kk * n + j];
            }
            out[i * k + kk] = out[i * k + kk] + acc;
        }
    }
}

/// `out += a^T . g` where a: m x k, g: m x n, out: k x n.
fn matmul_at_acc_raw<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let grow = &g[i * n..(i + 1) * n];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * grow[j];
            }
        }
    }
}

fn transpose_last2_raw<S: Scalar>(v: &Tensor<S>) -> Tensor<S> {
    let shape = v.shape();
    let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let batch = shape[..shape.len() - 2].iter().product::<usize>();
    let mut out = vec![S::zero(); v.numel()];
    for t in 0..batch {
        let src = &v.data()[t * m * n..(t + 1) * m * n];
        let dst = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    let l = new_shape.len();
    new_shape.swap(l - 2, l - 1);
    Tensor::new(new_shape, out)
}

pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c0 = s::<S>(GELU_C0);
    let c1 = s::<S>(GELU_C1);
    let u = c0 * (x + c1 * x * x * x);
    s::<S>(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c0 = s::<S>(GELU_C0);
    let c1 = s::<S>(GELU_C1);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    let du = c0 * (S::one() + s::<S>(3.0) * c1 * x * x);
    s::<S>(0.5) * (S::one() + t) + s::<S>(0.5) * x * sech2 * du
}

/// Max-subtracted softmax over the final axis.
pub fn softmax_rows_raw<S: Scalar>(v: &Tensor<S>) -> Tensor<S> {
    let d = v.last_dim();
    let rows = v.rows();
    let mut out = vec![S::zero(); rows * d];
    for r in 0..rows {
        let row = &v.data()[r * d..(r + 1) * d];
        let mut max = row[0];
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut denom = S::zero();
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let e = (row[j] - max).exp();
            orow[j] = e;
            denom = denom + e;
        }
        for j in 0..d {
            orow[j] = orow[j] / denom;
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}
