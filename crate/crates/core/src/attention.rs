//! Fourier adjacency attention.
//!
//! Queries, keys and values come from Fourier-analysis projectors whose
//! output feature axis is laid out `[cos | sin | aperiodic]`. Heads are
//! partitioned into a periodic group (each head owns a matched cos/sin pair
//! block) and an aperiodic group (contiguous tiles of the affine block).
//! Every head's scaled dot-product scores can be augmented with a gated
//! additive adjacency term: one learnable channel-by-channel matrix per
//! component, shared across depth, scaled per query token by a sigmoid gate.
//!
//! A vanilla multi-head self-attention path is provided for equivalence
//! testing; it runs the same inner core so the degenerate-case equality is
//! exact rather than approximate.

use crate::layers::{dropout, Activation, Fal, Fan, ForwardError, Linear};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, NormMode, Tape};
use crate::tensor::Tensor;

/// How the total heads split into the periodic and aperiodic groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadPartition {
    pub h: usize,
    pub n_p_heads: usize,
    pub d_head: usize,
}

impl HeadPartition {
    /// Validates that `p_ratio * h` is an integer head count, that the model
    /// width divides evenly into heads, and that periodic heads can hold
    /// matched cos/sin halves.
    pub fn new(e: usize, h: usize, p_ratio: f64) -> Result<Self, String> {
        if h == 0 || e == 0 {
            return Err(format!("need positive width and heads, got e={e}, h={h}"));
        }
        if e % h != 0 {
            return Err(format!("width {e} not divisible by {h} heads"));
        }
        if !(0.0..=1.0).contains(&p_ratio) {
            return Err(format!("periodic head ratio {p_ratio} outside [0, 1]"));
        }
        let exact = p_ratio * h as f64;
        let n_p_heads = exact.round() as usize;
        if (exact - n_p_heads as f64).abs() > 1e-9 {
            return Err(format!("periodic ratio {p_ratio} times {h} heads is not an integer"));
        }
        let d_head = e / h;
        if n_p_heads > 0 && d_head % 2 != 0 {
            return Err(format!("head width {d_head} must be even to hold cos/sin pairs"));
        }
        Ok(HeadPartition { h, n_p_heads, d_head })
    }

    /// Total periodic feature width (cos half plus sin half).
    pub fn n_per(&self) -> usize {
        self.n_p_heads * self.d_head
    }

    pub fn n_a_heads(&self) -> usize {
        self.h - self.n_p_heads
    }

    pub fn e(&self) -> usize {
        self.h * self.d_head
    }
}

/// QKV projector variant selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QkvKind {
    Fal,
    Fan(Activation),
    Linear,
}

/// One QKV projector. The plain-linear variant exists as its own code path
/// (not as a zero-periodic-width projector) so the two can be compared.
#[derive(Clone, Debug)]
pub enum Projector {
    Fal(Fal),
    Fan(Fan),
    Linear(Linear),
}

impl Projector {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        e: usize,
        n_per: usize,
        kind: QkvKind,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            QkvKind::Fal => Projector::Fal(Fal::init(ps, name, e, e, n_per, rng)),
            QkvKind::Fan(act) => Projector::Fan(Fan::init(ps, name, e, e, n_per, act, rng)),
            QkvKind::Linear => {
                assert_eq!(n_per, 0, "plain-linear projector cannot produce periodic features");
                Projector::Linear(Linear::init(ps, name, e, e, true, rng))
            }
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, ps: &ParamSet<S>, x: NodeId) -> NodeId {
        match self {
            Projector::Fal(f) => f.forward(tape, ps, x),
            Projector::Fan(f) => f.forward(tape, ps, x),
            Projector::Linear(l) => l.forward(tape, ps, x),
        }
    }
}

/// The two depth-shared channel-adjacency matrices, zero-initialized so an
/// untrained model behaves exactly like vanilla attention.
#[derive(Clone, Copy, Debug)]
pub struct AdjacencyPair {
    pub a_p: ParamId,
    pub a_a: ParamId,
    pub c: usize,
}

impl AdjacencyPair {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, c: usize) -> Self {
        AdjacencyPair {
            a_p: ps.add(format!("{name}.a_p"), Tensor::zeros(vec![c, c]), true),
            a_a: ps.add(format!("{name}.a_a"), Tensor::zeros(vec![c, c]), true),
            c,
        }
    }
}

/// Per-layer attention parameters. A component's gate exists whenever the
/// component has at least one head; disabling the adjacency term leaves the
/// gates in place but unused, so toggling adjacency changes the parameter
/// count by exactly the two matrices.
#[derive(Clone, Debug)]
pub struct FaaParams {
    pub q: Projector,
    pub k: Projector,
    pub v: Projector,
    pub gate_p: Option<Linear>,
    pub gate_a: Option<Linear>,
    pub w_out: Linear,
}

impl FaaParams {
    pub fn init<S: Scalar>(
        ps: &mut ParamSet<S>,
        name: &str,
        part: &HeadPartition,
        kind: QkvKind,
        rng: &mut Rng,
    ) -> Self {
        let e = part.e();
        let n_per = part.n_per();
        let q = Projector::init(ps, &format!("{name}.q"), e, n_per, kind, rng);
        let k = Projector::init(ps, &format!("{name}.k"), e, n_per, kind, rng);
        let v = Projector::init(ps, &format!("{name}.v"), e, n_per, kind, rng);
        let gate_p = (part.n_p_heads > 0)
            .then(|| Linear::init(ps, &format!("{name}.gate_p"), part.d_head, 1, true, rng));
        let gate_a = (part.n_a_heads() > 0)
            .then(|| Linear::init(ps, &format!("{name}.gate_a"), part.d_head, 1, true, rng));
        let w_out = Linear::init(ps, &format!("{name}.w_out"), e, e, true, rng);
        FaaParams { q, k, v, gate_p, gate_a, w_out }
    }
}

/// Split a `[batch, channels, e]` projector output into per-head
/// `[batch, channels, d_head]` tensors, periodic heads first. Periodic head
/// `i` is the concatenation of the `i`-th cos half-block and the matching
/// sin half-block; aperiodic heads tile the affine block contiguously.
pub fn split_heads<S: Scalar>(tape: &mut Tape<S>, qkv: NodeId, part: &HeadPartition) -> Vec<NodeId> {
    let e = tape.value(qkv).last_dim();
    assert_eq!(e, part.e(), "projector output width {} does not match partition {:?}", e, part);
    let rank = tape.value(qkv).shape().len();
    let axis = rank - 1;
    let dh = part.d_head;
    let half = dh / 2;
    let sin_offset = part.n_per() / 2;
    let mut heads = Vec::with_capacity(part.h);
    for i in 0..part.n_p_heads {
        let cos_part = tape.slice(qkv, axis, i * half, half);
        let sin_part = tape.slice(qkv, axis, sin_offset + i * half, half);
        heads.push(tape.concat(&[cos_part, sin_part], axis));
    }
    for j in 0..part.n_a_heads() {
        heads.push(tape.slice(qkv, axis, part.n_per() + j * dh, dh));
    }
    heads
}

/// Exact inverse of [`split_heads`]: reassemble per-head tensors into the
/// original `[cos | sin | aperiodic]` feature layout.
pub fn merge_heads<S: Scalar>(tape: &mut Tape<S>, heads: &[NodeId], part: &HeadPartition) -> NodeId {
    assert_eq!(heads.len(), part.h, "expected {} head tensors", part.h);
    let rank = tape.value(heads[0]).shape().len();
    let axis = rank - 1;
    let half = part.d_head / 2;
    let mut parts = Vec::with_capacity(2 * part.n_p_heads + part.n_a_heads());
    for &head in &heads[..part.n_p_heads] {
        parts.push(tape.slice(head, axis, 0, half));
    }
    for &head in &heads[..part.n_p_heads] {
        parts.push(tape.slice(head, axis, half, half));
    }
    parts.extend_from_slice(&heads[part.n_p_heads..]);
    tape.concat(&parts, axis)
}

/// Pre-softmax attention scores for one head:
/// `q . k^T / sqrt(d_head)`, plus, when an adjacency matrix and gate are
/// supplied, `sigmoid(gate(q))` per query token broadcast across that
/// query's adjacency row.
pub fn gated_scores<S: Scalar>(
    tape: &mut Tape<S>,
    ps: &ParamSet<S>,
    q_head: NodeId,
    k_head: NodeId,
    adjacency: Option<(NodeId, &Linear)>,
) -> NodeId {
    let d = tape.value(q_head).last_dim();
    let c = tape.value(q_head).shape()[1];
    let b = tape.value(q_head).shape()[0];
    let kt = tape.transpose_last2(k_head);
    let qk = tape.matmul(q_head, kt);
    let mut scores = tape.scale(qk, s::<S>(1.0 / (d as f64).sqrt()));
    if let Some((a, gate)) = adjacency {
        assert_eq!(tape.value(a).shape(), &[c, c], "adjacency must be channels x channels");
        let g_lin = gate.forward(tape, ps, q_head); // (b, c, 1)
        let g = tape.sigmoid(g_lin);
        let g_rows = tape.broadcast_last(g, c); // (b, c, c)
        let a_b = tape.broadcast_leading(a, b); // (b, c, c)
        let term = tape.mul(g_rows, a_b);
        scores = tape.add(scores, term);
    }
    scores
}

/// Shared attention inner loop: per head, gated scores, row softmax,
/// dropout on the attention weights, then `attention . v`. Returns the
/// per-head context tensors along with the post-softmax attention nodes.
#[allow(clippy::too_many_arguments)]
pub fn attention_core<S: Scalar>(
    tape: &mut Tape<S>,
    ps: &ParamSet<S>,
    heads: &[(NodeId, NodeId, NodeId)],
    adjacency: &[Option<(NodeId, &Linear)>],
    dropout_rate: f64,
    mode: NormMode,
    rng: &mut Rng,
) -> Result<(Vec<NodeId>, Vec<NodeId>), ForwardError> {
    assert_eq!(heads.len(), adjacency.len());
    let mut outs = Vec::with_capacity(heads.len());
    let mut probs_nodes = Vec::with_capacity(heads.len());
    for (&(q, k, v), adj) in heads.iter().zip(adjacency) {
        let scores = gated_scores(tape, ps, q, k, *adj);
        let probs = tape.softmax_rows(scores)?;
        probs_nodes.push(probs);
        let probs = dropout(tape, rng, probs, dropout_rate, mode);
        outs.push(tape.matmul(probs, v));
    }
    Ok((outs, probs_nodes))
}

/// Full Fourier adjacency attention over embedded tokens `[b, c, e]`.
#[allow(clippy::too_many_arguments)]
pub fn faa_forward<S: Scalar>(
    tape: &mut Tape<S>,
    ps: &ParamSet<S>,
    x: NodeId,
    p: &FaaParams,
    adj: Option<&AdjacencyPair>,
    part: &HeadPartition,
    dropout_rate: f64,
    mode: NormMode,
    rng: &mut Rng,
) -> Result<NodeId, ForwardError> {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "attention input must be [batch, channels, width]");
    if let Some(a) = adj {
        if a.c != shape[1] {
            return Err(ForwardError::Shape(format!(
                "adjacency is {}x{} but input has {} channels",
                a.c, a.c, shape[1]
            )));
        }
    }
    let q = p.q.forward(tape, ps, x);
    let k = p.k.forward(tape, ps, x);
    let v = p.v.forward(tape, ps, x);
    let qh = split_heads(tape, q, part);
    let kh = split_heads(tape, k, part);
    let vh = split_heads(tape, v, part);
    let heads: Vec<(NodeId, NodeId, NodeId)> =
        qh.into_iter().zip(kh).zip(vh).map(|((q, k), v)| (q, k, v)).collect();

    let (a_p_node, a_a_node) = match adj {
        Some(a) => (Some(tape.param(ps, a.a_p)), Some(tape.param(ps, a.a_a))),
        None => (None, None),
    };
    let per_head: Vec<Option<(NodeId, &Linear)>> = (0..part.h)
        .map(|i| {
            if adj.is_none() {
                return None;
            }
            if i < part.n_p_heads {
                Some((a_p_node.unwrap(), p.gate_p.as_ref().expect("periodic gate")))
            } else {
                Some((a_a_node.unwrap(), p.gate_a.as_ref().expect("aperiodic gate")))
            }
        })
        .collect();

    let (outs, _) = attention_core(tape, ps, &heads, &per_head, dropout_rate, mode, rng)?;
    let merged = merge_heads(tape, &outs, part);
    Ok(p.w_out.forward(tape, ps, merged))
}

/// Standard multi-head self-attention with plain linear QKV and output
/// projection; used as the reference point for degeneracy checks.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub w_out: Linear,
}

impl MhsaParams {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, name: &str, e: usize, rng: &mut Rng) -> Self {
        MhsaParams {
            q: Linear::init(ps, &format!("{name}.q"), e, e, true, rng),
            k: Linear::init(ps, &format!("{name}.k"), e, e, true, rng),
            v: Linear::init(ps, &format!("{name}.v"), e, e, true, rng),
            w_out: Linear::init(ps, &format!("{name}.w_out"), e, e, true, rng),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn mhsa_forward<S: Scalar>(
    tape: &mut Tape<S>,
    ps: &ParamSet<S>,
    x: NodeId,
    p: &MhsaParams,
    h: usize,
    dropout_rate: f64,
    mode: NormMode,
    rng: &mut Rng,
) -> Result<NodeId, ForwardError> {
    let e = tape.value(x).last_dim();
    let part = HeadPartition::new(e, h, 0.0).map_err(ForwardError::Shape)?;
    let q = p.q.forward(tape, ps, x);
    let k = p.k.forward(tape, ps, x);
    let v = p.v.forward(tape, ps, x);
    let qh = split_heads(tape, q, &part);
    let kh = split_heads(tape, k, &part);
    let vh = split_heads(tape, v, &part);
    let heads: Vec<(NodeId, NodeId, NodeId)> =
        qh.into_iter().zip(kh).zip(vh).map(|((q, k), v)| (q, k, v)).collect();
    let no_adj: Vec<Option<(NodeId, &Linear)>> = vec![None; part.h];
    let (outs, _) = attention_core(tape, ps, &heads, &no_adj, dropout_rate, mode, rng)?;
    let merged = merge_heads(tape, &outs, &part);
    Ok(p.w_out.forward(tape, ps, merged))
}
