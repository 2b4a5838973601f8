//! Width-wise transmission: routes `N` token anchors into `K` compression
//! slots through an entropy-regularized optimal-transport plan.
//!
//! Within each fixed-length token segment, every slot owns a contiguous
//! *field* of the sequence; a receiver vector summarizes the field, cosine
//! utility scores each sender→receiver path, and Sinkhorn iterations (in
//! log space) balance the plan against learned sender capacities and
//! uniform receiver capacities. Blocks are assembled block-diagonally so
//! no mass crosses segment boundaries.
//!
//! The window-attention baseline keeps the same fields but replaces the
//! transport program with an independent per-field softmax, removing the
//! cross-slot coordination. It is used by the ablation tooling.

use crate::depth::TokenAnchors;
use crate::numerics::{Matrix, Rng};
use crate::tape::{NodeId, Tape};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WidthError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite cost entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("bad marginals: {0}")]
    BadMarginals(String),
}

pub type Result<T> = std::result::Result<T, WidthError>;

/// Trainable and structural width-stage parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthParams {
    /// d_a×d_u shared projection for senders and receivers.
    pub w_util: Matrix,
    /// d_a×1 capacity head.
    pub w_cap: Matrix,
    /// Entropy-regularization weight (cost range is [0, 2]).
    pub epsilon: f64,
    /// Segment length T; Sinkhorn runs independently per segment.
    pub segment_len: usize,
    /// Full row+column update pairs per solve.
    pub sinkhorn_iters: usize,
    /// Compression ratio r: each segment owns ⌈N_seg/r⌉ slots.
    pub ratio: usize,
}

impl WidthParams {
    pub fn init(
        anchor_dim: usize,
        util_dim: usize,
        epsilon: f64,
        segment_len: usize,
        sinkhorn_iters: usize,
        ratio: usize,
        rng: &Rng,
    ) -> Self {
        let std = 1.0 / (anchor_dim as f64).sqrt();
        let mut util_rng = rng.derive("width/w_util");
        let w_util = Matrix::from_fn(anchor_dim, util_dim, |_, _| util_rng.normal_scaled(std));
        let mut cap_rng = rng.derive("width/w_cap");
        let w_cap = Matrix::from_fn(anchor_dim, 1, |_, _| cap_rng.normal_scaled(std));
        WidthParams {
            w_util,
            w_cap,
            epsilon,
            segment_len,
            sinkhorn_iters,
            ratio,
        }
    }

    pub fn anchor_dim(&self) -> usize {
        self.w_util.rows()
    }

    pub fn util_dim(&self) -> usize {
        self.w_util.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(WidthError::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.ratio == 0 || self.segment_len == 0 {
            return Err(WidthError::InvalidArgument(
                "segment_len and ratio must be at least 1".into(),
            ));
        }
        if self.segment_len < self.ratio || self.segment_len % self.ratio != 0 {
            return Err(WidthError::InvalidArgument(format!(
                "segment_len {} must be a multiple of ratio {}",
                self.segment_len, self.ratio
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(WidthError::InvalidArgument(
                "sinkhorn_iters must be at least 1".into(),
            ));
        }
        if self.w_cap.rows() != self.w_util.rows() || self.w_cap.cols() != 1 {
            return Err(WidthError::InvalidArgument(format!(
                "w_cap is {}x{}, expected {}x1",
                self.w_cap.rows(),
                self.w_cap.cols(),
                self.w_util.rows()
            )));
        }
        Ok(())
    }
}

/// Contiguous equal partition of `n` items into `k` fields; earlier fields
/// take the extra item when `n mod k != 0`.
pub fn field_partition(n: usize, k: usize) -> Vec<Range<usize>> {
    assert!(k >= 1 && k <= n);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Consecutive segments of length `t` (the final one may be shorter).
pub fn segment_partition(n: usize, t: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + t).min(n);
        out.push(start..end);
        start = end;
    }
    out
}

/// Number of slots owned by a segment of length `n_seg` at ratio `r`.
pub fn slots_for_segment(n_seg: usize, r: usize) -> usize {
    n_seg.div_ceil(r)
}

/// Block-diagonal transmission plan plus its marginal metadata.
#[derive(Debug, Clone)]
pub struct TransmissionPlan {
    /// N×K plan; exactly zero outside the declared blocks.
    pub plan: Matrix,
    /// Per-segment (token range, slot range) blocks.
    pub blocks: Vec<(Range<usize>, Range<usize>)>,
    /// Length-N sender marginals (per-segment capacity softmax for the
    /// transport variant; realized row sums for the window baseline).
    pub sender_marginals: Vec<f64>,
    /// Length-K receiver marginals (uniform 1/K_seg within each segment).
    pub receiver_marginals: Vec<f64>,
    /// Max |row_sum − sender_marginal| over all blocks.
    pub max_row_residual: f64,
}

impl TransmissionPlan {
    pub fn num_tokens(&self) -> usize {
        self.plan.rows()
    }

    pub fn num_slots(&self) -> usize {
        self.plan.cols()
    }

    /// True when every entry outside the declared blocks is exactly zero.
    pub fn is_block_diagonal(&self) -> bool {
        let mut inside = vec![vec![false; self.plan.cols()]; self.plan.rows()];
        for (tr, sr) in &self.blocks {
            for t in tr.clone() {
                for k in sr.clone() {
                    inside[t][k] = true;
                }
            }
        }
        for t in 0..self.plan.rows() {
            for k in 0..self.plan.cols() {
                if !inside[t][k] && self.plan[(t, k)] != 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Tape handles for registered width parameters.
#[derive(Debug, Clone)]
pub struct WidthNodes {
    pub w_util: NodeId,
    pub w_cap: NodeId,
    pub epsilon: f64,
    pub segment_len: usize,
    pub sinkhorn_iters: usize,
    pub ratio: usize,
    pub util_dim: usize,
}

impl WidthNodes {
    pub fn register(params: &WidthParams, tape: &mut Tape, trainable: bool) -> Self {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        WidthNodes {
            w_util: put(&params.w_util),
            w_cap: put(&params.w_cap),
            epsilon: params.epsilon,
            segment_len: params.segment_len,
            sinkhorn_iters: params.sinkhorn_iters,
            ratio: params.ratio,
            util_dim: params.util_dim(),
        }
    }
}

/// Mean-pool receivers over the given fields: a constant averaging matrix
/// applied to the anchor rows.
pub fn graph_receivers(tape: &mut Tape, anchors: NodeId, fields: &[Range<usize>]) -> NodeId {
    let n = tape.value(anchors).rows();
    let mut avg = Matrix::zeros(fields.len(), n);
    for (k, f) in fields.iter().enumerate() {
        let w = 1.0 / f.len() as f64;
        for t in f.clone() {
            avg[(k, t)] = w;
        }
    }
    let avg_node = tape.constant(avg);
    tape.matmul(avg_node, anchors)
}

/// Cosine utility between projected senders and receivers.
pub fn graph_utility(
    tape: &mut Tape,
    anchors: NodeId,
    receivers: NodeId,
    nodes: &WidthNodes,
) -> NodeId {
    let xu = tape.matmul(anchors, nodes.w_util);
    let ru = tape.matmul(receivers, nodes.w_util);
    let xn = tape.normalize_rows(xu);
    let rn = tape.normalize_rows(ru);
    tape.matmul_nt(xn, rn)
}

/// Log sender capacities: log-softmax of the capacity head over the segment.
pub fn graph_log_capacities(tape: &mut Tape, anchors: NodeId, nodes: &WidthNodes) -> NodeId {
    let logits = tape.matmul(anchors, nodes.w_cap);
    tape.log_softmax_all(logits)
}

/// Entropy-regularized transport via unrolled log-domain Sinkhorn.
///
/// One iteration is a full row+column update pair. A final column scaling
/// makes the column marginals exact; rows carry the remaining residual.
pub fn graph_sinkhorn(
    tape: &mut Tape,
    cost: NodeId,
    log_row_marg: NodeId,
    log_col_marg: NodeId,
    epsilon: f64,
    iters: usize,
) -> NodeId {
    assert!(iters >= 1);
    let k = tape.value(cost).cols();
    let m = tape.scale(cost, -1.0 / epsilon);
    let mut psi = tape.constant(Matrix::zeros(1, k));
    let mut phi = None;
    for _ in 0..iters {
        let shifted = tape.broadcast_add_row(m, psi);
        let lse_rows = tape.log_sum_exp_rows(shifted);
        let new_phi = tape.sub(log_row_marg, lse_rows);
        let shifted_cols = tape.broadcast_add_col(m, new_phi);
        let lse_cols = tape.log_sum_exp_cols(shifted_cols);
        psi = tape.sub(log_col_marg, lse_cols);
        phi = Some(new_phi);
    }
    let with_phi = tape.broadcast_add_col(m, phi.unwrap());
    let log_plan = tape.broadcast_add_row(with_phi, psi);
    let raw = tape.exp(log_plan);
    // Exact column marginals.
    let col_sums = tape.sum_cols(raw);
    let nu = tape.exp(log_col_marg);
    let rescale = tape.div(nu, col_sums);
    tape.mul_row_vec(raw, rescale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthVariant {
    /// Coordinated allocation through the transport program.
    Transport,
    /// Ablation: independent per-field softmax attention.
    WindowAttention,
}

/// One solved block on the tape.
pub struct BlockGraph {
    pub token_range: Range<usize>,
    pub slot_range: Range<usize>,
    /// n_seg×k_seg block of the plan.
    pub plan: NodeId,
    /// n_seg×1 sender capacities (transport variant only).
    pub rho: Option<NodeId>,
}

pub struct WidthGraph {
    pub blocks: Vec<BlockGraph>,
    pub num_slots: usize,
}

/// Builds the segmented plan (or the window-attention baseline) on the tape.
pub fn graph_segmented_plan(
    tape: &mut Tape,
    anchors: NodeId,
    nodes: &WidthNodes,
    variant: WidthVariant,
) -> Result<WidthGraph> {
    let n = tape.value(anchors).rows();
    if n < nodes.ratio {
        return Err(WidthError::InvalidArgument(format!(
            "sequence length {n} shorter than compression ratio {}",
            nodes.ratio
        )));
    }
    let mut blocks = Vec::new();
    let mut slot_offset = 0;
    for seg in segment_partition(n, nodes.segment_len) {
        let n_seg = seg.len();
        let k_seg = slots_for_segment(n_seg, nodes.ratio);
        let fields = field_partition(n_seg, k_seg);
        let seg_anchors = tape.slice_rows(anchors, seg.start, seg.end);
        let receivers = graph_receivers(tape, seg_anchors, &fields);
        let plan_block;
        let mut rho_node = None;
        match variant {
            WidthVariant::Transport => {
                let utility = graph_utility(tape, seg_anchors, receivers, nodes);
                let neg = tape.scale(utility, -1.0);
                let cost = tape.add_scalar(neg, 1.0);
                let log_rho = graph_log_capacities(tape, seg_anchors, nodes);
                let log_nu =
                    tape.constant(Matrix::row_vector(&vec![(1.0 / k_seg as f64).ln(); k_seg]));
                plan_block = graph_sinkhorn(
                    tape,
                    cost,
                    log_rho,
                    log_nu,
                    nodes.epsilon,
                    nodes.sinkhorn_iters,
                );
                rho_node = Some(tape.exp(log_rho));
            }
            WidthVariant::WindowAttention => {
                let xu = tape.matmul(seg_anchors, nodes.w_util);
                let ru = tape.matmul(receivers, nodes.w_util);
                let dots = tape.matmul_nt(xu, ru);
                let scores = tape.scale(dots, 1.0 / (nodes.util_dim as f64).sqrt());
                // Each slot softmaxes over its own field; mass 1/K_seg per
                // column keeps the block total comparable with transport.
                let mut columns = Vec::with_capacity(k_seg);
                for (k_idx, field) in fields.iter().enumerate() {
                    let col = tape.slice_cols(scores, k_idx, k_idx + 1);
                    let field_scores = tape.slice_rows(col, field.start, field.end);
                    let row = tape.transpose(field_scores);
                    let sm = tape.row_softmax(row);
                    let scaled = tape.scale(sm, 1.0 / k_seg as f64);
                    let col_weights = tape.transpose(scaled);
                    let mut parts = Vec::new();
                    if field.start > 0 {
                        parts.push(tape.constant(Matrix::zeros(field.start, 1)));
                    }
                    parts.push(col_weights);
                    if field.end < n_seg {
                        parts.push(tape.constant(Matrix::zeros(n_seg - field.end, 1)));
                    }
                    columns.push(tape.concat_rows(&parts));
                }
                plan_block = tape.concat_cols(&columns);
            }
        }
        blocks.push(BlockGraph {
            token_range: seg,
            slot_range: slot_offset..slot_offset + k_seg,
            plan: plan_block,
            rho: rho_node,
        });
        slot_offset += k_seg;
    }
    Ok(WidthGraph {
        blocks,
        num_slots: slot_offset,
    })
}

/// Extracts a dense [`TransmissionPlan`] from a solved width graph.
pub fn extract_plan(tape: &Tape, graph: &WidthGraph, n: usize) -> TransmissionPlan {
    let mut plan = Matrix::zeros(n, graph.num_slots);
    let mut sender_marginals = vec![0.0; n];
    let mut receiver_marginals = vec![0.0; graph.num_slots];
    let mut blocks = Vec::with_capacity(graph.blocks.len());
    let mut max_row_residual: f64 = 0.0;
    for block in &graph.blocks {
        let values = tape.value(block.plan);
        let k_seg = block.slot_range.len();
        for (i, t) in block.token_range.clone().enumerate() {
            for (j, k) in block.slot_range.clone().enumerate() {
                plan[(t, k)] = values[(i, j)];
            }
        }
        let row_sums = values.row_sums();
        match block.rho {
            Some(rho) => {
                let rho_v = tape.value(rho);
                for (i, t) in block.token_range.clone().enumerate() {
                    sender_marginals[t] = rho_v[(i, 0)];
                    max_row_residual = max_row_residual.max((row_sums[i] - rho_v[(i, 0)]).abs());
                }
            }
            None => {
                for (i, t) in block.token_range.clone().enumerate() {
                    sender_marginals[t] = row_sums[i];
                }
            }
        }
        for k in block.slot_range.clone() {
            receiver_marginals[k] = 1.0 / k_seg as f64;
        }
        blocks.push((block.token_range.clone(), block.slot_range.clone()));
    }
    TransmissionPlan {
        plan,
        blocks,
        sender_marginals,
        receiver_marginals,
        max_row_residual,
    }
}

/// Receivers for `num_slots` contiguous fields over the full anchor sequence.
pub fn build_receivers(anchors: &TokenAnchors, num_slots: usize) -> Result<Matrix> {
    let n = anchors.anchors.rows();
    if num_slots == 0 || num_slots > n {
        return Err(WidthError::InvalidArgument(format!(
            "num_slots {num_slots} out of range for {n} anchors"
        )));
    }
    let fields = field_partition(n, num_slots);
    let mut tape = Tape::new();
    let a = tape.constant(anchors.anchors.clone());
    let r = graph_receivers(&mut tape, a, &fields);
    Ok(tape.value(r).clone())
}

/// `U_{t,k} = cos(W_u h̃_t, W_u r_k)`; zero-norm projections score 0.
pub fn utility_matrix(
    anchors: &TokenAnchors,
    receivers: &Matrix,
    params: &WidthParams,
) -> Result<Matrix> {
    params.validate()?;
    if anchors.anchors.cols() != params.anchor_dim() || receivers.cols() != params.anchor_dim() {
        return Err(WidthError::InvalidArgument(format!(
            "anchor dim {} does not match utility projection input {}",
            anchors.anchors.cols(),
            params.anchor_dim()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(anchors.anchors.clone());
    let r = tape.constant(receivers.clone());
    let nodes = WidthNodes::register(params, &mut tape, false);
    let u = graph_utility(&mut tape, a, r, &nodes);
    Ok(tape.value(u).clone())
}

/// Sender capacities: softmax of the capacity head over one token segment.
pub fn sender_capacities(
    anchors: &TokenAnchors,
    params: &WidthParams,
    segment: Range<usize>,
) -> Result<Vec<f64>> {
    params.validate()?;
    if segment.is_empty() || segment.end > anchors.anchors.rows() {
        return Err(WidthError::InvalidArgument(format!(
            "segment {segment:?} out of range for {} anchors",
            anchors.anchors.rows()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(anchors.anchors.clone());
    let nodes = WidthNodes::register(params, &mut tape, false);
    let seg = tape.slice_rows(a, segment.start, segment.end);
    let log_rho = graph_log_capacities(&mut tape, seg, &nodes);
    let rho = tape.exp(log_rho);
    Ok(tape.value(rho).data().to_vec())
}

/// One solved Sinkhorn block and its row-marginal residual.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub plan: Matrix,
    /// max |row_sum − row_marginal| after the final column scaling.
    pub row_residual: f64,
}

/// Solves one entropic transport block from explicit marginals.
pub fn sinkhorn_plan(
    cost: &Matrix,
    row_marg: &[f64],
    col_marg: &[f64],
    epsilon: f64,
    iters: usize,
) -> Result<SinkhornResult> {
    if !(epsilon > 0.0) {
        return Err(WidthError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if iters == 0 {
        return Err(WidthError::InvalidArgument(
            "iteration count must be at least 1".into(),
        ));
    }
    if cost.rows() != row_marg.len() || cost.cols() != col_marg.len() {
        return Err(WidthError::InvalidArgument(format!(
            "cost is {}x{} but marginals have lengths {} and {}",
            cost.rows(),
            cost.cols(),
            row_marg.len(),
            col_marg.len()
        )));
    }
    for r in 0..cost.rows() {
        for c in 0..cost.cols() {
            if !cost[(r, c)].is_finite() {
                return Err(WidthError::NonFiniteCost { row: r, col: c });
            }
        }
    }
    for (name, marg) in [("row", row_marg), ("column", col_marg)] {
        if marg.iter().any(|&m| !(m > 0.0)) {
            return Err(WidthError::BadMarginals(format!(
                "{name} marginals must be strictly positive"
            )));
        }
        let sum: f64 = marg.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(WidthError::BadMarginals(format!(
                "{name} marginals sum to {sum}, expected 1 within 1e-9"
            )));
        }
    }
    let mut tape = Tape::new();
    let cost_node = tape.constant(cost.clone());
    let log_rho = tape.constant(Matrix::col_vector(
        &row_marg.iter().map(|m| m.ln()).collect::<Vec<_>>(),
    ));
    let log_nu = tape.constant(Matrix::row_vector(
        &col_marg.iter().map(|m| m.ln()).collect::<Vec<_>>(),
    ));
    let plan = graph_sinkhorn(&mut tape, cost_node, log_rho, log_nu, epsilon, iters);
    let plan_value = tape.value(plan).clone();
    let row_residual = plan_value
        .row_sums()
        .iter()
        .zip(row_marg)
        .map(|(s, m)| (s - m).abs())
        .fold(0.0f64, f64::max);
    Ok(SinkhornResult {
        plan: plan_value,
        row_residual,
    })
}

fn segmented(anchors: &TokenAnchors, params: &WidthParams, variant: WidthVariant) -> Result<TransmissionPlan> {
    params.validate()?;
    if anchors.anchors.cols() != params.anchor_dim() {
        return Err(WidthError::InvalidArgument(format!(
            "anchor dim {} does not match width params ({})",
            anchors.anchors.cols(),
            params.anchor_dim()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(anchors.anchors.clone());
    let nodes = WidthNodes::register(params, &mut tape, false);
    let graph = graph_segmented_plan(&mut tape, a, &nodes, variant)?;
    Ok(extract_plan(&tape, &graph, anchors.anchors.rows()))
}

/// Full segmented transport plan over the anchor sequence.
pub fn segmented_plan(anchors: &TokenAnchors, params: &WidthParams) -> Result<TransmissionPlan> {
    segmented(anchors, params, WidthVariant::Transport)
}

/// Window-attention ablation: per-field softmax weights in plan shape.
pub fn window_attention_baseline(
    anchors: &TokenAnchors,
    params: &WidthParams,
) -> Result<TransmissionPlan> {
    segmented(anchors, params, WidthVariant::WindowAttention)
}
