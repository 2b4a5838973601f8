//! Final compression stage: slots aggregate anchors through the plan, and a
//! small tanh MLP aligns the results with the consumer's input space. Also
//! home to [`compress`], which wires depth → width → slots together.

use crate::depth::{self, DepthGraph, DepthNodes, DepthParams, TokenAnchors};
use crate::numerics::{Matrix, Rng};
use crate::states::HiddenStates;
use crate::tape::{NodeId, Tape};
use crate::width::{self, TransmissionPlan, WidthGraph, WidthNodes, WidthParams, WidthVariant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlotsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Depth(#[from] depth::DepthError),
    #[error(transparent)]
    Width(#[from] width::WidthError),
}

pub type Result<T> = std::result::Result<T, SlotsError>;

/// Trainable slot-stage parameters: the pre-aggregation projection and the
/// two-layer alignment MLP (tanh activation).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotParams {
    /// d_a×d_a projection applied to anchors before aggregation.
    pub w_gather: Matrix,
    /// d_a×m first MLP layer.
    pub align_w1: Matrix,
    /// 1×m first-layer bias.
    pub align_b1: Matrix,
    /// m×d_dec second MLP layer.
    pub align_w2: Matrix,
    /// 1×d_dec second-layer bias.
    pub align_b2: Matrix,
}

impl SlotParams {
    pub fn init(anchor_dim: usize, mlp_hidden: usize, dec_dim: usize, rng: &Rng) -> Self {
        let mut g = rng.derive("slots/w_gather");
        let ga_std = 1.0 / (anchor_dim as f64).sqrt();
        let w_gather = Matrix::from_fn(anchor_dim, anchor_dim, |_, _| g.normal_scaled(ga_std));
        let mut w1 = rng.derive("slots/align_w1");
        let align_w1 = Matrix::from_fn(anchor_dim, mlp_hidden, |_, _| w1.normal_scaled(ga_std));
        let mut w2 = rng.derive("slots/align_w2");
        let w2_std = 1.0 / (mlp_hidden as f64).sqrt();
        let align_w2 = Matrix::from_fn(mlp_hidden, dec_dim, |_, _| w2.normal_scaled(w2_std));
        SlotParams {
            w_gather,
            align_w1,
            align_b1: Matrix::zeros(1, mlp_hidden),
            align_w2,
            align_b2: Matrix::zeros(1, dec_dim),
        }
    }

    pub fn anchor_dim(&self) -> usize {
        self.w_gather.rows()
    }

    pub fn dec_dim(&self) -> usize {
        self.align_w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d_a = self.w_gather.rows();
        if self.w_gather.cols() != d_a {
            return Err(SlotsError::ShapeMismatch(format!(
                "w_gather must be square, got {}x{}",
                d_a,
                self.w_gather.cols()
            )));
        }
        if self.align_w1.rows() != d_a {
            return Err(SlotsError::ShapeMismatch(format!(
                "align_w1 input {} does not match anchor dim {d_a}",
                self.align_w1.rows()
            )));
        }
        let m = self.align_w1.cols();
        if self.align_b1.cols() != m || self.align_w2.rows() != m {
            return Err(SlotsError::ShapeMismatch(
                "MLP hidden dimensions disagree".into(),
            ));
        }
        if self.align_b2.cols() != self.align_w2.cols() {
            return Err(SlotsError::ShapeMismatch(
                "MLP output bias does not match output dim".into(),
            ));
        }
        Ok(())
    }
}

/// Tape handles for registered slot parameters.
#[derive(Debug, Clone)]
pub struct SlotNodes {
    pub w_gather: NodeId,
    pub align_w1: NodeId,
    pub align_b1: NodeId,
    pub align_w2: NodeId,
    pub align_b2: NodeId,
}

impl SlotNodes {
    pub fn register(params: &SlotParams, tape: &mut Tape, trainable: bool) -> Self {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        SlotNodes {
            w_gather: put(&params.w_gather),
            align_w1: put(&params.align_w1),
            align_b1: put(&params.align_b1),
            align_w2: put(&params.align_w2),
            align_b2: put(&params.align_b2),
        }
    }
}

/// Plan-weighted aggregation: `z_k = Σ_t Π_{t,k} · (W_g h̃_t)`, block by block.
pub fn graph_aggregate(
    tape: &mut Tape,
    anchors: NodeId,
    width_graph: &WidthGraph,
    nodes: &SlotNodes,
) -> NodeId {
    let gathered = tape.matmul(anchors, nodes.w_gather);
    let parts: Vec<NodeId> = width_graph
        .blocks
        .iter()
        .map(|block| {
            let seg = tape.slice_rows(gathered, block.token_range.start, block.token_range.end);
            let pt = tape.transpose(block.plan);
            tape.matmul(pt, seg)
        })
        .collect();
    tape.concat_rows(&parts)
}

/// Row-wise alignment MLP: `c = tanh(z·W1 + b1)·W2 + b2`.
pub fn graph_align(tape: &mut Tape, raw: NodeId, nodes: &SlotNodes) -> NodeId {
    let pre = tape.matmul(raw, nodes.align_w1);
    let shifted = tape.broadcast_add_row(pre, nodes.align_b1);
    let hidden = tape.tanh(shifted);
    let out = tape.matmul(hidden, nodes.align_w2);
    tape.broadcast_add_row(out, nodes.align_b2)
}

/// The compressed representation of one sequence.
#[derive(Debug, Clone)]
pub struct CompressedSlots {
    /// K×d_a aggregated slot vectors.
    pub raw: Matrix,
    /// K×d_dec aligned outputs.
    pub aligned: Matrix,
}

/// Everything the pipeline produces, intermediates included, so diagnostics
/// and training see exactly the forward values.
#[derive(Debug, Clone)]
pub struct CompressOutput {
    pub slots: CompressedSlots,
    pub anchors: TokenAnchors,
    pub plan: TransmissionPlan,
}

/// The full pipeline on the tape.
pub struct PipelineGraph {
    pub depth: DepthGraph,
    pub width: WidthGraph,
    pub raw_slots: NodeId,
    pub aligned: NodeId,
}

/// Builds depth → width → slots over one sequence of hidden states.
pub fn graph_pipeline(
    tape: &mut Tape,
    h: &HiddenStates,
    depth_nodes: &DepthNodes,
    width_nodes: &WidthNodes,
    slot_nodes: &SlotNodes,
    variant: WidthVariant,
) -> Result<PipelineGraph> {
    let layers = depth::layer_nodes(tape, h);
    let depth_graph = depth::graph_anchors(tape, &layers, depth_nodes);
    let width_graph = width::graph_segmented_plan(tape, depth_graph.anchors, width_nodes, variant)?;
    let raw_slots = graph_aggregate(tape, depth_graph.anchors, &width_graph, slot_nodes);
    let aligned = graph_align(tape, raw_slots, slot_nodes);
    Ok(PipelineGraph {
        depth: depth_graph,
        width: width_graph,
        raw_slots,
        aligned,
    })
}

/// Aggregates anchors into slot vectors under an explicit plan.
pub fn aggregate_slots(
    anchors: &TokenAnchors,
    plan: &TransmissionPlan,
    params: &SlotParams,
) -> Result<Matrix> {
    params.validate()?;
    if plan.num_tokens() != anchors.anchors.rows() {
        return Err(SlotsError::ShapeMismatch(format!(
            "plan covers {} tokens but anchors have {}",
            plan.num_tokens(),
            anchors.anchors.rows()
        )));
    }
    if anchors.anchors.cols() != params.anchor_dim() {
        return Err(SlotsError::ShapeMismatch(format!(
            "anchor dim {} does not match w_gather ({})",
            anchors.anchors.cols(),
            params.anchor_dim()
        )));
    }
    let gathered = anchors.anchors.matmul(&params.w_gather);
    Ok(plan.plan.transpose().matmul(&gathered))
}

/// Applies the alignment MLP row-wise.
pub fn align(raw: &Matrix, params: &SlotParams) -> Result<Matrix> {
    params.validate()?;
    if raw.cols() != params.anchor_dim() {
        return Err(SlotsError::ShapeMismatch(format!(
            "raw slots have dim {} but the MLP expects {}",
            raw.cols(),
            params.anchor_dim()
        )));
    }
    let mut tape = Tape::new();
    let r = tape.constant(raw.clone());
    let nodes = SlotNodes::register(params, &mut tape, false);
    let a = graph_align(&mut tape, r, &nodes);
    Ok(tape.value(a).clone())
}

/// Runs the full pipeline with the chosen width variant.
pub fn compress_variant(
    h: &HiddenStates,
    depth_params: &DepthParams,
    width_params: &WidthParams,
    slot_params: &SlotParams,
    variant: WidthVariant,
) -> Result<CompressOutput> {
    depth_params.validate(h)?;
    width_params.validate()?;
    slot_params.validate()?;
    if depth_params.anchor_dim() != width_params.anchor_dim()
        || depth_params.anchor_dim() != slot_params.anchor_dim()
    {
        return Err(SlotsError::ShapeMismatch(format!(
            "anchor dims disagree: depth {}, width {}, slots {}",
            depth_params.anchor_dim(),
            width_params.anchor_dim(),
            slot_params.anchor_dim()
        )));
    }
    let mut tape = Tape::new();
    let dn = DepthNodes::register(depth_params, &mut tape, false);
    let wn = WidthNodes::register(width_params, &mut tape, false);
    let sn = SlotNodes::register(slot_params, &mut tape, false);
    let graph = graph_pipeline(&mut tape, h, &dn, &wn, &sn, variant)?;
    let plan = width::extract_plan(&tape, &graph.width, h.seq_len());
    Ok(CompressOutput {
        slots: CompressedSlots {
            raw: tape.value(graph.raw_slots).clone(),
            aligned: tape.value(graph.aligned).clone(),
        },
        anchors: TokenAnchors {
            anchors: tape.value(graph.depth.anchors).clone(),
            gates: tape.value(graph.depth.gates).clone(),
            context_mix: tape.value(graph.depth.mixed).clone(),
        },
        plan,
    })
}

/// The standard coordinated-allocation pipeline.
pub fn compress(
    h: &HiddenStates,
    depth_params: &DepthParams,
    width_params: &WidthParams,
    slot_params: &SlotParams,
) -> Result<CompressOutput> {
    compress_variant(h, depth_params, width_params, slot_params, WidthVariant::Transport)
}
