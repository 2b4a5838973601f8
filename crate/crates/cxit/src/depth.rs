//! Depth-wise transmission: mixes each token's per-layer states under a
//! learned structure prior, scores how much each layer should contribute at
//! each position, and aggregates the gated layers into token anchors.

use crate::numerics::{Matrix, Rng};
use crate::states::HiddenStates;
use crate::tape::{NodeId, Tape};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, DepthError>;

/// Trainable depth-gating parameters.
///
/// Matrices are stored input-dim × output-dim and applied to row vectors
/// (`X · W`). `w_layer` holds one projection per layer, or a single shared
/// matrix when `shared_layer_proj` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthParams {
    /// 1×L structure-prior logits; softmaxed into the mixture weights.
    pub w_logits: Matrix,
    /// d×p projection of the mixed context.
    pub w_ctx: Matrix,
    /// Per-layer d×p projections (length 1 when shared).
    pub w_layer: Vec<Matrix>,
    /// L learnable layer embeddings, 1×p each.
    pub e_layer: Vec<Matrix>,
    /// d×d_a projection into the shared anchor space.
    pub w_anchor: Matrix,
    /// Gate temperature; fixed, not trained.
    pub tau: f64,
    pub shared_layer_proj: bool,
}

impl DepthParams {
    /// Gaussian init at std 1/√fan_in for projections; zero logits and layer
    /// embeddings, so initial gates are near-uniform.
    pub fn init(
        num_layers: usize,
        hidden_dim: usize,
        gate_hidden: usize,
        anchor_dim: usize,
        tau: f64,
        shared_layer_proj: bool,
        rng: &Rng,
    ) -> Self {
        assert!(num_layers >= 1 && tau > 0.0);
        let std = 1.0 / (hidden_dim as f64).sqrt();
        let mut ctx_rng = rng.derive("depth/w_ctx");
        let w_ctx = Matrix::from_fn(hidden_dim, gate_hidden, |_, _| ctx_rng.normal_scaled(std));
        let proj_count = if shared_layer_proj { 1 } else { num_layers };
        let w_layer = (0..proj_count)
            .map(|l| {
                let mut r = rng.derive(&format!("depth/w_layer/{l}"));
                Matrix::from_fn(hidden_dim, gate_hidden, |_, _| r.normal_scaled(std))
            })
            .collect();
        let e_layer = (0..num_layers)
            .map(|_| Matrix::zeros(1, gate_hidden))
            .collect();
        let mut anchor_rng = rng.derive("depth/w_anchor");
        let w_anchor = Matrix::from_fn(hidden_dim, anchor_dim, |_, _| {
            anchor_rng.normal_scaled(std)
        });
        DepthParams {
            w_logits: Matrix::zeros(1, num_layers),
            w_ctx,
            w_layer,
            e_layer,
            w_anchor,
            tau,
            shared_layer_proj,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.e_layer.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ctx.rows()
    }

    pub fn anchor_dim(&self) -> usize {
        self.w_anchor.cols()
    }

    pub fn layer_proj(&self, layer: usize) -> &Matrix {
        if self.shared_layer_proj {
            &self.w_layer[0]
        } else {
            &self.w_layer[layer]
        }
    }

    pub fn validate(&self, h: &HiddenStates) -> Result<()> {
        if self.w_logits.cols() != h.num_layers() || self.e_layer.len() != h.num_layers() {
            return Err(DepthError::ShapeMismatch(format!(
                "params cover {} layers but states have {}",
                self.w_logits.cols(),
                h.num_layers()
            )));
        }
        if self.w_ctx.rows() != h.hidden_dim() || self.w_anchor.rows() != h.hidden_dim() {
            return Err(DepthError::ShapeMismatch(format!(
                "projection input dim {} does not match hidden dim {}",
                self.w_ctx.rows(),
                h.hidden_dim()
            )));
        }
        let p = self.w_ctx.cols();
        for (l, w) in self.w_layer.iter().enumerate() {
            if w.rows() != h.hidden_dim() || w.cols() != p {
                return Err(DepthError::ShapeMismatch(format!(
                    "w_layer[{l}] is {}x{}, expected {}x{p}",
                    w.rows(),
                    w.cols(),
                    h.hidden_dim()
                )));
            }
        }
        for (l, e) in self.e_layer.iter().enumerate() {
            if e.rows() != 1 || e.cols() != p {
                return Err(DepthError::ShapeMismatch(format!(
                    "e_layer[{l}] is {}x{}, expected 1x{p}",
                    e.rows(),
                    e.cols()
                )));
            }
        }
        if !(self.tau > 0.0) {
            return Err(DepthError::ShapeMismatch(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Tape handles for registered depth parameters.
#[derive(Debug, Clone)]
pub struct DepthNodes {
    pub w_logits: NodeId,
    pub w_ctx: NodeId,
    pub w_layer: Vec<NodeId>,
    pub e_layer: Vec<NodeId>,
    pub w_anchor: NodeId,
    pub tau: f64,
    pub shared_layer_proj: bool,
}

impl DepthNodes {
    pub fn register(params: &DepthParams, tape: &mut Tape, trainable: bool) -> Self {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        DepthNodes {
            w_logits: put(&params.w_logits),
            w_ctx: put(&params.w_ctx),
            w_layer: params.w_layer.iter().map(&mut put).collect(),
            e_layer: params.e_layer.iter().map(&mut put).collect(),
            w_anchor: put(&params.w_anchor),
            tau: params.tau,
            shared_layer_proj: params.shared_layer_proj,
        }
    }

    fn layer_proj(&self, layer: usize) -> NodeId {
        if self.shared_layer_proj {
            self.w_layer[0]
        } else {
            self.w_layer[layer]
        }
    }
}

/// Per-layer hidden states as constant tape nodes.
pub fn layer_nodes(tape: &mut Tape, h: &HiddenStates) -> Vec<NodeId> {
    (0..h.num_layers())
        .map(|l| tape.constant(h.layer(l)))
        .collect()
}

/// Nodes produced by the depth stage.
pub struct DepthGraph {
    /// N×d structure-prior mixture of layers.
    pub mixed: NodeId,
    /// N×L raw gating scores.
    pub scores: NodeId,
    /// N×L gate coefficients (rows sum to 1).
    pub gates: NodeId,
    /// N×d_a token anchors.
    pub anchors: NodeId,
}

/// Structure-prior mixture: `h̄ = Σ_ℓ softmax(w_logits)_ℓ · H^(ℓ)`.
pub fn graph_mix_layers(tape: &mut Tape, layers: &[NodeId], nodes: &DepthNodes) -> NodeId {
    let n = tape.value(layers[0]).rows();
    let d = tape.value(layers[0]).cols();
    let weights = tape.row_softmax(nodes.w_logits);
    // Row ℓ of the stack is vec(H^(ℓ)); the weighted row-combination is then
    // reshaped back to N×d.
    let flat: Vec<NodeId> = layers
        .iter()
        .map(|&l| tape.reshape(l, 1, n * d))
        .collect();
    let stack = tape.concat_rows(&flat);
    let mixed_flat = tape.matmul(weights, stack);
    tape.reshape(mixed_flat, n, d)
}

/// Gating scores and coefficients given the mixed context.
pub fn graph_gates(
    tape: &mut Tape,
    layers: &[NodeId],
    mixed: NodeId,
    nodes: &DepthNodes,
) -> (NodeId, NodeId) {
    let ctx = tape.matmul(mixed, nodes.w_ctx);
    let score_cols: Vec<NodeId> = layers
        .iter()
        .enumerate()
        .map(|(l, &layer)| {
            let proj = tape.matmul(layer, nodes.layer_proj(l));
            let shifted = tape.broadcast_add_row(proj, nodes.e_layer[l]);
            let prod = tape.mul(ctx, shifted);
            tape.sum_rows(prod)
        })
        .collect();
    let scores = tape.concat_cols(&score_cols);
    let scaled = tape.scale(scores, 1.0 / nodes.tau);
    let gates = tape.row_softmax(scaled);
    (scores, gates)
}

/// Full depth stage: mixture, gates, anchors.
pub fn graph_anchors(tape: &mut Tape, layers: &[NodeId], nodes: &DepthNodes) -> DepthGraph {
    let mixed = graph_mix_layers(tape, layers, nodes);
    let (scores, gates) = graph_gates(tape, layers, mixed, nodes);
    let mut anchors: Option<NodeId> = None;
    for (l, &layer) in layers.iter().enumerate() {
        let proj = tape.matmul(layer, nodes.w_anchor);
        let gate_col = tape.slice_cols(gates, l, l + 1);
        let term = tape.mul_col_vec(proj, gate_col);
        anchors = Some(match anchors {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    DepthGraph {
        mixed,
        scores,
        gates,
        anchors: anchors.unwrap(),
    }
}

/// Depth-stage outputs for one sequence.
#[derive(Debug, Clone)]
pub struct TokenAnchors {
    /// N×d_a anchor vectors.
    pub anchors: Matrix,
    /// N×L gate coefficients; every row sums to 1.
    pub gates: Matrix,
    /// N×d structure-prior context mixture.
    pub context_mix: Matrix,
}

/// `h̄_t = Σ_ℓ softmax(w_logits)_ℓ · h_t^(ℓ)`.
pub fn mix_layers(h: &HiddenStates, params: &DepthParams) -> Result<Matrix> {
    params.validate(h)?;
    let mut tape = Tape::new();
    let layers = layer_nodes(&mut tape, h);
    let nodes = DepthNodes::register(params, &mut tape, false);
    let mixed = graph_mix_layers(&mut tape, &layers, &nodes);
    Ok(tape.value(mixed).clone())
}

/// Gate coefficients from an externally supplied context mixture.
pub fn gate_coefficients(h: &HiddenStates, mixed: &Matrix, params: &DepthParams) -> Result<Matrix> {
    params.validate(h)?;
    if mixed.rows() != h.seq_len() || mixed.cols() != h.hidden_dim() {
        return Err(DepthError::ShapeMismatch(format!(
            "mixed context is {}x{}, expected {}x{}",
            mixed.rows(),
            mixed.cols(),
            h.seq_len(),
            h.hidden_dim()
        )));
    }
    let mut tape = Tape::new();
    let layers = layer_nodes(&mut tape, h);
    let nodes = DepthNodes::register(params, &mut tape, false);
    let mixed_node = tape.constant(mixed.clone());
    let (_, gates) = graph_gates(&mut tape, &layers, mixed_node, &nodes);
    Ok(tape.value(gates).clone())
}

/// Full depth stage over one sequence of hidden states.
pub fn build_anchors(h: &HiddenStates, params: &DepthParams) -> Result<TokenAnchors> {
    params.validate(h)?;
    let mut tape = Tape::new();
    let layers = layer_nodes(&mut tape, h);
    let nodes = DepthNodes::register(params, &mut tape, false);
    let graph = graph_anchors(&mut tape, &layers, &nodes);
    Ok(TokenAnchors {
        anchors: tape.value(graph.anchors).clone(),
        gates: tape.value(graph.gates).clone(),
        context_mix: tape.value(graph.mixed).clone(),
    })
}
