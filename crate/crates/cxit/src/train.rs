//! Desk-scale training of every module parameter on the synthetic retrieval
//! task.
//!
//! The loss is attention of a query embedding over the aligned slots,
//! projected to vocabulary logits and scored with cross-entropy against the
//! planted answer. Gradients are exact reverse-mode derivatives of the full
//! forward computation, Sinkhorn unrolling included; `gradient_check`
//! compares them against central finite differences group by group.

use crate::depth::{DepthNodes, DepthParams};
use crate::numerics::{self, Matrix, Rng};
use crate::slots::{self, SlotNodes, SlotParams};
use crate::states::{HiddenStates, RetrievalTask, SyntheticEncoder};
use crate::tape::{NodeId, Tape};
use crate::width::{WidthNodes, WidthParams, WidthVariant};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CXITCKP1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss ({loss}) at step {step}")]
    Divergence { step: usize, loss: f64 },
    #[error("non-finite gradient in parameter group {group}")]
    NonFiniteGradient { group: String },
    #[error("checkpoint magic mismatch")]
    CheckpointMagic,
    #[error("checkpoint header not terminated by newline")]
    CheckpointHeaderUnterminated,
    #[error("checkpoint header is not valid JSON: {0}")]
    CheckpointHeaderSyntax(String),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("checkpoint payload length {found} does not match header ({expected})")]
    CheckpointPayload { expected: usize, found: usize },
    #[error("non-finite checkpoint value in tensor {tensor}")]
    CheckpointNonFinite { tensor: String },
    #[error("checkpoint tensor set does not match the configured model: {0}")]
    CheckpointShape(String),
    #[error(transparent)]
    Pipeline(#[from] slots::SlotsError),
    #[error(transparent)]
    States(#[from] crate::states::StatesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Dimension and hyperparameter record from which every trainable tensor's
/// shape follows.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub gate_hidden: usize,
    pub anchor_dim: usize,
    pub util_dim: usize,
    pub mlp_hidden: usize,
    pub dec_dim: usize,
    pub vocab_size: usize,
    pub tau: f64,
    pub shared_layer_proj: bool,
    pub epsilon: f64,
    pub segment_len: usize,
    pub sinkhorn_iters: usize,
    pub ratio: usize,
}

/// Retrieval head: a query embedding table and a vocabulary projection.
/// The query table width equals the decoder dim so the scaled dot-product
/// attention over aligned slots is well-typed.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// vocab×d_dec query embeddings.
    pub query_embed: Matrix,
    /// d_dec×vocab output projection.
    pub out_proj: Matrix,
}

impl HeadParams {
    pub fn init(vocab_size: usize, dec_dim: usize, rng: &Rng) -> Self {
        let std = 1.0 / (dec_dim as f64).sqrt();
        let mut q = rng.derive("head/query_embed");
        let query_embed = Matrix::from_fn(vocab_size, dec_dim, |_, _| q.normal_scaled(std));
        let mut o = rng.derive("head/out_proj");
        let out_proj = Matrix::from_fn(dec_dim, vocab_size, |_, _| o.normal_scaled(std));
        HeadParams {
            query_embed,
            out_proj,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadNodes {
    pub query_embed: NodeId,
    pub out_proj: NodeId,
}

impl HeadNodes {
    pub fn register(params: &HeadParams, tape: &mut Tape, trainable: bool) -> Self {
        let mut put = |m: &Matrix| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        HeadNodes {
            query_embed: put(&params.query_embed),
            out_proj: put(&params.out_proj),
        }
    }
}

/// Every trainable tensor, enumerable in one fixed canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams {
    pub depth: DepthParams,
    pub width: WidthParams,
    pub slot: SlotParams,
    pub head: HeadParams,
}

/// One named tensor inside the canonical flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl GroupInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModuleParams {
    pub fn init(spec: &ParamSpec, rng: &Rng) -> Self {
        ModuleParams {
            depth: DepthParams::init(
                spec.num_layers,
                spec.hidden_dim,
                spec.gate_hidden,
                spec.anchor_dim,
                spec.tau,
                spec.shared_layer_proj,
                rng,
            ),
            width: WidthParams::init(
                spec.anchor_dim,
                spec.util_dim,
                spec.epsilon,
                spec.segment_len,
                spec.sinkhorn_iters,
                spec.ratio,
                rng,
            ),
            slot: SlotParams::init(spec.anchor_dim, spec.mlp_hidden, spec.dec_dim, rng),
            head: HeadParams::init(spec.vocab_size, spec.dec_dim, rng),
        }
    }

    /// Visits every trainable tensor in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Matrix)) {
        f("depth.w_logits".into(), &self.depth.w_logits);
        f("depth.w_ctx".into(), &self.depth.w_ctx);
        for (i, w) in self.depth.w_layer.iter().enumerate() {
            f(format!("depth.w_layer.{i}"), w);
        }
        for (i, e) in self.depth.e_layer.iter().enumerate() {
            f(format!("depth.e_layer.{i}"), e);
        }
        f("depth.w_anchor".into(), &self.depth.w_anchor);
        f("width.w_util".into(), &self.width.w_util);
        f("width.w_cap".into(), &self.width.w_cap);
        f("slots.w_gather".into(), &self.slot.w_gather);
        f("slots.align_w1".into(), &self.slot.align_w1);
        f("slots.align_b1".into(), &self.slot.align_b1);
        f("slots.align_w2".into(), &self.slot.align_w2);
        f("slots.align_b2".into(), &self.slot.align_b2);
        f("head.query_embed".into(), &self.head.query_embed);
        f("head.out_proj".into(), &self.head.out_proj);
    }

    fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Matrix)) {
        f("depth.w_logits".into(), &mut self.depth.w_logits);
        f("depth.w_ctx".into(), &mut self.depth.w_ctx);
        for (i, w) in self.depth.w_layer.iter_mut().enumerate() {
            f(format!("depth.w_layer.{i}"), w);
        }
        for (i, e) in self.depth.e_layer.iter_mut().enumerate() {
            f(format!("depth.e_layer.{i}"), e);
        }
        f("depth.w_anchor".into(), &mut self.depth.w_anchor);
        f("width.w_util".into(), &mut self.width.w_util);
        f("width.w_cap".into(), &mut self.width.w_cap);
        f("slots.w_gather".into(), &mut self.slot.w_gather);
        f("slots.align_w1".into(), &mut self.slot.align_w1);
        f("slots.align_b1".into(), &mut self.slot.align_b1);
        f("slots.align_w2".into(), &mut self.slot.align_w2);
        f("slots.align_b2".into(), &mut self.slot.align_b2);
        f("head.query_embed".into(), &mut self.head.query_embed);
        f("head.out_proj".into(), &mut self.head.out_proj);
    }

    /// Canonical flat layout of the trainable tensors.
    pub fn layout(&self) -> Vec<GroupInfo> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit(|name, m| {
            out.push(GroupInfo {
                name,
                rows: m.rows(),
                cols: m.cols(),
                offset,
            });
            offset += m.rows() * m.cols();
        });
        out
    }

    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(|_, m| n += m.rows() * m.cols());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        self.visit(|_, m| out.extend_from_slice(m.data()));
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(|_, m| {
            let len = m.rows() * m.cols();
            m.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

/// Registered tape handles for a full parameter set, in canonical order.
pub struct ParamNodes {
    pub depth: DepthNodes,
    pub width: WidthNodes,
    pub slot: SlotNodes,
    pub head: HeadNodes,
}

impl ParamNodes {
    pub fn register(params: &ModuleParams, tape: &mut Tape, trainable: bool) -> Self {
        ParamNodes {
            depth: DepthNodes::register(&params.depth, tape, trainable),
            width: WidthNodes::register(&params.width, tape, trainable),
            slot: SlotNodes::register(&params.slot, tape, trainable),
            head: HeadNodes::register(&params.head, tape, trainable),
        }
    }

    /// Leaf ids in the same canonical order as [`ModuleParams::visit`].
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.depth.w_logits, self.depth.w_ctx];
        ids.extend(&self.depth.w_layer);
        ids.extend(&self.depth.e_layer);
        ids.push(self.depth.w_anchor);
        ids.push(self.width.w_util);
        ids.push(self.width.w_cap);
        ids.push(self.slot.w_gather);
        ids.push(self.slot.align_w1);
        ids.push(self.slot.align_b1);
        ids.push(self.slot.align_w2);
        ids.push(self.slot.align_b2);
        ids.push(self.head.query_embed);
        ids.push(self.head.out_proj);
        ids
    }
}

/// Gain on the head's scaled dot-product attention logits
/// (`q·c · gain/√d_dec`). Probe knob, will be fixed after calibration.
fn attn_gain() -> f64 {
    std::env::var("CXIT_ATTN_GAIN")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1.0)
}

/// Query-attention head over aligned slots → vocab logits → cross-entropy.
pub fn graph_retrieval_loss(
    tape: &mut Tape,
    aligned: NodeId,
    head: &HeadNodes,
    query: usize,
    answer: usize,
) -> (NodeId, NodeId) {
    let dec_dim = tape.value(aligned).cols();
    let q = tape.embed_rows(head.query_embed, &[query]);
    let scores = tape.matmul_nt(q, aligned);
    let scaled = tape.scale(scores, attn_gain() / (dec_dim as f64).sqrt());
    let attn = tape.row_softmax(scaled);
    let pooled = tape.matmul(attn, aligned);
    let logits = tape.matmul(pooled, head.out_proj);
    let loss = tape.cross_entropy(logits, answer);
    let probs = tape.row_softmax(logits);
    (loss, probs)
}

/// Loss of already-compressed slots under the retrieval head.
pub struct LossOutput {
    pub loss: f64,
    /// Softmax distribution over the vocabulary.
    pub prediction: Vec<f64>,
}

pub fn retrieval_loss(
    compressed: &slots::CompressedSlots,
    task: &RetrievalTask,
    params: &ModuleParams,
) -> Result<LossOutput> {
    let vocab = params.head.query_embed.rows();
    if task.query_key as usize >= vocab || task.answer_value as usize >= vocab {
        return Err(TrainError::InvalidArgument(format!(
            "task tokens exceed head vocabulary {vocab}"
        )));
    }
    let mut tape = Tape::new();
    let aligned = tape.constant(compressed.aligned.clone());
    let head = HeadNodes::register(&params.head, &mut tape, false);
    let (loss, probs) = graph_retrieval_loss(
        &mut tape,
        aligned,
        &head,
        task.query_key as usize,
        task.answer_value as usize,
    );
    let loss = tape.value(loss)[(0, 0)];
    if !loss.is_finite() {
        return Err(TrainError::Divergence { step: 0, loss });
    }
    Ok(LossOutput {
        loss,
        prediction: tape.value(probs).data().to_vec(),
    })
}

/// End-to-end loss from hidden states (forward only, no gradients).
pub fn forward_loss(
    h: &HiddenStates,
    task: &RetrievalTask,
    params: &ModuleParams,
    variant: WidthVariant,
) -> Result<LossOutput> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(params, &mut tape, false);
    let graph = slots::graph_pipeline(
        &mut tape,
        h,
        &nodes.depth,
        &nodes.width,
        &nodes.slot,
        variant,
    )?;
    let (loss, probs) = graph_retrieval_loss(
        &mut tape,
        graph.aligned,
        &nodes.head,
        task.query_key as usize,
        task.answer_value as usize,
    );
    Ok(LossOutput {
        loss: tape.value(loss)[(0, 0)],
        prediction: tape.value(probs).data().to_vec(),
    })
}

/// Loss plus the exact gradient of every trainable tensor, flattened in
/// canonical order. Sinkhorn iterations are differentiated through their
/// unrolled computation graph.
pub fn backward(
    h: &HiddenStates,
    task: &RetrievalTask,
    params: &ModuleParams,
    variant: WidthVariant,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(params, &mut tape, true);
    let graph = slots::graph_pipeline(
        &mut tape,
        h,
        &nodes.depth,
        &nodes.width,
        &nodes.slot,
        variant,
    )?;
    let (loss_node, _) = graph_retrieval_loss(
        &mut tape,
        graph.aligned,
        &nodes.head,
        task.query_key as usize,
        task.answer_value as usize,
    );
    let loss = tape.value(loss_node)[(0, 0)];
    if !loss.is_finite() {
        return Err(TrainError::Divergence { step: 0, loss });
    }
    let grads = tape.backward(loss_node, 1.0);
    let layout = params.layout();
    let mut flat = Vec::with_capacity(params.num_trainable());
    for (info, id) in layout.iter().zip(nodes.leaf_ids()) {
        match grads.wrt(id) {
            Some(g) => {
                if !g.is_finite() {
                    return Err(TrainError::NonFiniteGradient {
                        group: info.name.clone(),
                    });
                }
                flat.extend_from_slice(g.data());
            }
            None => flat.extend(std::iter::repeat(0.0).take(info.len())),
        }
    }
    Ok((loss, flat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            grad_clip_norm: 20.0,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidArgument(
                "learning_rate must be nonnegative".into(),
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(TrainError::InvalidArgument(
                "grad_clip_norm must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction; one state per flat parameter vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Returns the update to subtract from the parameters.
    pub fn step(&mut self, grad: &[f64], cfg: &TrainConfig) -> Vec<f64> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps)
            })
            .collect()
    }
}

/// Clips to the given global L2 norm. Returns the pre-clip norm; the
/// clipped vector is a positive scalar multiple of the input.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModuleParams,
    pub history: Vec<StepRecord>,
}

/// Loss history as `step,loss,grad_norm` CSV.
pub fn history_to_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{}\n",
            r.step,
            r.loss as f32,
            r.grad_norm as f32
        ));
    }
    out
}

/// Deterministic single-threaded training loop: batches wrap over the task
/// list in order, per-sample gradients are reduced in index order, the mean
/// gradient is clipped at `grad_clip_norm`, and Adam applies the update.
pub fn train(
    cfg: &TrainConfig,
    encoder: &SyntheticEncoder,
    tasks: &[RetrievalTask],
    init: &ModuleParams,
    variant: WidthVariant,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::InvalidArgument("no training tasks".into()));
    }
    // The encoder is frozen, so hidden states per task are fixed; encode once.
    let mut encoded = Vec::with_capacity(tasks.len());
    for t in tasks {
        encoded.push(encoder.encode(&t.tokens)?);
    }
    let mut params = init.clone();
    let flat_len = params.num_trainable();
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat_len);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut cursor = 0usize;
    for step in 0..cfg.steps {
        let mut grad = vec![0.0; flat_len];
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = cursor % tasks.len();
            cursor += 1;
            let (loss, sample_grad) =
                backward(&encoded[idx], &tasks[idx], &params, variant).map_err(|e| match e {
                    TrainError::Divergence { loss, .. } => TrainError::Divergence { step, loss },
                    other => other,
                })?;
            loss_sum += loss;
            for (g, s) in grad.iter_mut().zip(&sample_grad) {
                *g += s;
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for g in &mut grad {
            *g *= inv;
        }
        let loss = loss_sum * inv;
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step, loss });
        }
        let grad_norm = clip_global_norm(&mut grad, cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                group: format!("global gradient at step {step}"),
            });
        }
        let update = adam.step(&grad, cfg);
        for (p, u) in flat.iter_mut().zip(&update) {
            *p -= u;
        }
        params.set_from_flat(&flat);
        history.push(StepRecord {
            step,
            loss,
            grad_norm,
        });
    }
    Ok(TrainOutput { params, history })
}

/// Held-out evaluation: mean loss and argmax retrieval accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(
    params: &ModuleParams,
    encoder: &SyntheticEncoder,
    tasks: &[RetrievalTask],
    variant: WidthVariant,
) -> Result<EvalStats> {
    if tasks.is_empty() {
        return Err(TrainError::InvalidArgument("no evaluation tasks".into()));
    }
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    for task in tasks {
        let h = encoder.encode(&task.tokens)?;
        let out = forward_loss(&h, task, params, variant)?;
        loss_sum += out.loss;
        let argmax = out
            .prediction
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == task.answer_value as usize {
            hits += 1;
        }
    }
    Ok(EvalStats {
        mean_loss: loss_sum / tasks.len() as f64,
        accuracy: hits as f64 / tasks.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    step: u64,
    seed: u64,
    tensors: Vec<CheckpointTensor>,
}

/// A parsed checkpoint before shape validation against a model config.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<(String, Matrix)>,
}

/// `CXITCKP1` + JSON header (shapes in canonical order, seed, step) +
/// little-endian f32 payload.
pub fn checkpoint_to_bytes(params: &ModuleParams, step: u64, seed: u64) -> Vec<u8> {
    let mut tensors = Vec::new();
    params.visit(|name, m| {
        tensors.push(CheckpointTensor {
            name,
            rows: m.rows(),
            cols: m.cols(),
        })
    });
    let header = CheckpointHeader {
        version: 1,
        step,
        seed,
        tensors,
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).unwrap().as_bytes());
    out.push(b'\n');
    params.visit(|_, m| {
        for v in m.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    });
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<RawCheckpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
    {
        return Err(TrainError::CheckpointMagic);
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let nl = rest
        .iter()
        .take(1 << 20)
        .position(|&b| b == b'\n')
        .ok_or(TrainError::CheckpointHeaderUnterminated)?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..nl])
        .map_err(|e| TrainError::CheckpointHeaderSyntax(e.to_string()))?;
    if header.version != 1 {
        return Err(TrainError::CheckpointVersion(header.version));
    }
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| {
            t.rows
                .checked_mul(t.cols)
                .filter(|&n| n <= (1 << 31))
                .ok_or(TrainError::CheckpointShape(format!(
                    "tensor {} has overflowing shape",
                    t.name
                )))
        })
        .sum::<Result<usize>>()?
        * 4;
    let payload = &rest[nl + 1..];
    if payload.len() != expected {
        return Err(TrainError::CheckpointPayload {
            expected,
            found: payload.len(),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut cursor = 0;
    for t in header.tensors {
        let count = t.rows * t.cols;
        let mut data = Vec::with_capacity(count);
        for chunk in payload[cursor..cursor + count * 4].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(TrainError::CheckpointNonFinite {
                    tensor: t.name.clone(),
                });
            }
            data.push(v as f64);
        }
        cursor += count * 4;
        tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, data)));
    }
    Ok(RawCheckpoint {
        step: header.step,
        seed: header.seed,
        tensors,
    })
}

/// Rehydrates parameters from a checkpoint, validating tensor names and
/// shapes against what `spec` implies.
pub fn params_from_checkpoint(raw: &RawCheckpoint, spec: &ParamSpec) -> Result<ModuleParams> {
    let mut params = ModuleParams::init(spec, &Rng::new(0));
    let layout = params.layout();
    if layout.len() != raw.tensors.len() {
        return Err(TrainError::CheckpointShape(format!(
            "checkpoint has {} tensors, model expects {}",
            raw.tensors.len(),
            layout.len()
        )));
    }
    for (info, (name, m)) in layout.iter().zip(&raw.tensors) {
        if &info.name != name {
            return Err(TrainError::CheckpointShape(format!(
                "tensor order mismatch: found {name}, expected {}",
                info.name
            )));
        }
        if info.rows != m.rows() || info.cols != m.cols() {
            return Err(TrainError::CheckpointShape(format!(
                "tensor {name} is {}x{}, model expects {}x{}",
                m.rows(),
                m.cols(),
                info.rows,
                info.cols
            )));
        }
    }
    let mut flat = Vec::with_capacity(params.num_trainable());
    for (_, m) in &raw.tensors {
        flat.extend_from_slice(m.data());
    }
    params.set_from_flat(&flat);
    Ok(params)
}

pub fn save_checkpoint(params: &ModuleParams, step: u64, seed: u64, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_to_bytes(params, step, seed))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Finite-difference agreement for one parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckGroup {
    pub name: String,
    /// `max_i |analytic_i − numeric_i| / max(max_i |numeric_i|, 1e-8)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_inf_norm: f64,
    pub numeric_inf_norm: f64,
}

/// Compares [`backward`] against [`numerics::finite_diff_gradient`] on one
/// task, group by group.
pub fn gradient_check(
    h: &HiddenStates,
    task: &RetrievalTask,
    params: &ModuleParams,
    variant: WidthVariant,
    fd_step: f64,
) -> Result<Vec<GradCheckGroup>> {
    let (_, analytic) = backward(h, task, params, variant)?;
    let flat0 = params.to_flat();
    let mut scratch = params.clone();
    let numeric = numerics::finite_diff_gradient(
        |x| {
            scratch.set_from_flat(x);
            match forward_loss(h, task, &scratch, variant) {
                Ok(out) => out.loss,
                Err(_) => f64::NAN,
            }
        },
        &flat0,
        fd_step,
    )
    .map_err(|e| TrainError::InvalidArgument(format!("finite differences failed: {e}")))?;

    let mut out = Vec::new();
    for info in params.layout() {
        let range = info.offset..info.offset + info.len();
        let a = &analytic[range.clone()];
        let n = &numeric[range];
        let max_abs_err = a
            .iter()
            .zip(n)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        let analytic_inf = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let numeric_inf = n.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        out.push(GradCheckGroup {
            name: info.name,
            max_rel_err: max_abs_err / numeric_inf.max(1e-8),
            max_abs_err,
            analytic_inf_norm: analytic_inf,
            numeric_inf_norm: numeric_inf,
        });
    }
    Ok(out)
}
