//! Frozen hidden-state inputs: the `.hst` on-disk format, a deterministic
//! synthetic encoder standing in for a frozen LM forward pass, and the
//! planted key/value retrieval task used for desk-scale training.

use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const HST_MAGIC: &[u8; 8] = b"CXITHST1";
/// Causal window over which each synthetic encoder layer averages its input.
pub const ENCODER_WINDOW: usize = 8;

#[derive(Debug, Error)]
pub enum StatesError {
    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },
    #[error("header not terminated by newline within {limit} bytes")]
    HeaderUnterminated { limit: usize },
    #[error("header is not valid JSON: {0}")]
    HeaderSyntax(String),
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("unsupported dtype {found:?} (only \"f32\" is defined)")]
    UnsupportedDtype { found: String },
    #[error("unsupported layout {found:?} (only \"layer_token_dim\" is defined)")]
    UnsupportedLayout { found: String },
    #[error("dimension field {field} must be at least 1, found {found}")]
    InvalidDimension { field: &'static str, found: u64 },
    #[error("declared dimensions overflow the addressable payload size")]
    DimensionOverflow,
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing data: {extra} bytes past the declared payload")]
    TrailingData { extra: usize },
    #[error("non-finite value in payload at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("token id {token} at position {position} out of range (vocab {vocab})")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },
    #[error("infeasible task config: {0}")]
    InfeasibleConfig(String),
    #[error("task line {line}: {source}")]
    TaskSyntax {
        line: usize,
        source: serde_json::Error,
    },
    #[error("task line {line}: {reason}")]
    TaskInvalid { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StatesError>;

/// Frozen per-layer, per-token representations: `L × N × d`, layer-major,
/// rows (tokens) major within a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    num_layers: usize,
    seq_len: usize,
    hidden_dim: usize,
    values: Vec<f64>,
}

impl HiddenStates {
    pub fn zeros(num_layers: usize, seq_len: usize, hidden_dim: usize) -> Self {
        assert!(num_layers >= 1 && seq_len >= 1 && hidden_dim >= 1);
        HiddenStates {
            num_layers,
            seq_len,
            hidden_dim,
            values: vec![0.0; num_layers * seq_len * hidden_dim],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn offset(&self, layer: usize, token: usize) -> usize {
        (layer * self.seq_len + token) * self.hidden_dim
    }

    pub fn token(&self, layer: usize, token: usize) -> &[f64] {
        let o = self.offset(layer, token);
        &self.values[o..o + self.hidden_dim]
    }

    pub fn token_mut(&mut self, layer: usize, token: usize) -> &mut [f64] {
        let o = self.offset(layer, token);
        &mut self.values[o..o + self.hidden_dim]
    }

    /// One layer as an `N × d` matrix.
    pub fn layer(&self, layer: usize) -> Matrix {
        assert!(layer < self.num_layers);
        let start = self.offset(layer, 0);
        Matrix::from_vec(
            self.seq_len,
            self.hidden_dim,
            self.values[start..start + self.seq_len * self.hidden_dim].to_vec(),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HstHeader {
    version: u32,
    #[serde(rename = "L")]
    num_layers: u64,
    #[serde(rename = "N")]
    seq_len: u64,
    #[serde(rename = "d")]
    hidden_dim: u64,
    dtype: String,
    layout: String,
}

const HEADER_LIMIT: usize = 4096;

/// Serializes to the `.hst` byte format: magic, newline-terminated JSON
/// header, then `L·N·d` little-endian f32 values indexed `((ℓ·N)+t)·d + i`.
pub fn states_to_bytes(h: &HiddenStates) -> Vec<u8> {
    let header = HstHeader {
        version: 1,
        num_layers: h.num_layers as u64,
        seq_len: h.seq_len as u64,
        hidden_dim: h.hidden_dim as u64,
        dtype: "f32".into(),
        layout: "layer_token_dim".into(),
    };
    let mut out = Vec::with_capacity(16 + h.values.len() * 4);
    out.extend_from_slice(HST_MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).unwrap().as_bytes());
    out.push(b'\n');
    for v in &h.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn states_from_bytes(bytes: &[u8]) -> Result<HiddenStates> {
    if bytes.len() < HST_MAGIC.len() || &bytes[..HST_MAGIC.len()] != HST_MAGIC {
        return Err(StatesError::MagicMismatch {
            expected: String::from_utf8_lossy(HST_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    let rest = &bytes[HST_MAGIC.len()..];
    let nl = rest
        .iter()
        .take(HEADER_LIMIT)
        .position(|&b| b == b'\n')
        .ok_or(StatesError::HeaderUnterminated {
            limit: HEADER_LIMIT,
        })?;
    let header: HstHeader = serde_json::from_slice(&rest[..nl])
        .map_err(|e| StatesError::HeaderSyntax(e.to_string()))?;
    if header.version != 1 {
        return Err(StatesError::VersionMismatch {
            expected: 1,
            found: header.version,
        });
    }
    if header.dtype != "f32" {
        return Err(StatesError::UnsupportedDtype {
            found: header.dtype,
        });
    }
    if header.layout != "layer_token_dim" {
        return Err(StatesError::UnsupportedLayout {
            found: header.layout,
        });
    }
    for (field, value) in [
        ("L", header.num_layers),
        ("N", header.seq_len),
        ("d", header.hidden_dim),
    ] {
        if value == 0 {
            return Err(StatesError::InvalidDimension {
                field,
                found: value,
            });
        }
    }
    let count = header
        .num_layers
        .checked_mul(header.seq_len)
        .and_then(|v| v.checked_mul(header.hidden_dim))
        .and_then(|v| v.checked_mul(4))
        .filter(|&v| v <= usize::MAX as u64)
        .ok_or(StatesError::DimensionOverflow)? as usize;
    let payload = &rest[nl + 1..];
    if payload.len() < count {
        return Err(StatesError::TruncatedPayload {
            expected: count,
            found: payload.len(),
        });
    }
    if payload.len() > count {
        return Err(StatesError::TrailingData {
            extra: payload.len() - count,
        });
    }
    let mut values = Vec::with_capacity(count / 4);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(StatesError::NonFiniteValue { index });
        }
        values.push(v as f64);
    }
    Ok(HiddenStates {
        num_layers: header.num_layers as usize,
        seq_len: header.seq_len as usize,
        hidden_dim: header.hidden_dim as usize,
        values,
    })
}

pub fn save_states(h: &HiddenStates, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&states_to_bytes(h))?;
    Ok(())
}

pub fn load_states(path: &Path) -> Result<HiddenStates> {
    states_from_bytes(&std::fs::read(path)?)
}

/// Frozen encoder producing depth-structured hidden states.
///
/// Layer 1 mixes each token's embedding with the causal running mean of all
/// embeddings up to it; each further layer adds a tanh residual of a frozen
/// affine map applied to a causal window mean (window [`ENCODER_WINDOW`]).
/// Early layers therefore stay close to lexical content while deeper layers
/// mix progressively more context.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    vocab_size: usize,
    num_layers: usize,
    hidden_dim: usize,
    embedding: Matrix,
    /// One (weight, bias) pair per layer transition ℓ → ℓ+1.
    transitions: Vec<(Matrix, Matrix)>,
}

impl SyntheticEncoder {
    pub fn new(vocab_size: usize, num_layers: usize, hidden_dim: usize, rng: &Rng) -> Self {
        assert!(vocab_size >= 1 && num_layers >= 1 && hidden_dim >= 1);
        let mut emb_rng = rng.derive("encoder/embedding");
        let embedding = Matrix::from_fn(vocab_size, hidden_dim, |_, _| emb_rng.normal());
        let gain: f64 = std::env::var("CXIT_ENC_GAIN")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1.0);
        let std = gain / (hidden_dim as f64).sqrt();
        let transitions = (0..num_layers - 1)
            .map(|l| {
                let mut w_rng = rng.derive(&format!("encoder/affine/{l}"));
                let w = Matrix::from_fn(hidden_dim, hidden_dim, |_, _| w_rng.normal_scaled(std));
                let b = Matrix::from_fn(1, hidden_dim, |_, _| w_rng.normal_scaled(0.1));
                (w, b)
            })
            .collect();
        SyntheticEncoder {
            vocab_size,
            num_layers,
            hidden_dim,
            embedding,
            transitions,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<HiddenStates> {
        assert!(!tokens.is_empty(), "cannot encode an empty sequence");
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= self.vocab_size {
                return Err(StatesError::TokenOutOfRange {
                    token,
                    position,
                    vocab: self.vocab_size,
                });
            }
        }
        let n = tokens.len();
        let d = self.hidden_dim;
        let mut h = HiddenStates::zeros(self.num_layers, n, d);

        // Layer 1: half embedding, half causal running mean of embeddings.
        let mut running = vec![0.0; d];
        for (t, &token) in tokens.iter().enumerate() {
            let emb = self.embedding.row(token as usize);
            for i in 0..d {
                running[i] += emb[i];
            }
            let inv = 1.0 / (t + 1) as f64;
            let row = h.token_mut(0, t);
            for i in 0..d {
                row[i] = 0.5 * (emb[i] + running[i] * inv);
            }
        }

        // Deeper layers: residual tanh of an affine map over a causal window mean.
        for l in 1..self.num_layers {
            let (w, b) = &self.transitions[l - 1];
            for t in 0..n {
                let lo = t.saturating_sub(ENCODER_WINDOW - 1);
                let mut mean = vec![0.0; d];
                for s in lo..=t {
                    let prev = h.token(l - 1, s);
                    for i in 0..d {
                        mean[i] += prev[i];
                    }
                }
                let inv = 1.0 / (t - lo + 1) as f64;
                for m in &mut mean {
                    *m *= inv;
                }
                let mut residual = vec![0.0; d];
                for (i, r) in residual.iter_mut().enumerate() {
                    let mut acc = b[(0, i)];
                    for (j, m) in mean.iter().enumerate() {
                        acc += m * w[(j, i)];
                    }
                    *r = acc.tanh();
                }
                let prev_row: Vec<f64> = h.token(l - 1, t).to_vec();
                let out = h.token_mut(l, t);
                for i in 0..d {
                    out[i] = prev_row[i] + residual[i];
                }
            }
        }
        Ok(h)
    }
}

/// One synthetic retrieval sample: a token sequence with planted adjacent
/// (key, value) pairs, a query key, and the value expected as the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalTask {
    pub tokens: Vec<u32>,
    pub query_key: u32,
    pub answer_value: u32,
    pub pair_positions: Vec<usize>,
}

impl RetrievalTask {
    /// Checks the structural invariants; `line` is used for error context.
    fn validate(&self, line: usize) -> Result<()> {
        let fail = |reason: String| StatesError::TaskInvalid { line, reason };
        if self.tokens.is_empty() {
            return Err(fail("empty token sequence".into()));
        }
        if self.pair_positions.is_empty() {
            return Err(fail("no planted pairs".into()));
        }
        let mut matches = 0;
        for &p in &self.pair_positions {
            if p + 1 >= self.tokens.len() {
                return Err(fail(format!("pair position {p} out of range")));
            }
            if self.tokens[p] == self.query_key {
                matches += 1;
                if self.tokens[p + 1] != self.answer_value {
                    return Err(fail(format!(
                        "pair at {p} maps query key to {} instead of the recorded answer {}",
                        self.tokens[p + 1],
                        self.answer_value
                    )));
                }
            }
        }
        if matches != 1 {
            return Err(fail(format!(
                "query key matches {matches} planted pairs (expected exactly 1)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TaskConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_pairs: usize,
}

/// Generates retrieval tasks.
///
/// Key and value ids occupy `[0, 2·num_pairs)` (shuffled per task, keys
/// distinct from values); filler tokens are drawn from the remaining id
/// range so the answer is recoverable only through the planted pair.
/// Pair placement shuffles a multiset of pair-blocks and filler slots, so
/// every admissible arrangement is reachable and generation never stalls.
pub fn gen_retrieval_batch(
    rng: &mut Rng,
    cfg: &TaskConfig,
    count: usize,
) -> Result<Vec<RetrievalTask>> {
    if cfg.num_pairs == 0 {
        return Err(StatesError::InfeasibleConfig("num_pairs must be ≥ 1".into()));
    }
    if cfg.vocab_size < 2 * cfg.num_pairs + 2 {
        return Err(StatesError::InfeasibleConfig(format!(
            "vocab_size {} < 2*num_pairs + 2 = {}",
            cfg.vocab_size,
            2 * cfg.num_pairs + 2
        )));
    }
    if cfg.seq_len < 2 * cfg.num_pairs {
        return Err(StatesError::InfeasibleConfig(format!(
            "seq_len {} < 2*num_pairs = {}",
            cfg.seq_len,
            2 * cfg.num_pairs
        )));
    }
    let reserved = 2 * cfg.num_pairs;
    let mut tasks = Vec::with_capacity(count);
    for _ in 0..count {
        // Keys and values: a random split of the reserved id range.
        let mut ids: Vec<u32> = (0..reserved as u32).collect();
        rng.shuffle(&mut ids);
        let keys = &ids[..cfg.num_pairs];
        let values = &ids[cfg.num_pairs..];

        // Arrange pair blocks and filler slots, then expand to positions.
        #[derive(Clone, Copy)]
        enum Slot {
            Pair(usize),
            Filler,
        }
        let mut slots: Vec<Slot> = (0..cfg.num_pairs)
            .map(Slot::Pair)
            .chain(std::iter::repeat(Slot::Filler).take(cfg.seq_len - reserved))
            .collect();
        rng.shuffle(&mut slots);

        let mut tokens = Vec::with_capacity(cfg.seq_len);
        let mut pair_positions = vec![0usize; cfg.num_pairs];
        for slot in &slots {
            match slot {
                Slot::Pair(i) => {
                    pair_positions[*i] = tokens.len();
                    tokens.push(keys[*i]);
                    tokens.push(values[*i]);
                }
                Slot::Filler => {
                    let filler =
                        reserved as u32 + rng.below((cfg.vocab_size - reserved) as u64) as u32;
                    tokens.push(filler);
                }
            }
        }
        let pick = rng.below(cfg.num_pairs as u64) as usize;
        let task = RetrievalTask {
            tokens,
            query_key: keys[pick],
            answer_value: values[pick],
            pair_positions,
        };
        debug_assert!(task.validate(0).is_ok());
        tasks.push(task);
    }
    Ok(tasks)
}

/// Serializes tasks as JSON lines.
pub fn tasks_to_jsonl(tasks: &[RetrievalTask]) -> String {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).unwrap());
        out.push('\n');
    }
    out
}

/// Parses and validates a JSONL task file.
pub fn tasks_from_jsonl(text: &str) -> Result<Vec<RetrievalTask>> {
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: RetrievalTask = serde_json::from_str(line)
            .map_err(|source| StatesError::TaskSyntax { line: i + 1, source })?;
        task.validate(i + 1)?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn save_tasks(tasks: &[RetrievalTask], path: &Path) -> Result<()> {
    std::fs::write(path, tasks_to_jsonl(tasks))?;
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<Vec<RetrievalTask>> {
    tasks_from_jsonl(&std::fs::read_to_string(path)?)
}
