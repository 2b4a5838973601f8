//! Declarative run configuration: one TOML document holding every
//! hyperparameter, with strict unknown-key rejection. Command-line
//! overrides are applied to the parsed document before deserialization,
//! and every run re-emits the fully resolved document next to its outputs.

use crate::numerics::Rng;
use crate::states::{SyntheticEncoder, TaskConfig};
use crate::train::{ParamSpec, TrainConfig};
use crate::width::WidthVariant;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("config key error: {0}")]
    Key(String),
    #[error("config value error for {key}: {reason}")]
    Value { key: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn default_seed() -> u64 {
    42
}
fn default_vocab() -> usize {
    64
}
fn default_enc_layers() -> usize {
    4
}
fn default_hidden() -> usize {
    32
}
fn default_seq_len() -> usize {
    128
}
fn default_pairs() -> usize {
    4
}
fn default_train_tasks() -> usize {
    512
}
fn default_heldout_tasks() -> usize {
    500
}
fn default_anchor() -> usize {
    32
}
fn default_gate_hidden() -> usize {
    256
}
fn default_util_dim() -> usize {
    256
}
fn default_mlp_hidden() -> usize {
    256
}
fn default_dec_dim() -> usize {
    32
}
fn default_tau() -> f64 {
    1.0
}
fn default_variant() -> String {
    "transport".into()
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_segment_len() -> usize {
    128
}
fn default_iters() -> usize {
    30
}
fn default_ratio() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-4
}
fn default_clip() -> f64 {
    20.0
}
fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    8
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            vocab_size: default_vocab(),
            num_layers: default_enc_layers(),
            hidden_dim: default_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seq_len: usize,
    pub num_pairs: usize,
    pub train_tasks: usize,
    pub heldout_tasks: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seq_len: default_seq_len(),
            num_pairs: default_pairs(),
            train_tasks: default_train_tasks(),
            heldout_tasks: default_heldout_tasks(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressSection {
    pub anchor_dim: usize,
    pub gate_hidden: usize,
    pub util_dim: usize,
    pub mlp_hidden: usize,
    pub dec_dim: usize,
    pub tau: f64,
    pub shared_layer_proj: bool,
    /// "transport" or "window".
    pub variant: String,
}

impl Default for CompressSection {
    fn default() -> Self {
        CompressSection {
            anchor_dim: default_anchor(),
            gate_hidden: default_gate_hidden(),
            util_dim: default_util_dim(),
            mlp_hidden: default_mlp_hidden(),
            dec_dim: default_dec_dim(),
            tau: default_tau(),
            shared_layer_proj: false,
            variant: default_variant(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtSection {
    pub epsilon: f64,
    pub segment_len: usize,
    pub iters: usize,
    pub ratio: usize,
}

impl Default for OtSection {
    fn default() -> Self {
        OtSection {
            epsilon: default_epsilon(),
            segment_len: default_segment_len(),
            iters: default_iters(),
            ratio: default_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_lr(),
            grad_clip_norm: default_clip(),
            steps: default_steps(),
            batch_size: default_batch(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

/// The whole declarative run document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub encoder: EncoderSection,
    pub data: DataSection,
    pub compress: CompressSection,
    pub ot: OtSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<RunConfig> {
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Key(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a document and applies `section.key=value` overrides on top,
    /// then re-validates. Unknown keys (in the file or an override) fail.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        Self::from_value(value)
    }

    /// The fully resolved document with all defaults filled in.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    /// SHA-256 of the resolved document, hex-encoded.
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: String| ConfigError::Value {
            key: key.into(),
            reason,
        };
        if self.encoder.vocab_size < 2 * self.data.num_pairs + 2 {
            return Err(err(
                "encoder.vocab_size",
                format!(
                    "must be at least 2*num_pairs + 2 = {}",
                    2 * self.data.num_pairs + 2
                ),
            ));
        }
        if self.data.seq_len < 2 * self.data.num_pairs {
            return Err(err(
                "data.seq_len",
                format!("must be at least 2*num_pairs = {}", 2 * self.data.num_pairs),
            ));
        }
        if self.ot.ratio == 0 {
            return Err(err("ot.ratio", "must be at least 1".into()));
        }
        if self.ot.segment_len == 0
            || self.ot.segment_len < self.ot.ratio
            || self.ot.segment_len % self.ot.ratio != 0
        {
            return Err(err(
                "ot.segment_len",
                format!("must be a positive multiple of ot.ratio = {}", self.ot.ratio),
            ));
        }
        if !(self.ot.epsilon > 0.0) {
            return Err(err("ot.epsilon", "must be positive".into()));
        }
        if self.ot.iters == 0 {
            return Err(err("ot.iters", "must be at least 1".into()));
        }
        if self.data.seq_len < self.ot.ratio {
            return Err(err(
                "data.seq_len",
                format!("must be at least ot.ratio = {}", self.ot.ratio),
            ));
        }
        if !(self.compress.tau > 0.0) {
            return Err(err("compress.tau", "must be positive".into()));
        }
        if self.compress.variant != "transport" && self.compress.variant != "window" {
            return Err(err(
                "compress.variant",
                format!(
                    "must be \"transport\" or \"window\", got {:?}",
                    self.compress.variant
                ),
            ));
        }
        if !(self.train.learning_rate >= 0.0) {
            return Err(err("train.learning_rate", "must be nonnegative".into()));
        }
        if !(self.train.grad_clip_norm > 0.0) {
            return Err(err("train.grad_clip_norm", "must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(err("train.batch_size", "must be at least 1".into()));
        }
        for (key, v) in [
            ("encoder.vocab_size", self.encoder.vocab_size),
            ("encoder.num_layers", self.encoder.num_layers),
            ("encoder.hidden_dim", self.encoder.hidden_dim),
            ("data.seq_len", self.data.seq_len),
            ("data.num_pairs", self.data.num_pairs),
            ("compress.anchor_dim", self.compress.anchor_dim),
            ("compress.gate_hidden", self.compress.gate_hidden),
            ("compress.util_dim", self.compress.util_dim),
            ("compress.mlp_hidden", self.compress.mlp_hidden),
            ("compress.dec_dim", self.compress.dec_dim),
        ] {
            if v == 0 {
                return Err(err(key, "must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn param_spec(&self) -> ParamSpec {
        ParamSpec {
            num_layers: self.encoder.num_layers,
            hidden_dim: self.encoder.hidden_dim,
            gate_hidden: self.compress.gate_hidden,
            anchor_dim: self.compress.anchor_dim,
            util_dim: self.compress.util_dim,
            mlp_hidden: self.compress.mlp_hidden,
            dec_dim: self.compress.dec_dim,
            vocab_size: self.encoder.vocab_size,
            tau: self.compress.tau,
            shared_layer_proj: self.compress.shared_layer_proj,
            epsilon: self.ot.epsilon,
            segment_len: self.ot.segment_len,
            sinkhorn_iters: self.ot.iters,
            ratio: self.ot.ratio,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            grad_clip_norm: self.train.grad_clip_norm,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seed: self.run.seed,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            adam_eps: self.train.adam_eps,
        }
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            seq_len: self.data.seq_len,
            vocab_size: self.encoder.vocab_size,
            num_pairs: self.data.num_pairs,
        }
    }

    pub fn variant(&self) -> WidthVariant {
        if self.compress.variant == "window" {
            WidthVariant::WindowAttention
        } else {
            WidthVariant::Transport
        }
    }

    /// The root RNG; every module derives a labeled child from it.
    pub fn root_rng(&self) -> Rng {
        Rng::new(self.run.seed)
    }

    pub fn build_encoder(&self) -> SyntheticEncoder {
        SyntheticEncoder::new(
            self.encoder.vocab_size,
            self.encoder.num_layers,
            self.encoder.hidden_dim,
            &self.root_rng().derive("encoder"),
        )
    }
}

/// Applies one `section.key=value` override to a parsed TOML document.
fn apply_override(doc: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Key(format!("malformed override key {key:?}")));
    }
    let mut cursor = doc;
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| ConfigError::Key(format!("{key}: {part} is not a table")))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| ConfigError::Key(format!("{key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

/// Interprets an override value the way TOML would: integer, float, bool,
/// then string.
fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    match raw {
        "true" => toml::Value::Boolean(true),
        "false" => toml::Value::Boolean(false),
        _ => toml::Value::String(raw.to_string()),
    }
}
