//! Run configuration: architecture, training, and task sections.
//!
//! Configs load from a TOML file with dotted keys; CLI `--set key=value`
//! overrides take precedence. Unknown keys are rejected with the list of
//! valid keys. Validation runs before any compute.

use crate::error::{Error, Result};
use crate::scalar::Dtype;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateActivation {
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularAdd,
    MajorityVote,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularAdd => "modular-add",
            TaskKind::MajorityVote => "majority-vote",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LbReduce {
    /// Average the per-(layer, round) terms before weighting by lambda.
    Mean,
    /// Sum them instead.
    Sum,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Decoder layers (L).
    pub layers: usize,
    /// Attention heads (H).
    pub heads: usize,
    /// Model width (d).
    pub dim: usize,
    /// Expert FFN inner width (d').
    pub ffn_dim: usize,
    /// Experts per layer (n).
    pub experts: usize,
    /// Active experts per token (k).
    pub active_experts: usize,
    /// Recurrent routing rounds (T).
    pub rounds: usize,
    /// GRU hidden width; when absent it is trunc(gru_hidden_scale * dim).
    pub gru_hidden: Option<usize>,
    pub gru_hidden_scale: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Vocabulary size (V).
    pub vocab: usize,
    /// Maximum sequence length accepted by a forward pass.
    pub max_seq: usize,
    pub seed: u64,
    pub precision: Dtype,
    /// Renormalize the surviving top-k weights to sum to one.
    pub renormalize_topk: bool,
    pub candidate_activation: CandidateActivation,
    pub rope_base: f64,
    /// Train token embeddings and the output head (they are not adapters
    /// and are reported outside the adapter census).
    pub train_embeddings: bool,
    /// Share one matrix between the embedding and the output head.
    pub tie_embeddings: bool,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            dim: 128,
            ffn_dim: 344,
            experts: 8,
            active_experts: 2,
            rounds: 3,
            gru_hidden: None,
            gru_hidden_scale: 0.1,
            lora_rank: 16,
            lora_alpha: 32.0,
            vocab: 512,
            max_seq: 64,
            seed: 42,
            precision: Dtype::F32,
            renormalize_topk: true,
            candidate_activation: CandidateActivation::Tanh,
            rope_base: 10000.0,
            train_embeddings: true,
            tie_embeddings: false,
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// GRU hidden width: explicit value, or scale * dim truncated toward zero.
    pub fn gru_dim(&self) -> usize {
        self.gru_hidden
            .unwrap_or((self.gru_hidden_scale * self.dim as f64) as usize)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.dim == 0 || self.ffn_dim == 0 || self.vocab == 0 {
            return fail("layers, dim, ffn_dim, and vocab must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "dim ({}) must be divisible by heads ({})",
                self.dim, self.heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head dim ({}) must be even for rotary positions",
                self.head_dim()
            ));
        }
        if self.experts == 0 {
            return fail("experts (n) must be positive".into());
        }
        if self.active_experts < 1 || self.active_experts > self.experts {
            return fail(format!(
                "active_experts (k={}) must satisfy 1 <= k <= n={}",
                self.active_experts, self.experts
            ));
        }
        if self.rounds < 1 {
            return fail(format!("rounds (T={}) must be >= 1", self.rounds));
        }
        let gd = self.gru_dim();
        if gd == 0 || gd >= self.dim {
            return fail(format!(
                "gru hidden width ({gd}) must lie in [1, dim={})",
                self.dim
            ));
        }
        if self.lora_rank == 0 || self.lora_alpha <= 0.0 {
            return fail("lora_rank must be >= 1 and lora_alpha positive".into());
        }
        if self.max_seq == 0 {
            return fail("max_seq must be positive".into());
        }
        Ok(())
    }
}

/// Optimization hyperparameters. The defaults are the reference training
/// settings; desk-scale runs shrink batch/accumulation through the config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub cutoff_len: usize,
    /// Load-balance loss weight (lambda).
    pub lambda: f64,
    /// Hard cap on optimizer steps; 0 derives the count from epochs.
    pub steps: usize,
    pub lb_reduce: LbReduce,
    /// Emit a metrics record every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 16,
            accum_steps: 8,
            dropout: 0.05,
            epochs: 2,
            cutoff_len: 512,
            lambda: 0.01,
            steps: 0,
            lb_reduce: LbReduce::Mean,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config(
                "batch_size and accum_steps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout ({}) must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda ({}) must be >= 0",
                self.lambda
            )));
        }
        if self.lr < 0.0 {
            return Err(Error::Config(format!("lr ({}) must be >= 0", self.lr)));
        }
        Ok(())
    }
}

/// Synthetic task parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Payload alphabet size (model vocab must cover it plus specials).
    pub vocab: usize,
    /// Payload length.
    pub len: usize,
    /// Training samples.
    pub samples: usize,
    /// Held-out samples, disjoint from training.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Copy,
            vocab: 32,
            len: 8,
            samples: 32,
            eval_samples: 32,
            seed: 7,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("task vocab must be >= 2".into()));
        }
        if self.len == 0 || self.samples == 0 {
            return Err(Error::Config(
                "task len and samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        // Tasks reserve ids 0 (BOS) and 1 (SEP) below the payload alphabet.
        if self.model.vocab < self.task.vocab + 2 {
            return Err(Error::Config(format!(
                "model vocab ({}) must cover task vocab ({}) plus 2 special tokens",
                self.model.vocab, self.task.vocab
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            Error::Config(format!("{e}\nvalid keys:\n  {}", valid_keys().join("\n  ")))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides with dotted paths into the sections.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self).expect("config to json");
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{ov}' must look like key=value"))
            })?;
            set_path(&mut tree, key.trim(), value.trim())?;
        }
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("override produced invalid config: {e}")))?;
        Ok(())
    }
}

fn set_path(tree: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || {
        Error::Config(format!(
            "unknown config key '{key}'; valid keys:\n  {}",
            valid_keys().join("\n  ")
        ))
    };
    let mut cursor = &mut *tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len().saturating_sub(1)] {
        cursor = cursor
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .ok_or_else(unknown)?;
    }
    let last = parts.last().ok_or_else(unknown)?;
    let slot = cursor
        .as_object_mut()
        .and_then(|m| m.get_mut(*last))
        .ok_or_else(unknown)?;
    *slot = parse_value_like(slot, raw)?;
    Ok(())
}

/// Parses `raw` following the type of the value currently in the slot.
fn parse_value_like(current: &serde_json::Value, raw: &str) -> Result<serde_json::Value> {
    use serde_json::Value;
    let bad = |want: &str| {
        Error::Config(format!("cannot parse '{raw}' as {want}"))
    };
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("bool"))?),
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            Value::Number(raw.parse::<i64>().map_err(|_| bad("integer"))?.into())
        }
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad("number"))?;
            serde_json::Number::from_f64(f)
                .map(Value::Number)
                .ok_or_else(|| bad("finite number"))?
        }
        Value::Null => {
            // Optional integer (gru_hidden): "none" clears it.
            if raw.eq_ignore_ascii_case("none") {
                Value::Null
            } else {
                Value::Number(raw.parse::<i64>().map_err(|_| bad("integer or 'none'"))?.into())
            }
        }
        Value::String(_) => Value::String(raw.to_string()),
        other => {
            return Err(Error::Config(format!(
                "cannot override structured value {other} with '{raw}'"
            )))
        }
    })
}

/// Every dotted key accepted by the config, derived from the defaults.
pub fn valid_keys() -> Vec<String> {
    let tree = serde_json::to_value(Config::default()).expect("config to json");
    let mut keys = Vec::new();
    collect_keys(&tree, String::new(), &mut keys);
    keys.sort();
    keys
}

fn collect_keys(v: &serde_json::Value, prefix: String, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_keys(child, p, out);
            }
        }
        _ => out.push(prefix),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_mirror_reference_settings() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.experts, 8);
        assert_eq!(cfg.model.active_experts, 2);
        assert_eq!(cfg.model.rounds, 3);
        assert_eq!(cfg.model.lora_rank, 16);
        assert_eq!(cfg.model.lora_alpha, 32.0);
        assert_eq!(cfg.model.gru_hidden_scale, 0.1);
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.accum_steps, 8);
        assert_eq!(cfg.train.dropout, 0.05);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.cutoff_len, 512);
        assert_eq!(cfg.train.lambda, 0.01);
    }

    #[test]
    fn gru_dim_truncates_toward_zero() {
        let mut m = ModelConfig::default();
        m.dim = 128;
        m.gru_hidden_scale = 0.1;
        assert_eq!(m.gru_dim(), 12); // int(12.8)
        m.gru_hidden = Some(20);
        assert_eq!(m.gru_dim(), 20);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut cfg = Config::default();
        let err = cfg
            .apply_overrides(&["model.bogus=3".to_string()])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown config key 'model.bogus'"));
        assert!(msg.contains("model.rounds"));
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_take_precedence_and_validate() {
        let mut cfg = Config::default();
        cfg.apply_overrides(&[
            "model.rounds=5".to_string(),
            "train.lambda=0.0".to_string(),
            "model.gru_hidden=16".to_string(),
        ])
        .unwrap();
        assert_eq!(cfg.model.rounds, 5);
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.model.gru_hidden, Some(16));

        cfg.apply_overrides(&["model.active_experts=99".to_string()])
            .unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::default();
        let text = cfg.to_toml_string();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_invalid_rounds_before_compute() {
        let mut cfg = Config::default();
        cfg.model.rounds = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
