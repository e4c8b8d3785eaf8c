//! Run configuration as flat `key=value` text.
//!
//! Every run writes its fully resolved config next to its outputs; feeding
//! that file back reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{Tokenizer, TokenizerMode};
use crate::error::{Error, Result};
use crate::masking::{BlockMaskingPolicy, CorruptionPolicy};
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveKind, PretrainConfig, TrainConfig};

/// Environment variable consulted for the default seed.
pub const SEED_ENV: &str = "PMLM_SEED";
pub const DEFAULT_SEED: u64 = 42;
/// File name of the resolved config written beside run outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Beam search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub alpha: f64,
    pub max_out: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            alpha: 0.7,
            max_out: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `vocab_size` is the model's embedding count; the vocabulary builder
    /// caps at `max_vocab`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveKind,
    pub masking: BlockMaskingPolicy,
    pub corruption: CorruptionPolicy,
    pub tokenizer: Tokenizer,
    pub max_vocab: usize,
    pub max_len: usize,
    pub label_smoothing: f64,
    pub decode: DecodeConfig,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub freeze_body: bool,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(0),
            train: TrainConfig {
                seed: default_seed(),
                ..TrainConfig::default()
            },
            objective: ObjectiveKind::default(),
            masking: BlockMaskingPolicy::default(),
            corruption: CorruptionPolicy::default(),
            tokenizer: Tokenizer::default(),
            max_vocab: 8000,
            max_len: 128,
            label_smoothing: 0.1,
            decode: DecodeConfig::default(),
            checkpoint_every: 500,
            log_every: 10,
            precision: Precision::default(),
            deterministic: false,
            freeze_body: false,
            corpus: None,
            out: None,
        }
    }
}

/// Seed from `PMLM_SEED` if set and numeric, else 42.
pub fn default_seed() -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(DEFAULT_SEED)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Base-size model dimensions with everything else unchanged.
    pub fn paper_size(mut self) -> Self {
        let v = self.model.vocab_size;
        let dropout = self.model.dropout;
        self.model = ModelConfig {
            dropout,
            ..ModelConfig::paper_size(v)
        };
        self
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            train: self.train.clone(),
            objective: self.objective,
            masking: self.masking,
            corruption: self.corruption,
        }
    }

    /// Model config with the vocabulary size filled in.
    pub fn model_for_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            ..self.model.clone()
        }
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "layers" => m.layers = parse(key, value)?,
            "hidden_size" => m.hidden_size = parse(key, value)?,
            "attention_heads" => m.heads = parse(key, value)?,
            "ffn_inner_hidden_size" => m.ffn_size = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "max_positions" => m.max_positions = parse(key, value)?,
            "relative_buckets" => m.relative_buckets = parse(key, value)?,
            "max_relative_position" => m.max_relative_distance = parse(key, value)?,
            "use_relative_bias" => m.use_relative_bias = parse_bool(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "training_steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.peak_lr = parse(key, value)?,
            "warmup_ratio" => t.warmup_ratio = parse(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_epsilon" => t.adam.eps = parse(key, value)?,
            "weight_decay" => t.adam.weight_decay = parse(key, value)?,
            "gradient_clipping" => t.grad_clip = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "objective" => self.objective = value.parse()?,
            "mask_ratio" => self.masking.ratio = parse(key, value)?,
            "block_probability" => self.masking.block_prob = parse(key, value)?,
            "min_block" => self.masking.min_block = parse(key, value)?,
            "max_block" => self.masking.max_block = parse(key, value)?,
            "mask_token_probability" => self.corruption.mask_prob = parse(key, value)?,
            "random_token_probability" => self.corruption.random_prob = parse(key, value)?,
            "tokenizer" => self.tokenizer.mode = value.parse::<TokenizerMode>()?,
            "lowercase" => self.tokenizer.lowercase = parse_bool(key, value)?,
            "max_vocab" => self.max_vocab = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "beam_size" => self.decode.beam = parse(key, value)?,
            "length_penalty" => self.decode.alpha = parse(key, value)?,
            "max_output_length" => self.decode.max_out = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "freeze_body" => self.freeze_body = parse_bool(key, value)?,
            "corpus" => self.corpus = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("layers", m.layers.to_string()),
            ("hidden_size", m.hidden_size.to_string()),
            ("attention_heads", m.heads.to_string()),
            ("ffn_inner_hidden_size", m.ffn_size.to_string()),
            ("vocab_size", m.vocab_size.to_string()),
            ("max_positions", m.max_positions.to_string()),
            ("relative_buckets", m.relative_buckets.to_string()),
            ("max_relative_position", m.max_relative_distance.to_string()),
            ("use_relative_bias", m.use_relative_bias.to_string()),
            ("dropout", m.dropout.to_string()),
            ("training_steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.peak_lr.to_string()),
            ("warmup_ratio", t.warmup_ratio.to_string()),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_epsilon", t.adam.eps.to_string()),
            ("weight_decay", t.adam.weight_decay.to_string()),
            ("gradient_clipping", t.grad_clip.to_string()),
            ("seed", t.seed.to_string()),
            ("objective", self.objective.to_string()),
            ("mask_ratio", self.masking.ratio.to_string()),
            ("block_probability", self.masking.block_prob.to_string()),
            ("min_block", self.masking.min_block.to_string()),
            ("max_block", self.masking.max_block.to_string()),
            ("mask_token_probability", self.corruption.mask_prob.to_string()),
            ("random_token_probability", self.corruption.random_prob.to_string()),
            ("tokenizer", self.tokenizer.mode.to_string()),
            ("lowercase", self.tokenizer.lowercase.to_string()),
            ("max_vocab", self.max_vocab.to_string()),
            ("max_len", self.max_len.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("beam_size", self.decode.beam.to_string()),
            ("length_penalty", self.decode.alpha.to_string()),
            ("max_output_length", self.decode.max_out.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("precision", self.precision.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("freeze_body", self.freeze_body.to_string()),
            ("corpus", path(&self.corpus)),
            ("out", path(&self.out)),
        ]
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies `key=value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_kv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv())
            .map_err(|e| Error::io(format!("writing config {}", path.display()), e))
    }

    /// Checks the pieces that can be checked before the vocabulary exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if self.max_len > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_len {} exceeds max_positions {}",
                self.max_len, self.model.max_positions
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if self.decode.beam == 0 || self.decode.max_out == 0 {
            return Err(Error::Config("beam_size and max_output_length must be at least 1".into()));
        }
        let c = &self.corruption;
        if c.mask_prob < 0.0 || c.random_prob < 0.0 || c.mask_prob + c.random_prob > 1.0 {
            return Err(Error::Config("corruption probabilities must sum to at most 1".into()));
        }
        let b = &self.masking;
        if b.min_block == 0 || b.min_block > b.max_block || !(0.0..=1.0).contains(&b.block_prob) {
            return Err(Error::Config("invalid block masking settings".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_optimizer_table() {
        let c = RunConfig::default();
        assert_eq!(c.train.adam.beta1, 0.9);
        assert_eq!(c.train.adam.beta2, 0.98);
        assert_eq!(c.train.adam.eps, 1e-6);
        assert_eq!(c.train.adam.weight_decay, 0.01);
        assert_eq!(c.train.grad_clip, 0.0);
        assert_eq!(c.train.peak_lr, 6e-4);
        assert_eq!(c.train.warmup_ratio, 0.048);
        assert_eq!(c.model.dropout, 0.1);
        assert_eq!(c.model.max_relative_distance, 128);
        assert_eq!(c.decode, DecodeConfig { beam: 5, alpha: 0.7, max_out: 48 });
        assert_eq!(c.label_smoothing, 0.1);
        assert_eq!((c.model.layers, c.model.hidden_size, c.model.heads), (4, 128, 4));
        let p = c.paper_size();
        assert_eq!((p.model.layers, p.model.hidden_size, p.model.heads), (12, 768, 12));
    }

    #[test]
    fn kv_round_trip() {
        let mut c = RunConfig::default();
        c.set("objective", "par").unwrap();
        c.set("learning_rate", "0.001").unwrap();
        c.set("corpus", "/tmp/data dir").unwrap();
        c.set("tokenizer", "char").unwrap();
        let back = RunConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_lines_are_reported() {
        let err = RunConfig::from_kv("layers=2\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = RunConfig::from_kv("flux=3").unwrap_err();
        assert!(err.to_string().contains("flux"));
        let err = RunConfig::from_kv("layers=two").unwrap_err();
        assert!(err.to_string().contains("layers"));
        assert!(RunConfig::from_kv("# comment\n\nlayers = 3\n").unwrap().model.layers == 3);
    }

    #[test]
    fn validation_catches_bad_lengths() {
        let mut c = RunConfig::default();
        c.max_len = 1000;
        assert!(c.validate().is_err());
        c.max_len = 64;
        assert!(c.validate().is_ok());
    }
}
