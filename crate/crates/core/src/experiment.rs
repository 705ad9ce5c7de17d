//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted (`model.n_layers`, `train.lr_peak`, ...). Lines starting
//! with `#` and blank lines are ignored. Every key has a default, so an empty
//! file is a complete configuration; [`ExperimentConfig::to_text`] prints the
//! fully resolved form, which parses back to the same settings.
//!
//! ```
//! use structlm::experiment::ExperimentConfig;
//!
//! let cfg = ExperimentConfig::from_text("model.variant = s2\ntrain.max_steps = 20\n").unwrap();
//! assert_eq!(cfg.train.max_steps, 20);
//! let text = cfg.to_text();
//! assert_eq!(ExperimentConfig::from_text(&text).unwrap().to_text(), text);
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, Variant};
use crate::parser::ParserConfig;
use crate::pretrain::{Packing, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    pub train_corpus: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub reports_dir: Option<PathBuf>,
}

/// Architecture settings; the vocabulary size comes from the tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSettings {
    pub variant: Variant,
    pub n_layers: usize,
    pub n_front: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub embed_norm_dropout: bool,
    pub tie_output: bool,
}

impl Default for ArchSettings {
    fn default() -> Self {
        let base = ModelConfig::base(Variant::S1, 0);
        Self {
            variant: base.variant,
            n_layers: base.n_layers,
            n_front: base.n_front,
            n_heads: base.n_heads,
            d_model: base.d_model,
            d_ffn: base.d_ffn,
            dropout: base.dropout,
            max_seq_len: base.max_seq_len,
            embed_norm_dropout: base.embed_norm_dropout,
            tie_output: base.tie_output,
        }
    }
}

/// Parser settings; `hidden_width` of `None` follows `model.d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParserSettings {
    pub n_conv_layers: usize,
    pub kernel_size: usize,
    pub hidden_width: Option<usize>,
    pub tau_scope: f64,
    pub tau_height: f64,
}

impl Default for ParserSettings {
    fn default() -> Self {
        Self { n_conv_layers: 4, kernel_size: 9, hidden_width: None, tau_scope: 1.0, tau_height: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub tokenizer_vocab_size: usize,
    pub model: ArchSettings,
    pub parser: ParserSettings,
    /// `train.seed` is ignored here; the top-level seed is copied in by [`ExperimentConfig::train_config`].
    pub train: TrainConfig,
    pub trim_longest: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            tokenizer_vocab_size: 32_000,
            model: ArchSettings::default(),
            parser: ParserSettings::default(),
            train: TrainConfig::default(),
            trim_longest: 100,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.to_string(), message: e.to_string() })
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: line.to_string() })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, text: assignment.to_string() })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let p = &mut self.paths;
        let (m, pr, t) = (&mut self.model, &mut self.parser, &mut self.train);
        match key {
            "seed" => self.seed = parse(key, value)?,
            "paths.train_corpus" => p.train_corpus = path(value),
            "paths.dev_corpus" => p.dev_corpus = path(value),
            "paths.test_corpus" => p.test_corpus = path(value),
            "paths.tokenizer" => p.tokenizer = path(value),
            "paths.output_dir" => p.output_dir = path(value),
            "paths.reports_dir" => p.reports_dir = path(value),
            "tokenizer.vocab_size" => self.tokenizer_vocab_size = parse(key, value)?,
            "model.variant" => m.variant = parse(key, value)?,
            "model.n_layers" => m.n_layers = parse(key, value)?,
            "model.n_front" => m.n_front = parse(key, value)?,
            "model.n_heads" => m.n_heads = parse(key, value)?,
            "model.d_model" => m.d_model = parse(key, value)?,
            "model.d_ffn" => m.d_ffn = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "model.max_seq_len" => m.max_seq_len = parse(key, value)?,
            "model.embed_norm_dropout" => m.embed_norm_dropout = parse(key, value)?,
            "model.tie_output" => m.tie_output = parse(key, value)?,
            "parser.n_conv_layers" => pr.n_conv_layers = parse(key, value)?,
            "parser.kernel_size" => pr.kernel_size = parse(key, value)?,
            "parser.hidden_width" => pr.hidden_width = if value == "auto" { None } else { Some(parse(key, value)?) },
            "parser.tau_scope" => pr.tau_scope = parse(key, value)?,
            "parser.tau_height" => pr.tau_height = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.seq_len" => t.seq_len = parse(key, value)?,
            "train.lr_peak" => t.lr_peak = parse(key, value)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.max_steps" => t.max_steps = parse(key, value)?,
            "train.mask_prob" => t.mask_prob = parse(key, value)?,
            "train.mask_token_frac" => t.mask_token_frac = parse(key, value)?,
            "train.random_token_frac" => t.random_token_frac = parse(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.packing" => t.packing = parse(key, value)?,
            "train.parallel" => t.parallel = parse(key, value)?,
            "eval.trim_longest" => self.trim_longest = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let p = &self.paths;
        let shown = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let (m, pr, t) = (&self.model, &self.parser, &self.train);
        let packing = match t.packing {
            Packing::Concat => "concat",
            Packing::Sentence => "sentence",
        };
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("paths.train_corpus", shown(&p.train_corpus)),
            ("paths.dev_corpus", shown(&p.dev_corpus)),
            ("paths.test_corpus", shown(&p.test_corpus)),
            ("paths.tokenizer", shown(&p.tokenizer)),
            ("paths.output_dir", shown(&p.output_dir)),
            ("paths.reports_dir", shown(&p.reports_dir)),
            ("tokenizer.vocab_size", self.tokenizer_vocab_size.to_string()),
            ("model.variant", m.variant.name().to_string()),
            ("model.n_layers", m.n_layers.to_string()),
            ("model.n_front", m.n_front.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.d_ffn", m.d_ffn.to_string()),
            ("model.dropout", m.dropout.to_string()),
            ("model.max_seq_len", m.max_seq_len.to_string()),
            ("model.embed_norm_dropout", m.embed_norm_dropout.to_string()),
            ("model.tie_output", m.tie_output.to_string()),
            ("parser.n_conv_layers", pr.n_conv_layers.to_string()),
            ("parser.kernel_size", pr.kernel_size.to_string()),
            ("parser.hidden_width", pr.hidden_width.unwrap_or(m.d_model).to_string()),
            ("parser.tau_scope", pr.tau_scope.to_string()),
            ("parser.tau_height", pr.tau_height.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seq_len", t.seq_len.to_string()),
            ("train.lr_peak", t.lr_peak.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.mask_prob", t.mask_prob.to_string()),
            ("train.mask_token_frac", t.mask_token_frac.to_string()),
            ("train.random_token_frac", t.random_token_frac.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.packing", packing.to_string()),
            ("train.parallel", t.parallel.to_string()),
            ("eval.trim_longest", self.trim_longest.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Model configuration for a tokenizer with `vocab_size` ids, validated.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let parser = (m.variant != Variant::Vanilla).then(|| ParserConfig {
            n_conv_layers: self.parser.n_conv_layers,
            kernel_size: self.parser.kernel_size,
            hidden_width: self.parser.hidden_width.unwrap_or(m.d_model),
            tau_scope: self.parser.tau_scope,
            tau_height: self.parser.tau_height,
        });
        let cfg = ModelConfig {
            variant: m.variant,
            n_layers: m.n_layers,
            n_front: m.n_front,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ffn: m.d_ffn,
            dropout: m.dropout,
            max_seq_len: m.max_seq_len,
            vocab_size,
            parser,
            embed_norm_dropout: m.embed_norm_dropout,
            tie_output: m.tie_output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training configuration with the top-level seed, validated.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig { seed: self.seed, ..self.train.clone() };
        cfg.validate().map_err(|e| ConfigError::Value { key: "train".into(), message: e.to_string() })?;
        Ok(cfg)
    }
}
