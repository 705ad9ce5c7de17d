use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::parser::ParserConfig;
use crate::tokenizer::SpecialTokens;

/// Where (and whether) the parser sits in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain transformer encoder, no parser.
    Vanilla,
    /// Parser reads the embeddings and gates every layer.
    S1,
    /// The first `n_front` layers run ungated; the parser reads their output
    /// and gates the remaining layers.
    S2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::S1 => "s1",
            Variant::S2 => "s2",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "s1" => Ok(Variant::S1),
            "s2" => Ok(Variant::S2),
            other => Err(format!("unknown variant {other:?} (expected vanilla, s1 or s2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    /// Ungated layers before the parser; only meaningful for [`Variant::S2`].
    pub n_front: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub parser: Option<ParserConfig>,
    /// Layer norm and dropout directly on the embedding sum.
    pub embed_norm_dropout: bool,
    /// Output projection shares the token embedding table.
    pub tie_output: bool,
}

impl ModelConfig {
    /// Base-size encoder (12 layers, 12 heads, width 768) for a vocabulary.
    pub fn base(variant: Variant, vocab_size: usize) -> Self {
        let parser = (variant != Variant::Vanilla).then(|| ParserConfig::standard(768));
        Self {
            variant,
            n_layers: 12,
            n_front: 4,
            n_heads: 12,
            d_model: 768,
            d_ffn: 3072,
            dropout: 0.1,
            max_seq_len: 128,
            vocab_size,
            parser,
            embed_norm_dropout: false,
            tie_output: true,
        }
    }

    /// A small configuration for tests and quick experiments.
    pub fn tiny(variant: Variant, vocab_size: usize) -> Self {
        let parser = (variant != Variant::Vanilla).then(|| ParserConfig {
            n_conv_layers: 2,
            kernel_size: 3,
            hidden_width: 16,
            tau_scope: 1.0,
            tau_height: 1.0,
        });
        Self {
            variant,
            n_layers: 2,
            n_front: 1,
            n_heads: 2,
            d_model: 16,
            d_ffn: 32,
            dropout: 0.0,
            max_seq_len: 32,
            vocab_size,
            parser,
            embed_norm_dropout: false,
            tie_output: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Index of the first layer the parser gates.
    pub fn first_gated_layer(&self) -> Option<usize> {
        match self.variant {
            Variant::Vanilla => None,
            Variant::S1 => Some(0),
            Variant::S2 => Some(self.n_front),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |rule: &str| Err(ModelError::Config(rule.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return fail("n_heads, d_model and d_ffn must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive");
        }
        if self.vocab_size <= SpecialTokens::COUNT {
            return Err(ModelError::Config(format!(
                "vocab_size ({}) must exceed the {} special tokens",
                self.vocab_size,
                SpecialTokens::COUNT
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        match (self.variant, &self.parser) {
            (Variant::Vanilla, Some(_)) => return fail("vanilla variant must not have a parser"),
            (Variant::S1 | Variant::S2, None) => return fail("s1 and s2 variants need a parser"),
            (_, Some(p)) => p.validate().map_err(|e| ModelError::Config(e.to_string()))?,
            _ => {}
        }
        if self.variant == Variant::S2 && !(1 <= self.n_front && self.n_front < self.n_layers) {
            return Err(ModelError::Config(format!(
                "s2 needs 1 <= n_front < n_layers (n_front {}, n_layers {})",
                self.n_front, self.n_layers
            )));
        }
        if self.variant == Variant::S1 && self.n_layers == 0 {
            return fail("s1 needs at least one layer to gate");
        }
        Ok(())
    }
}
