//! Pseudo-perplexity, minimal-pair accuracy, tree induction scoring and
//! score comparisons between models.
//!
//! Scoring goes through the [`MaskedLm`] trait so tests can plug in models
//! with known outputs. A sentence is scored by masking each of its
//! non-special tokens in turn and reading the log-probability of the
//! original token at that position.

mod reports;
mod trees;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use reports::{delta_report, delta_table, read_reports, write_reports, DeltaRow};
pub use trees::{
    induce_trees, parse_gold_trees, uas_undirected, word_dependencies, write_trees, GoldTree, TreeReport,
};

use crate::model::{Model, ModelError};
use crate::tensor::Tensor;
use crate::tokenizer::{SpecialTokens, TokenizerModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sentence {0:?} has no scoreable tokens")]
    EmptySentence(String),
    #[error("no sentences left after trimming the {trimmed} longest of {total}")]
    AllTrimmed { trimmed: usize, total: usize },
    #[error("no minimal pairs to score")]
    NoPairs,
    #[error("minimal pair {index}: {message}")]
    BadPair { index: usize, message: String },
    #[error("gold edge set is empty")]
    EmptyGold,
    #[error("model has no parser; tree induction needs an s1 or s2 model")]
    NoParser,
    #[error("baseline model {0:?} has no scores")]
    MissingBaseline(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that yields per-position log-probabilities over a vocabulary.
pub trait MaskedLm: Sync {
    fn vocab_size(&self) -> usize;

    /// `L × vocab_size` log-probabilities for every position of `ids`.
    fn log_probs(&self, ids: &[u32]) -> Result<Tensor, EvalError>;
}

impl MaskedLm for Model {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn log_probs(&self, ids: &[u32]) -> Result<Tensor, EvalError> {
        let logits = self.forward(ids, &vec![false; ids.len()])?.logits;
        Ok(log_softmax_rows(&logits))
    }
}

pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.shape()[1];
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::from_vec(logits.shape().to_vec(), data).expect("same shape")
}

/// Result of masking every scoreable position of one sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceScore {
    pub log_likelihood: f64,
    pub n_tokens: usize,
    /// Positions where the original token had the highest probability.
    pub n_correct: usize,
}

/// Scores an already-encoded id sequence (specials are neither masked nor counted).
pub fn score_ids<M: MaskedLm + ?Sized>(model: &M, ids: &[u32]) -> Result<SentenceScore, EvalError> {
    let specials = SpecialTokens::standard();
    let positions: Vec<usize> = (0..ids.len()).filter(|&t| !specials.is_special(ids[t])).collect();
    let per_position = positions
        .par_iter()
        .map(|&t| {
            let mut masked = ids.to_vec();
            masked[t] = specials.mask;
            let lp = model.log_probs(&masked)?;
            let row = lp.row(t);
            let target = row[ids[t] as usize];
            // strict: a tie with another id does not count as correct
            let correct = row.iter().enumerate().all(|(j, &v)| j == ids[t] as usize || v < target);
            Ok((target, correct))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(SentenceScore {
        log_likelihood: per_position.iter().map(|(lp, _)| lp).sum(),
        n_tokens: positions.len(),
        n_correct: per_position.iter().filter(|(_, c)| *c).count(),
    })
}

/// Pseudo-log-likelihood of a sentence under its own tokenization.
pub fn pseudo_log_likelihood<M: MaskedLm + ?Sized>(
    model: &M,
    tokenizer: &TokenizerModel,
    sentence: &str,
) -> Result<SentenceScore, EvalError> {
    let ids = tokenizer.encode_sentence(sentence);
    if ids.len() <= 2 {
        return Err(EvalError::EmptySentence(sentence.to_string()));
    }
    score_ids(model, &ids)
}

/// Running totals for corpus pseudo-perplexity.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpplAccumulator {
    pub log_likelihood: f64,
    pub n_tokens: usize,
    pub n_correct: usize,
    pub n_sentences: usize,
}

impl PpplAccumulator {
    pub fn add(&mut self, s: &SentenceScore) {
        self.log_likelihood += s.log_likelihood;
        self.n_tokens += s.n_tokens;
        self.n_correct += s.n_correct;
        self.n_sentences += 1;
    }

    /// `exp(-Σ PLL / Σ tokens)`.
    pub fn pppl(&self) -> f64 {
        (-self.log_likelihood / self.n_tokens as f64).exp()
    }

    pub fn accuracy(&self) -> f64 {
        self.n_correct as f64 / self.n_tokens as f64
    }
}

/// Indices of the sentences kept after dropping the `trim_longest` longest
/// (by token count; among equal lengths the earlier sentence goes first).
pub fn retained_after_trim(lengths: &[usize], trim_longest: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    let mut keep: Vec<usize> = order.into_iter().skip(trim_longest).collect();
    keep.sort_unstable();
    keep
}

/// Corpus pseudo-perplexity after trimming the longest sentences.
pub fn corpus_pppl<M: MaskedLm + ?Sized, S: AsRef<str>>(
    model: &M,
    tokenizer: &TokenizerModel,
    sentences: &[S],
    trim_longest: usize,
) -> Result<PpplAccumulator, EvalError> {
    let encoded: Vec<Vec<u32>> = sentences.iter().map(|s| tokenizer.encode_sentence(s.as_ref())).collect();
    let lengths: Vec<usize> = encoded.iter().map(|ids| ids.len() - 2).collect();
    let keep = retained_after_trim(&lengths, trim_longest);
    if keep.is_empty() {
        return Err(EvalError::AllTrimmed { trimmed: trim_longest, total: sentences.len() });
    }
    let mut acc = PpplAccumulator::default();
    for i in keep {
        if lengths[i] == 0 {
            return Err(EvalError::EmptySentence(sentences[i].as_ref().to_string()));
        }
        acc.add(&score_ids(model, &encoded[i])?);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pppl,
    Accuracy,
    UasUndirected,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Pppl => "pppl",
            Metric::Accuracy => "accuracy",
            Metric::UasUndirected => "uas_undirected",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pppl" => Ok(Metric::Pppl),
            "accuracy" => Ok(Metric::Accuracy),
            "uas_undirected" => Ok(Metric::UasUndirected),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// One score of one model on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub phenomenon: String,
    pub sentence_good: String,
    pub sentence_bad: String,
}

/// Reads one JSON object per non-blank line.
pub fn read_pairs(text: &str) -> Result<Vec<MinimalPair>, EvalError> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: MinimalPair =
            serde_json::from_str(line).map_err(|e| EvalError::Format { line: i + 1, message: e.to_string() })?;
        if pair.sentence_good.trim().is_empty() || pair.sentence_bad.trim().is_empty() {
            return Err(EvalError::Format { line: i + 1, message: "empty sentence in pair".into() });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// 1 if the good sentence scores higher, 0.5 on a tie, 0 otherwise.
pub fn pair_credit(good: f64, bad: f64) -> f64 {
    if good > bad {
        1.0
    } else if good == bad {
        0.5
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairsReport {
    pub overall: EvalReport,
    /// Per phenomenon, sorted by tag.
    pub by_phenomenon: Vec<EvalReport>,
}

impl PairsReport {
    pub fn all(&self) -> Vec<EvalReport> {
        let mut rows = vec![self.overall.clone()];
        rows.extend(self.by_phenomenon.iter().cloned());
        rows
    }
}

/// Zero-shot minimal-pair accuracy by pseudo-log-likelihood comparison.
pub fn minimal_pairs_accuracy<M: MaskedLm + ?Sized>(
    model: &M,
    tokenizer: &TokenizerModel,
    pairs: &[MinimalPair],
    model_name: &str,
) -> Result<PairsReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::NoPairs);
    }
    let mut by_tag: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (index, pair) in pairs.iter().enumerate() {
        let score = |s: &str| {
            pseudo_log_likelihood(model, tokenizer, s)
                .map(|r| r.log_likelihood)
                .map_err(|e| EvalError::BadPair { index, message: e.to_string() })
        };
        let credit = pair_credit(score(&pair.sentence_good)?, score(&pair.sentence_bad)?);
        total += credit;
        let slot = by_tag.entry(&pair.phenomenon).or_default();
        slot.0 += credit;
        slot.1 += 1;
    }
    let report = |task: String, sum: f64, n: usize| EvalReport {
        model: model_name.to_string(),
        task,
        metric: Metric::Accuracy,
        value: sum / n as f64,
        n_items: n,
    };
    Ok(PairsReport {
        overall: report("pairs".into(), total, pairs.len()),
        by_phenomenon: by_tag.into_iter().map(|(tag, (sum, n))| report(format!("pairs:{tag}"), sum, n)).collect(),
    })
}
