//! Byte-level byte-pair-encoding tokenizer.
//!
//! Ids are laid out as: the five special tokens, then the 256 byte symbols,
//! then one id per distinct merged token in merge order. Text is split on
//! whitespace first; a single space preceding a word is kept as part of the
//! word and acts as its boundary marker, so decoding the ids of any text
//! gives the text back byte for byte.

mod analyze;
mod bytes;
mod io;
mod train;

use std::collections::HashMap;

use thiserror::Error;

pub use analyze::{analyze_vocab, VocabReport, VocabRow};
pub use train::{train_bpe, TrainedTokenizer, VocabShortfall};

/// Number of byte symbols in the base alphabet.
pub const BYTE_ALPHABET: usize = 256;

/// Smallest valid vocabulary: specials plus the byte alphabet.
pub const MIN_VOCAB_SIZE: usize = SpecialTokens::COUNT + BYTE_ALPHABET;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus contains no text")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is below the floor of {floor} (specials + byte alphabet)")]
    VocabTooSmall { requested: usize, floor: usize },
    #[error("token id {id} is out of range for a vocabulary of {vocab_size}")]
    UnknownId { id: u32, vocab_size: usize },
    #[error("tokenizer file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed ids of the special tokens; they occupy the lowest ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: u32,
    pub unk: u32,
    pub bos: u32,
    pub eos: u32,
    pub mask: u32,
}

impl SpecialTokens {
    pub const COUNT: usize = 5;
    pub const NAMES: [&'static str; Self::COUNT] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

    pub const fn standard() -> Self {
        Self { pad: 0, unk: 1, bos: 2, eos: 3, mask: 4 }
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < Self::COUNT
    }
}

/// A trained merge list and the vocabulary it induces. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    /// Byte content of every non-special token, indexed by id (empty for specials).
    tokens: Vec<Vec<u8>>,
    vocab: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
    specials: SpecialTokens,
}

impl TokenizerModel {
    /// The untrained model: specials and bytes only.
    pub(crate) fn base() -> Self {
        let mut tokens = vec![Vec::new(); SpecialTokens::COUNT];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let vocab = tokens
            .iter()
            .enumerate()
            .skip(SpecialTokens::COUNT)
            .map(|(id, t)| (t.clone(), id as u32))
            .collect();
        Self {
            tokens,
            vocab,
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
            specials: SpecialTokens::standard(),
        }
    }

    /// Appends a merge, creating the merged token unless it already exists.
    pub(crate) fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut merged = self.tokens[left as usize].clone();
        merged.extend_from_slice(&self.tokens[right as usize]);
        let id = match self.vocab.get(&merged) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.vocab.insert(merged.clone(), id);
                self.tokens.push(merged);
                id
            }
        };
        self.merge_ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn byte_id(&self, b: u8) -> u32 {
        (SpecialTokens::COUNT + b as usize) as u32
    }

    /// Whether `id` was produced by a merge (rather than being a special or a byte).
    pub fn is_merged(&self, id: u32) -> bool {
        id as usize >= MIN_VOCAB_SIZE
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Printable single-line form of a token (special tokens by name).
    pub fn token_display(&self, id: u32) -> Option<String> {
        if self.specials.is_special(id) {
            return Some(SpecialTokens::NAMES[id as usize].to_string());
        }
        self.token_bytes(id).map(bytes::to_display)
    }

    /// Id of a token given in display form.
    pub fn token_id(&self, display: &str) -> Option<u32> {
        if let Some(i) = SpecialTokens::NAMES.iter().position(|n| *n == display) {
            return Some(i as u32);
        }
        self.vocab.get(&bytes::from_display(display)?).copied()
    }

    /// Applies merges in training order to each pre-tokenized piece.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in bytes::pre_tokenize(text) {
            ids.extend(self.encode_piece(piece.as_bytes()));
        }
        ids
    }

    /// Encodes and wraps in begin/end markers.
    pub fn encode_sentence(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.specials.bos];
        ids.extend(self.encode(text));
        ids.push(self.specials.eos);
        ids
    }

    pub(crate) fn encode_piece(&self, piece: &[u8]) -> Vec<u32> {
        let mut symbols: Vec<u32> = piece.iter().map(|&b| self.byte_id(b)).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
                .min();
            let Some((_, pair, id)) = best else { break };
            symbols = merge_pair(&symbols, pair, id);
        }
        symbols
    }

    /// Concatenates the bytes of every non-special id.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self
                .tokens
                .get(id as usize)
                .ok_or(TokenizerError::UnknownId { id, vocab_size: self.vocab_size() })?;
            out.extend_from_slice(bytes);
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }
}

/// Replaces every non-overlapping occurrence of `pair`, scanning left to right.
pub(crate) fn merge_pair(symbols: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}
