use std::collections::HashMap;
use std::fmt::Write as _;

use super::{bytes, TokenizerModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabRow {
    pub id: u32,
    pub token: String,
    pub frequency: u64,
}

/// Least frequent merged tokens of a vocabulary, ascending by frequency.
///
/// Frequencies count occurrences in the tokenized corpus. Specials and the
/// byte alphabet are not ranked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabReport {
    pub vocab_size: usize,
    pub rows: Vec<VocabRow>,
}

impl VocabReport {
    pub fn min_frequency(&self) -> Option<u64> {
        self.rows.first().map(|r| r.frequency)
    }

    /// Tokens sharing the lowest frequency.
    pub fn least_frequent(&self) -> Vec<&VocabRow> {
        match self.min_frequency() {
            Some(min) => self.rows.iter().filter(|r| r.frequency == min).collect(),
            None => Vec::new(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# vocab_size\t{}\tfrequencies counted in the tokenized corpus", self.vocab_size).unwrap();
        writeln!(out, "rank\ttoken\tfrequency").unwrap();
        for (rank, row) in self.rows.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}", rank + 1, row.token, row.frequency).unwrap();
        }
        out
    }
}

/// Tokenizes `corpus` with `model` and reports the `k` least frequent merged tokens.
/// Ties are ordered by id.
pub fn analyze_vocab<I, S>(model: &TokenizerModel, corpus: I, k: usize) -> VocabReport
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut pieces: HashMap<Vec<u8>, u64> = HashMap::new();
    for chunk in corpus {
        for piece in bytes::pre_tokenize(chunk.as_ref()) {
            *pieces.entry(piece.as_bytes().to_vec()).or_default() += 1;
        }
    }
    let mut freq = vec![0u64; model.vocab_size()];
    for (piece, count) in pieces {
        for id in model.encode_piece(&piece) {
            freq[id as usize] += count;
        }
    }
    let mut rows: Vec<VocabRow> = (0..model.vocab_size() as u32)
        .filter(|&id| model.is_merged(id))
        .map(|id| VocabRow { id, token: model.token_display(id).unwrap(), frequency: freq[id as usize] })
        .collect();
    rows.sort_by_key(|r| (r.frequency, r.id));
    rows.truncate(k);
    VocabReport { vocab_size: model.vocab_size(), rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    #[test]
    fn tokens_seen_once_have_unit_frequency() {
        let model = train_bpe(["xy\nxy\nzw\nzw"], 400).unwrap().model;
        let report = analyze_vocab(&model, ["xy\nzw"], 100);
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.frequency == 1));
    }

    #[test]
    fn rows_are_sorted_and_truncated() {
        let corpus = ["the cat sat on the mat the cat ran to the hat"];
        let model = train_bpe(corpus, 300).unwrap().model;
        let report = analyze_vocab(&model, corpus, 3);
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.windows(2).all(|w| w[0].frequency <= w[1].frequency));
        let tsv = report.to_tsv();
        assert!(tsv.starts_with("# vocab_size\t"));
        assert_eq!(tsv.lines().count(), 5);
    }

    #[test]
    fn larger_vocab_never_raises_min_frequency() {
        let corpus = ["the dogs near the cat run . the dog near the cats runs . a bird sings . birds sing"];
        let small = analyze_vocab(&train_bpe(corpus, 280).unwrap().model, corpus, 5);
        let large = analyze_vocab(&train_bpe(corpus, 300).unwrap().model, corpus, 5);
        assert!(large.min_frequency().unwrap() <= small.min_frequency().unwrap());
    }
}
