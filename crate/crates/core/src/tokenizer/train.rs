use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use super::{bytes, merge_pair, TokenizerError, TokenizerModel, MIN_VOCAB_SIZE};

/// Emitted when the corpus runs out of repeated pairs before the requested
/// vocabulary size is reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabShortfall {
    pub requested: usize,
    pub achieved: usize,
}

impl std::fmt::Display for VocabShortfall {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "requested vocabulary size {} is unreachable on this corpus; stopped at {}",
            self.requested, self.achieved
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTokenizer {
    pub model: TokenizerModel,
    pub shortfall: Option<VocabShortfall>,
}

type Pair = (u32, u32);

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    pair: Pair,
    key: (Vec<u8>, Vec<u8>),
}

impl Ord for Candidate {
    // Highest count first; among equal counts the lexicographically smallest
    // (left bytes, right bytes) wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| other.key.cmp(&self.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns merges greedily by pair frequency until the vocabulary holds
/// `vocab_size` tokens or no adjacent pair occurs at least twice.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<TrainedTokenizer, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::VocabTooSmall { requested: vocab_size, floor: MIN_VOCAB_SIZE });
    }
    let mut word_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for chunk in corpus {
        for piece in bytes::pre_tokenize(chunk.as_ref()) {
            *word_counts.entry(piece.as_bytes().to_vec()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut model = TokenizerModel::base();
    let mut words: Vec<Vec<u32>> = Vec::with_capacity(word_counts.len());
    let mut counts: Vec<u64> = Vec::with_capacity(word_counts.len());
    for (word, count) in word_counts {
        words.push(word.iter().map(|&b| model.byte_id(b)).collect());
        counts.push(count);
    }

    let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
    let mut occurs_in: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (w, symbols) in words.iter().enumerate() {
        for p in symbols.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += counts[w];
            occurs_in.entry((p[0], p[1])).or_default().insert(w);
        }
    }

    let key = |model: &TokenizerModel, (a, b): Pair| {
        (model.tokens[a as usize].clone(), model.tokens[b as usize].clone())
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&pair, &count)| Candidate { count, pair, key: key(&model, pair) })
        .collect();

    while model.vocab_size() < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            if current > 0 {
                heap.push(Candidate { count: current, ..top });
            }
            continue;
        }
        if current < 2 {
            break;
        }
        let pair = top.pair;
        let id = model.push_merge(pair.0, pair.1);
        let touched = occurs_in.remove(&pair).unwrap_or_default();
        let mut grown: BTreeSet<Pair> = BTreeSet::new();
        for w in touched {
            let merged = merge_pair(&words[w], pair, id);
            if merged.len() == words[w].len() {
                continue;
            }
            for p in words[w].windows(2) {
                let c = pair_counts.get_mut(&(p[0], p[1])).expect("counted pair");
                *c -= counts[w];
            }
            for p in merged.windows(2) {
                let p = (p[0], p[1]);
                *pair_counts.entry(p).or_default() += counts[w];
                occurs_in.entry(p).or_default().insert(w);
                grown.insert(p);
            }
            words[w] = merged;
        }
        pair_counts.remove(&pair);
        for p in grown {
            if let Some(&count) = pair_counts.get(&p) {
                if count > 0 {
                    heap.push(Candidate { count, pair: p, key: key(&model, p) });
                }
            }
        }
    }

    let shortfall = (model.vocab_size() < vocab_size).then(|| VocabShortfall {
        requested: vocab_size,
        achieved: model.vocab_size(),
    });
    if let Some(s) = &shortfall {
        log::warn!("{s}");
    }
    Ok(TrainedTokenizer { model, shortfall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SpecialTokens;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // "abababab": ab occurs 4 times, ba 3 times.
        let trained = train_bpe(["abababab"], MIN_VOCAB_SIZE + 1).unwrap();
        let m = &trained.model;
        assert_eq!(m.merges()[0], (m.byte_id(b'a'), m.byte_id(b'b')));
        assert_eq!(m.encode("ab"), vec![MIN_VOCAB_SIZE as u32]);
    }

    #[test]
    fn ties_break_toward_smallest_pair() {
        // Several pairs occur twice; the smallest by bytes wins.
        let trained = train_bpe(["xy ab xy ab"], MIN_VOCAB_SIZE + 1).unwrap();
        let m = &trained.model;
        assert_eq!(m.merges()[0], (m.byte_id(b' '), m.byte_id(b'a')));
        let trained = train_bpe(["xyab xyab"], MIN_VOCAB_SIZE + 1).unwrap();
        let m = &trained.model;
        assert_eq!(m.merges()[0], (m.byte_id(b'a'), m.byte_id(b'b')));
    }

    #[test]
    fn floor_vocab_has_no_merges() {
        let trained = train_bpe(["the cat sat on the mat"], MIN_VOCAB_SIZE).unwrap();
        assert!(trained.model.merges().is_empty());
        assert!(trained.shortfall.is_none());
    }

    #[test]
    fn rejects_empty_corpus_and_small_vocab() {
        assert!(matches!(train_bpe([""], 300), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(
            train_bpe(["abc"], MIN_VOCAB_SIZE - 1),
            Err(TokenizerError::VocabTooSmall { floor: MIN_VOCAB_SIZE, .. })
        ));
    }

    #[test]
    fn unreachable_size_reports_shortfall() {
        let trained = train_bpe(["abab"], 1000).unwrap();
        let s = trained.shortfall.unwrap();
        assert_eq!(s.requested, 1000);
        assert_eq!(s.achieved, trained.model.vocab_size());
        assert!(s.achieved < 1000);
    }

    #[test]
    fn merged_parts_precede_merge() {
        let trained = train_bpe(["the theme of the thesis is there then"], 290).unwrap();
        let m = &trained.model;
        for (rank, &(l, r)) in m.merges().iter().enumerate() {
            for part in [l, r] {
                assert!(!SpecialTokens::standard().is_special(part));
                if m.is_merged(part) {
                    let made_by = m.merges()[..rank].iter().any(|&(a, b)| {
                        let mut joined = m.token_bytes(a).unwrap().to_vec();
                        joined.extend_from_slice(m.token_bytes(b).unwrap());
                        joined == m.token_bytes(part).unwrap()
                    });
                    assert!(made_by, "part {part} of merge {rank} not built earlier");
                }
            }
        }
    }

    #[test]
    fn single_learned_token_encodes_to_one_id() {
        let trained = train_bpe(["hello hello hello"], 300).unwrap();
        let m = &trained.model;
        let ids = m.encode(" hello");
        assert_eq!(ids.len(), 1);
        assert_eq!(m.decode(&ids).unwrap(), " hello");
        assert!(m.encode("").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let trained = train_bpe(["abc abc"], 270).unwrap();
        let n = trained.model.vocab_size() as u32;
        assert!(matches!(trained.model.decode(&[n]), Err(TokenizerError::UnknownId { .. })));
    }
}
