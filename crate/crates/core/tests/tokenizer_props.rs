use proptest::prelude::*;
use structlm::tokenizer::{analyze_vocab, train_bpe, TokenizerModel, MIN_VOCAB_SIZE};

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-e ]{1,24}", 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decode_inverts_encode(corpus in corpus_strategy(), extra in 0usize..40, probe in "\\PC{0,30}") {
        let tok = train_bpe(&corpus, MIN_VOCAB_SIZE + extra).unwrap().model;
        for line in corpus.iter().chain(std::iter::once(&probe)) {
            prop_assert_eq!(&tok.decode(&tok.encode(line)).unwrap(), line);
        }
    }

    #[test]
    fn serialization_round_trips(corpus in corpus_strategy(), extra in 0usize..40) {
        let tok = train_bpe(&corpus, MIN_VOCAB_SIZE + extra).unwrap().model;
        let back = TokenizerModel::read_from(tok.to_text().as_bytes()).unwrap();
        prop_assert_eq!(back.to_text(), tok.to_text());
        for line in &corpus {
            prop_assert_eq!(back.encode(line), tok.encode(line));
        }
    }

    #[test]
    fn least_frequency_never_rises_with_vocab(corpus in corpus_strategy(), a in 0usize..30, b in 0usize..30) {
        let (small, large) = (MIN_VOCAB_SIZE + a.min(b), MIN_VOCAB_SIZE + a.max(b));
        let min = |size| {
            let tok = train_bpe(&corpus, size).unwrap().model;
            analyze_vocab(&tok, &corpus, 1).min_frequency()
        };
        if let (Some(lo), Some(hi)) = (min(large), min(small)) {
            prop_assert!(lo <= hi, "{lo} > {hi}");
        }
    }
}
