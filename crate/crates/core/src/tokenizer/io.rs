// Plain-text serialization:
//
//   bpe-v1 <vocab_size>
//   <pad>\t<unk>\t<s>\t</s>\t<mask>
//   <id>\t<token>            (vocab_size lines, ids ascending)
//   <left>\t<right>          (one line per merge, in order)
//
// Tokens are written in their printable byte form.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{bytes, SpecialTokens, TokenizerError, TokenizerModel};

const HEADER: &str = "bpe-v1";

impl TokenizerModel {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), TokenizerError> {
        writeln!(out, "{HEADER} {}", self.vocab_size())?;
        writeln!(out, "{}", SpecialTokens::NAMES.join("\t"))?;
        for id in 0..self.vocab_size() as u32 {
            writeln!(out, "{id}\t{}", self.token_display(id).expect("id in range"))?;
        }
        for &(l, r) in &self.merges {
            writeln!(out, "{}\t{}", bytes::to_display(&self.tokens[l as usize]), bytes::to_display(&self.tokens[r as usize]))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 output")
    }

    /// Writes via a temporary sibling file so a failed write leaves no partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_text())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, TokenizerError> {
        let err = |line: usize, message: String| TokenizerError::Format { line, message };
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String), TokenizerError> {
            match lines.next() {
                Some((n, l)) => Ok((n, l?)),
                None => Err(err(0, format!("unexpected end of file, expected {what}"))),
            }
        };

        let (n, header) = next("header")?;
        let vocab_size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| err(n, format!("expected `{HEADER} <vocab_size>`, got {header:?}")))?;
        let (n, specials) = next("special tokens")?;
        if specials.split('\t').collect::<Vec<_>>() != SpecialTokens::NAMES {
            return Err(err(n, format!("unexpected special tokens {specials:?}")));
        }

        let mut vocab_lines = Vec::with_capacity(vocab_size);
        for expected in 0..vocab_size {
            let (n, line) = next("vocabulary entry")?;
            let (id, token) = line
                .split_once('\t')
                .ok_or_else(|| err(n, "vocabulary line needs `<id>\\t<token>`".into()))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(err(n, format!("expected id {expected}, got {id:?}")));
            }
            vocab_lines.push((n, token.to_string()));
        }

        let mut model = TokenizerModel::base();
        for (id, (n, token)) in vocab_lines.iter().enumerate().take(super::MIN_VOCAB_SIZE) {
            if model.token_display(id as u32).as_deref() != Some(token.as_str()) {
                return Err(err(*n, format!("base token {id} should be {:?}", model.token_display(id as u32))));
            }
        }
        for (n, line) in lines {
            let line = line?;
            let (l, r) = line.split_once('\t').ok_or_else(|| err(n, "merge line needs `<left>\\t<right>`".into()))?;
            let left = model.token_id(l).ok_or_else(|| err(n, format!("unknown merge part {l:?}")))?;
            let right = model.token_id(r).ok_or_else(|| err(n, format!("unknown merge part {r:?}")))?;
            let id = model.push_merge(left, right);
            let (vn, expected) = vocab_lines
                .get(id as usize)
                .ok_or_else(|| err(n, format!("merge creates id {id} beyond vocabulary size {vocab_size}")))?;
            if model.token_display(id).as_deref() != Some(expected.as_str()) {
                return Err(err(*vn, format!("vocabulary entry {id} disagrees with merge {l:?} + {r:?}")));
            }
        }
        if model.vocab_size() != vocab_size {
            return Err(err(1, format!("merges produce {} tokens, header says {vocab_size}", model.vocab_size())));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    #[test]
    fn text_form_loads_back_identically() {
        let model = train_bpe(["the cat sat on the mat\nthe cat ran"], 280).unwrap().model;
        let text = model.to_text();
        assert!(text.starts_with("bpe-v1 "));
        let back = TokenizerModel::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        assert!(matches!(
            TokenizerModel::read_from("bpe-v2 261\n".as_bytes()),
            Err(TokenizerError::Format { line: 1, .. })
        ));
        let model = train_bpe(["abab abab"], 263).unwrap().model;
        let text = model.to_text();
        let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(TokenizerModel::read_from(cut.as_bytes()).is_err());
        let no_merges: String = text.lines().take(2 + model.vocab_size()).map(|l| format!("{l}\n")).collect();
        assert!(TokenizerModel::read_from(no_merges.as_bytes()).is_err());
    }
}
