// Reversible byte <-> printable-char mapping so every token can be written on
// one line of a text file. Printable Latin-1 bytes map to themselves; the
// rest (controls, space, soft hyphen, ...) are shifted past U+00FF.

use std::sync::OnceLock;

struct Tables {
    to_char: [char; 256],
    to_byte: std::collections::HashMap<char, u8>,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let printable = |b: u8| matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        let mut to_char = ['\0'; 256];
        let mut shifted = 0u32;
        for b in 0..=255u8 {
            to_char[b as usize] = if printable(b) {
                char::from(b)
            } else {
                shifted += 1;
                char::from_u32(255 + shifted).unwrap()
            };
        }
        let to_byte = to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Tables { to_char, to_byte }
    })
}

pub(crate) fn to_display(bytes: &[u8]) -> String {
    let t = tables();
    bytes.iter().map(|&b| t.to_char[b as usize]).collect()
}

pub(crate) fn from_display(s: &str) -> Option<Vec<u8>> {
    let t = tables();
    s.chars().map(|c| t.to_byte.get(&c).copied()).collect()
}

/// Splits text into runs of non-whitespace, each carrying at most one leading
/// space as its word-boundary marker, and leftover whitespace runs.
/// Concatenating the pieces reproduces the input exactly.
pub(crate) fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut runs: Vec<(usize, usize, bool)> = Vec::new();
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        match runs.last_mut() {
            Some((_, end, last_ws)) if *last_ws == ws => *end = i + c.len_utf8(),
            _ => runs.push((i, i + c.len_utf8(), ws)),
        }
    }
    let mut pieces = Vec::with_capacity(runs.len());
    let mut carry_start: Option<usize> = None;
    for (k, &(start, end, ws)) in runs.iter().enumerate() {
        if ws {
            let next_is_word = runs.get(k + 1).is_some_and(|r| !r.2);
            if next_is_word && text[start..end].ends_with(' ') {
                if end - 1 > start {
                    pieces.push(&text[start..end - 1]);
                }
                carry_start = Some(end - 1);
            } else {
                pieces.push(&text[start..end]);
            }
        } else {
            pieces.push(&text[carry_start.take().unwrap_or(start)..end]);
        }
    }
    pieces
}
