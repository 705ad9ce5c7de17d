use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::{EvalError, EvalReport, Metric};
use crate::model::Model;
use crate::parser::hard_edges;
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerModel;

/// A sentence as words plus its undirected gold edges over word indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTree {
    pub tokens: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

/// Parses blank-line separated blocks: one token per line, then `edge i j` lines.
pub fn parse_gold_trees(text: &str) -> Result<Vec<GoldTree>, EvalError> {
    let mut trees = Vec::new();
    let mut current = GoldTree { tokens: Vec::new(), edges: Vec::new() };
    let mut flush = |t: &mut GoldTree| {
        if !t.tokens.is_empty() {
            trees.push(std::mem::replace(t, GoldTree { tokens: Vec::new(), edges: Vec::new() }));
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let bad = |message: String| EvalError::Format { line: i + 1, message };
        if line.is_empty() {
            flush(&mut current);
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "edge" {
            let [_, a, b] = fields[..] else {
                return Err(bad("edge lines need two indices".into()));
            };
            let a: usize = a.parse().map_err(|e| bad(format!("edge index: {e}")))?;
            let b: usize = b.parse().map_err(|e| bad(format!("edge index: {e}")))?;
            let n = current.tokens.len();
            if a >= n || b >= n || a == b {
                return Err(bad(format!("edge {a} {b} is not a pair of distinct tokens among {n}")));
            }
            current.edges.push((a.min(b), a.max(b)));
        } else {
            if !current.edges.is_empty() {
                return Err(bad("token line after edge lines; separate sentences with a blank line".into()));
            }
            current.tokens.push(line.to_string());
        }
    }
    flush(&mut current);
    Ok(trees)
}

/// Inverse of [`parse_gold_trees`].
pub fn write_trees(trees: &[GoldTree]) -> String {
    let mut out = String::new();
    for (k, t) in trees.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        for tok in &t.tokens {
            writeln!(out, "{tok}").unwrap();
        }
        for (a, b) in &t.edges {
            writeln!(out, "edge {a} {b}").unwrap();
        }
    }
    out
}

fn undirected(edges: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
    edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect()
}

/// Share of gold edges found in the prediction, ignoring direction.
pub fn uas_undirected(predicted: &[(usize, usize)], gold: &[(usize, usize)]) -> Result<f64, EvalError> {
    let (hits, total) = edge_hits(predicted, gold);
    if total == 0 {
        return Err(EvalError::EmptyGold);
    }
    Ok(hits as f64 / total as f64)
}

fn edge_hits(predicted: &[(usize, usize)], gold: &[(usize, usize)]) -> (usize, usize) {
    let gold = undirected(gold);
    let pred = undirected(predicted);
    (pred.intersection(&gold).count(), gold.len())
}

/// Word-level parent distribution for a sentence given as words.
///
/// Each word is encoded on its own (with the leading space every non-initial
/// word carries in running text). Row `a` averages the subword rows of word
/// `a`; column `b` sums the subword columns of word `b`; mass on the begin and
/// end markers and on the word itself is dropped and rows are renormalized.
pub fn word_dependencies(model: &Model, tokenizer: &TokenizerModel, words: &[String]) -> Result<Tensor, EvalError> {
    let specials = tokenizer.specials();
    let mut ids = vec![specials.bos];
    let mut spans = Vec::with_capacity(words.len());
    for (k, w) in words.iter().enumerate() {
        let piece = if k == 0 { w.clone() } else { format!(" {w}") };
        let start = ids.len();
        ids.extend(tokenizer.encode(&piece));
        spans.push(start..ids.len());
    }
    ids.push(specials.eos);
    let outputs = model.parse(&ids, &vec![false; ids.len()])?.ok_or(EvalError::NoParser)?;
    let n = words.len();
    let mut w = vec![0.0; n * n];
    for a in 0..n {
        for b in (0..n).filter(|&b| b != a) {
            let mass: f64 = spans[a].clone().map(|i| spans[b].clone().map(|j| outputs.dep.at(i, j)).sum::<f64>()).sum();
            w[a * n + b] = mass / spans[a].len().max(1) as f64;
        }
        let total: f64 = w[a * n..(a + 1) * n].iter().sum();
        if total > 0.0 {
            w[a * n..(a + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(Tensor::from_vec(vec![n, n], w).expect("n x n"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeReport {
    pub predicted: Vec<GoldTree>,
    pub matched: usize,
    pub gold_edges: usize,
    /// Micro-averaged undirected attachment score over all sentences.
    pub report: EvalReport,
}

/// Induces a hard tree per sentence and scores it against the gold edges.
pub fn induce_trees(
    model: &Model,
    tokenizer: &TokenizerModel,
    gold: &[GoldTree],
    model_name: &str,
) -> Result<TreeReport, EvalError> {
    if model.config().parser.is_none() {
        return Err(EvalError::NoParser);
    }
    let mut predicted = Vec::with_capacity(gold.len());
    let (mut matched, mut gold_edges) = (0, 0);
    for tree in gold {
        let edges = hard_edges(&word_dependencies(model, tokenizer, &tree.tokens)?);
        let (hits, total) = edge_hits(&edges, &tree.edges);
        matched += hits;
        gold_edges += total;
        predicted.push(GoldTree { tokens: tree.tokens.clone(), edges });
    }
    if gold_edges == 0 {
        return Err(EvalError::EmptyGold);
    }
    let report = EvalReport {
        model: model_name.to_string(),
        task: "trees".into(),
        metric: Metric::UasUndirected,
        value: matched as f64 / gold_edges as f64,
        n_items: gold.len(),
    };
    Ok(TreeReport { predicted, matched, gold_edges, report })
}
