//! Convolutional parser network and the soft dependency structure it induces.
//!
//! The network maps token representations to one *height* per token and one
//! *distance* per boundary between adjacent tokens. A boundary `k` blocks token
//! `i` with probability `sigmoid((d[k] - h[i]) / tau_scope)`; the scope of `i`
//! is the probability that no boundary between `i` and `j` blocks it:
//!
//! ```text
//! scope[i][j] = prod_{k in i..j} (1 - sigmoid((d[k] - h[i]) / tau_scope))   (j > i, mirrored for j < i)
//! dep[i][j]   ∝ scope[i][j] * exp(h[j] / tau_height)                          (j != i, non-pad)
//! ```
//!
//! `dep[i][·]` is the distribution over the parent of token `i`. Each attention
//! head mixes parent, child and an ungated residual into a gate in `[0, 1]`.
//! Scopes are computed in log space, so even very small temperatures stay finite.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Normalizer epsilon inside the parser layers.
const NORM_EPS: f64 = 1e-5;

/// Below this log-scope a row is treated as having no mass (`exp` underflows).
const LOG_MASS_FLOOR: f64 = -708.0;

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("parser input has no tokens")]
    EmptyInput,
    #[error("invalid parser configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserConfig {
    pub n_conv_layers: usize,
    pub kernel_size: usize,
    pub hidden_width: usize,
    pub tau_scope: f64,
    pub tau_height: f64,
}

impl ParserConfig {
    /// Four layers of width-9 convolutions at the model width.
    pub fn standard(d_model: usize) -> Self {
        Self { n_conv_layers: 4, kernel_size: 9, hidden_width: d_model, tau_scope: 1.0, tau_height: 1.0 }
    }

    pub fn validate(&self) -> Result<(), ParserError> {
        if self.n_conv_layers == 0 {
            return Err(ParserError::Config("n_conv_layers must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(ParserError::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.hidden_width == 0 {
            return Err(ParserError::Config("hidden_width must be positive".into()));
        }
        if !(self.tau_scope > 0.0 && self.tau_height > 0.0) {
            return Err(ParserError::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable tensors of the parser network, already placed on a tape.
pub struct ParserWeights<'t> {
    /// `(kernel × c_in × hidden, hidden)` per convolution layer.
    pub convs: Vec<(Var<'t>, Var<'t>)>,
    pub height_hidden: (Var<'t>, Var<'t>),
    pub height_out: (Var<'t>, Var<'t>),
    pub distance_left: Var<'t>,
    pub distance_right: Var<'t>,
    pub distance_bias: Var<'t>,
    pub distance_out: (Var<'t>, Var<'t>),
}

fn column_mask<'t>(tape: &'t Tape, pad_mask: &[bool]) -> Var<'t> {
    let data = pad_mask.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
    tape.constant(Tensor::from_vec(vec![pad_mask.len(), 1], data).expect("mask shape"))
}

/// Runs the convolution stack and both heads on `reps` (`L × d_model`).
/// Returns `(distances [L-1], heights [L])`. Pad rows are zeroed before
/// every layer so they act like the zero padding at the sequence edges.
pub fn distances_heights<'t>(
    reps: &Var<'t>,
    pad_mask: &[bool],
    weights: &ParserWeights<'t>,
) -> Result<(Var<'t>, Var<'t>), ParserError> {
    let tape = reps.tape();
    let len = reps.shape()[0];
    if len == 0 {
        return Err(ParserError::EmptyInput);
    }
    let keep = column_mask(tape, pad_mask);
    let mut x = reps.mul(&keep)?;
    for (w, b) in &weights.convs {
        x = x.conv1d(w, Some(b))?.layer_norm(None, None, NORM_EPS)?.tanh().mul(&keep)?;
    }

    let (w1, b1) = &weights.height_hidden;
    let (w2, b2) = &weights.height_out;
    let heights = x
        .matmul(w1)?
        .add(b1)?
        .layer_norm(None, None, NORM_EPS)?
        .tanh()
        .matmul(w2)?
        .add(b2)?
        .reshape(vec![len])?;

    let distances = if len < 2 {
        tape.constant(Tensor::zeros(vec![0]))
    } else {
        let left = x.slice_rows(0, len - 1)?.matmul(&weights.distance_left)?;
        let right = x.slice_rows(1, len)?.matmul(&weights.distance_right)?;
        let (w2, b2) = &weights.distance_out;
        left.add(&right)?
            .add(&weights.distance_bias)?
            .layer_norm(None, None, NORM_EPS)?
            .tanh()
            .matmul(w2)?
            .add(b2)?
            .reshape(vec![len - 1])?
    };
    Ok((distances, heights))
}

/// Scope matrix in probability and log space.
pub struct Scope<'t> {
    pub log: Var<'t>,
    pub prob: Var<'t>,
}

/// Builds the `L × L` scope from distances `[L-1]` and heights `[L]`.
/// Pad rows and columns get zero scope.
pub fn scope_matrix<'t>(
    distances: &Var<'t>,
    heights: &Var<'t>,
    pad_mask: &[bool],
    tau_scope: f64,
) -> Result<Scope<'t>, ParserError> {
    let tape = heights.tape();
    let len = heights.shape()[0];
    if len == 0 {
        return Err(ParserError::EmptyInput);
    }
    if distances.shape() != [len - 1] || pad_mask.len() != len {
        return Err(TensorError::ShapeMismatch {
            op: "scope_matrix",
            left: distances.shape(),
            right: heights.shape(),
        }
        .into());
    }
    let log = if len == 1 {
        tape.constant(Tensor::zeros(vec![1, 1]))
    } else {
        let b = len - 1;
        // log(1 - blocking) = log_sigmoid((h[i] - d[k]) / tau), an L × (L-1) matrix
        let log_pass = heights
            .reshape(vec![len, 1])?
            .sub(&distances.reshape(vec![1, b])?)?
            .scale(1.0 / tau_scope)
            .log_sigmoid();
        let tri = |f: fn(usize, usize) -> bool| {
            let data = (0..len).flat_map(|i| (0..b).map(move |k| if f(i, k) { 1.0 } else { 0.0 })).collect();
            tape.constant(Tensor::from_vec(vec![len, b], data).expect("mask shape"))
        };
        // boundaries at or right of i, summed up to j-1; shifted one column right
        let right = log_pass.mul(&tri(|i, k| k >= i))?.cumsum(1, false)?.pad_cols(1, 0)?;
        // boundaries left of i, summed from j onward
        let left = log_pass.mul(&tri(|i, k| k < i))?.cumsum(1, true)?.pad_cols(0, 1)?;
        right.add(&left)?
    };
    let valid: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| (i, j)))
        .map(|(i, j)| if pad_mask[i] || pad_mask[j] { 0.0 } else { 1.0 })
        .collect();
    let prob = log.exp().mul(&tape.constant(Tensor::from_vec(vec![len, len], valid).expect("mask shape")))?;
    Ok(Scope { log, prob })
}

/// Dependency distribution plus the rows that needed special handling.
pub struct Dependencies<'t> {
    pub dep: Var<'t>,
    /// Rows whose scope mass underflowed; they fall back to uniform.
    pub fallback_rows: Vec<usize>,
}

/// `dep[i][j] ∝ scope[i][j] · exp(h[j] / tau_height)` over non-pad `j ≠ i`.
/// Pad rows, and rows with no candidate parent, are all zero.
pub fn dependency_distribution<'t>(
    scope: &Scope<'t>,
    heights: &Var<'t>,
    pad_mask: &[bool],
    tau_height: f64,
) -> Result<Dependencies<'t>, ParserError> {
    let tape = heights.tape();
    let len = heights.shape()[0];
    let log_scope = scope.log.value();
    let candidate = |i: usize, j: usize| i != j && !pad_mask[j];

    let mut row_valid = vec![0.0; len];
    let mut keep = vec![0.0; len];
    let mut additive = vec![0.0; len * len];
    let mut fallback_rows = Vec::new();
    for i in 0..len {
        let has_candidate = (0..len).any(|j| candidate(i, j));
        if pad_mask[i] || !has_candidate {
            continue; // dummy all-zero logits; the row is masked out below
        }
        row_valid[i] = 1.0;
        for j in 0..len {
            if !candidate(i, j) {
                additive[i * len + j] = f64::NEG_INFINITY;
            }
        }
        let best = (0..len).filter(|&j| candidate(i, j)).map(|j| log_scope.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        if best < LOG_MASS_FLOOR {
            fallback_rows.push(i);
        } else {
            keep[i] = 1.0;
        }
    }
    if !fallback_rows.is_empty() {
        log::debug!("dependency rows {fallback_rows:?} have no scope mass; using uniform parents");
    }
    let col = |v: Vec<f64>| tape.constant(Tensor::from_vec(vec![len, 1], v).expect("mask shape"));
    let logits = scope
        .log
        .add(&heights.reshape(vec![1, len])?.scale(1.0 / tau_height))?
        .mul(&col(keep))?
        .add(&tape.constant(Tensor::from_vec(vec![len, len], additive).expect("mask shape")))?;
    let dep = logits.softmax(1)?.mul(&col(row_valid))?;
    Ok(Dependencies { dep, fallback_rows })
}

/// Per-head mixture over {parent, child, residual}.
pub enum RelationMix<'t> {
    /// `n_heads × 3` unnormalized scores, passed through a softmax per head.
    Logits(Var<'t>),
    /// `n_heads × 3` weights used as given (rows must be convex).
    Weights(Var<'t>),
}

/// `gate[head][i][j] = w_parent·dep[i][j] + w_child·dep[j][i] + w_resid`.
pub fn attention_gates<'t>(dep: &Var<'t>, mix: &RelationMix<'t>) -> Result<Vec<Var<'t>>, ParserError> {
    let weights = match mix {
        RelationMix::Logits(v) => v.softmax(1)?,
        RelationMix::Weights(v) => *v,
    };
    let shape = weights.shape();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(TensorError::Rank { op: "attention_gates", expected: 2, shape }.into());
    }
    let dep_t = dep.transpose()?;
    (0..shape[0])
        .map(|h| {
            let parent = dep.mul(&weights.index(3 * h)?)?;
            let child = dep_t.mul(&weights.index(3 * h + 1)?)?;
            Ok(parent.add(&child)?.add(&weights.index(3 * h + 2)?)?)
        })
        .collect()
}

/// Undirected edges `{i, argmax_j dep[i][j]}`, deduplicated and sorted.
/// Ties go to the nearer token, then to the left one. All-zero rows add no edge.
pub fn hard_edges(dep: &Tensor) -> Vec<(usize, usize)> {
    let len = dep.shape()[0];
    let mut edges = Vec::new();
    if len < 2 {
        return edges;
    }
    for i in 0..len {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..len).filter(|&j| j != i) {
            let p = dep.at(i, j);
            let better = match best {
                None => true,
                Some((b, bp)) => p > bp || (p == bp && (j.abs_diff(i), j) < (b.abs_diff(i), b)),
            };
            if better {
                best = Some((j, p));
            }
        }
        if let Some((j, p)) = best {
            if p > 0.0 {
                edges.push((i.min(j), i.max(j)));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Plain values of one parse, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParserOutputs {
    pub distances: Vec<f64>,
    pub heights: Vec<f64>,
    pub scope: Tensor,
    pub dep: Tensor,
    pub fallback_rows: Vec<usize>,
}

impl ParserOutputs {
    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn hard_tree(&self) -> Vec<(usize, usize)> {
        extract_hard_tree(self)
    }

    /// Line-oriented dump: tokens, distances, heights, then one `edge i j` per hard-tree edge.
    pub fn dump(&self, tokens: &[String]) -> String {
        let row = |label: &str, vals: &[f64]| {
            let mut s = label.to_string();
            for v in vals {
                write!(s, "\t{v:.6}").unwrap();
            }
            s
        };
        let mut out = format!("tokens\t{}\n", tokens.join("\t"));
        writeln!(out, "{}", row("distances", &self.distances)).unwrap();
        writeln!(out, "{}", row("heights", &self.heights)).unwrap();
        for (i, j) in self.hard_tree() {
            writeln!(out, "edge\t{i}\t{j}").unwrap();
        }
        out
    }
}

pub fn extract_hard_tree(outputs: &ParserOutputs) -> Vec<(usize, usize)> {
    hard_edges(&outputs.dep)
}

/// Runs scope, dependency and gate construction on fixed distances and
/// heights. Useful for inspecting the structure independent of a network.
pub fn structure_from(
    distances: &[f64],
    heights: &[f64],
    pad_mask: &[bool],
    tau_scope: f64,
    tau_height: f64,
) -> Result<ParserOutputs, ParserError> {
    let tape = Tape::new();
    let d = tape.constant(Tensor::from_vec(vec![distances.len()], distances.to_vec())?);
    let h = tape.constant(Tensor::from_vec(vec![heights.len()], heights.to_vec())?);
    let scope = scope_matrix(&d, &h, pad_mask, tau_scope)?;
    let deps = dependency_distribution(&scope, &h, pad_mask, tau_height)?;
    Ok(ParserOutputs {
        distances: distances.to_vec(),
        heights: heights.to_vec(),
        scope: scope.prob.value(),
        dep: deps.dep.value(),
        fallback_rows: deps.fallback_rows,
    })
}
