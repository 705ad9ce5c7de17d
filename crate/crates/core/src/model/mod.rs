//! Transformer encoder with optional parser-gated self-attention.
//!
//! Every trainable tensor is declared once in a fixed-order inventory
//! ([`inventory`]); the [`Model`] stores plain buffers in that order and
//! rebuilds a fresh graph on a [`Tape`] for each forward pass. Parameter
//! counts therefore come straight from the inventory, without allocating.

mod config;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use config::{ModelConfig, Variant};

use crate::parser::{self, ParserError, ParserOutputs, ParserWeights, RelationMix};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input has no tokens")]
    EmptyInput,
    #[error("input length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} is out of range for a vocabulary of {vocab_size}")]
    UnknownId { id: u32, vocab_size: usize },
    #[error("pad mask has length {mask} but input has {len} tokens")]
    MaskLength { mask: usize, len: usize },
    #[error("every position is padding")]
    AllPadding,
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParameterShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Parser(#[from] ParserError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// One entry of the parameter inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies (false for gains, biases and relation scores).
    pub decay: bool,
    /// Submodule the parameter is reported under.
    pub group: String,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All trainable tensors of a configuration, in storage order.
pub fn inventory(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut add = |group: &str, name: String, shape: Vec<usize>, init: Init, decay: bool| {
        specs.push(ParamSpec { name, shape, init, decay, group: group.to_string() });
    };
    let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
    let weight = |add: &mut dyn FnMut(&str, String, Vec<usize>, Init, bool), group: &str, name: &str, rows: usize, cols: usize| {
        add(group, format!("{name}.weight"), vec![rows, cols], Init::Normal(INIT_STD), true);
        add(group, format!("{name}.bias"), vec![cols], Init::Zeros, false);
    };
    let norm = |add: &mut dyn FnMut(&str, String, Vec<usize>, Init, bool), group: &str, name: &str, width: usize| {
        add(group, format!("{name}.gain"), vec![width], Init::Ones, false);
        add(group, format!("{name}.bias"), vec![width], Init::Zeros, false);
    };

    add("embeddings", "embed.tokens".into(), vec![v, d], Init::Normal(INIT_STD), true);
    add("embeddings", "embed.positions".into(), vec![cfg.max_seq_len, d], Init::Normal(INIT_STD), true);
    if cfg.embed_norm_dropout {
        norm(&mut add, "embeddings", "embed.norm", d);
    }
    for l in 0..cfg.n_layers {
        let g = format!("layer.{l}");
        norm(&mut add, &g, &format!("layers.{l}.attn_norm"), d);
        for proj in ["q", "k", "v", "o"] {
            let name = format!("layers.{l}.attn.{proj}");
            if proj == "k" {
                // a key bias only shifts each score row by a constant, which softmax ignores
                add(&g, format!("{name}.weight"), vec![d, d], Init::Normal(INIT_STD), true);
            } else {
                weight(&mut add, &g, &name, d, d);
            }
        }
        norm(&mut add, &g, &format!("layers.{l}.ffn_norm"), d);
        weight(&mut add, &g, &format!("layers.{l}.ffn.in"), d, f);
        weight(&mut add, &g, &format!("layers.{l}.ffn.out"), f, d);
    }
    norm(&mut add, "final_norm", "final_norm", d);
    if !cfg.tie_output {
        add("output", "output.weight".into(), vec![d, v], Init::Normal(INIT_STD), true);
    }
    add("output", "output.bias".into(), vec![v], Init::Zeros, false);

    if let Some(p) = &cfg.parser {
        let h = p.hidden_width;
        for c in 0..p.n_conv_layers {
            let c_in = if c == 0 { d } else { h };
            add("parser.conv", format!("parser.conv.{c}.weight"), vec![p.kernel_size, c_in, h], Init::Normal(INIT_STD), true);
            add("parser.conv", format!("parser.conv.{c}.bias"), vec![h], Init::Zeros, false);
        }
        weight(&mut add, "parser.height", "parser.height.hidden", h, h);
        weight(&mut add, "parser.height", "parser.height.out", h, 1);
        add("parser.distance", "parser.distance.left.weight".into(), vec![h, h], Init::Normal(INIT_STD), true);
        add("parser.distance", "parser.distance.right.weight".into(), vec![h, h], Init::Normal(INIT_STD), true);
        add("parser.distance", "parser.distance.bias".into(), vec![h], Init::Zeros, false);
        weight(&mut add, "parser.distance", "parser.distance.out", h, 1);
        add("parser.relation", "parser.relation".into(), vec![cfg.n_heads, 3], Init::Zeros, false);
    }
    specs
}

/// Trainable element counts, total and per submodule (in inventory order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    pub groups: Vec<(String, usize)>,
}

impl ParamReport {
    pub fn from_specs(specs: &[ParamSpec]) -> Self {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for s in specs {
            match groups.iter_mut().find(|(g, _)| *g == s.group) {
                Some((_, n)) => *n += s.numel(),
                None => groups.push((s.group.clone(), s.numel())),
            }
        }
        Self { total: specs.iter().map(ParamSpec::numel).sum(), groups }
    }

    pub fn group(&self, name: &str) -> usize {
        self.groups.iter().filter(|(g, _)| g == name || g.starts_with(&format!("{name}."))).map(|(_, n)| n).sum()
    }

    /// Two-column text table; layers are folded into one row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (g, n) in &self.groups {
            let key = if g.starts_with("layer.") { "layers".to_string() } else { g.clone() };
            match rows.iter_mut().find(|(k, _)| *k == key) {
                Some((_, m)) => *m += n,
                None => rows.push((key, *n)),
            }
        }
        let mut out = String::new();
        for (k, n) in rows {
            writeln!(out, "{k}\t{n}").unwrap();
        }
        writeln!(out, "total\t{}", self.total).unwrap();
        out
    }
}

/// Counts parameters of a configuration without building the model.
pub fn count_parameters(cfg: &ModelConfig) -> ParamReport {
    ParamReport::from_specs(&inventory(cfg))
}

/// How the parser's structure enters attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Structure {
    /// Relation weights come from the trained per-head scores.
    Learned,
    /// Every head uses these (parent, child, residual) weights.
    Fixed([f64; 3]),
    /// The parser is skipped and attention is ungated.
    Detached,
}

/// Graph handles produced by one forward pass.
pub struct Graph<'t> {
    pub logits: Var<'t>,
    /// Attention probabilities per layer and head, after gating.
    pub attention: Vec<Vec<Var<'t>>>,
    pub hidden_states: Vec<Var<'t>>,
    pub parser_input: Option<Var<'t>>,
    pub parser: Option<ParserGraph<'t>>,
}

pub struct ParserGraph<'t> {
    pub distances: Var<'t>,
    pub heights: Var<'t>,
    pub scope: Var<'t>,
    pub dep: Var<'t>,
    pub fallback_rows: Vec<usize>,
}

impl ParserGraph<'_> {
    pub fn outputs(&self) -> ParserOutputs {
        ParserOutputs {
            distances: self.distances.value().into_data(),
            heights: self.heights.value().into_data(),
            scope: self.scope.value(),
            dep: self.dep.value(),
            fallback_rows: self.fallback_rows.clone(),
        }
    }
}

/// Plain values of an evaluation-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Tensor,
    pub parser_outputs: Option<ParserOutputs>,
    /// Embedding output first, then the output of each layer.
    pub hidden_states: Vec<Tensor>,
    pub parser_input: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
    params: Vec<Tensor>,
    structure: Structure,
}

/// Builds a model with freshly initialized parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    Model::new(cfg.clone(), seed)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = inventory(&config);
        let mut rng = rng::stream(seed, rng::INIT, 0);
        let params = specs.iter().map(|s| initialize(s, &mut rng)).collect();
        Ok(Self::assemble(config, specs, params))
    }

    /// Wraps existing buffers (in inventory order) after checking their shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = inventory(&config);
        if specs.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(ModelError::ParameterShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    got: p.shape().to_vec(),
                });
            }
        }
        Ok(Self::assemble(config, specs, params))
    }

    fn assemble(config: ModelConfig, specs: Vec<ParamSpec>, params: Vec<Tensor>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self { config, specs, index, params, structure: Structure::Learned }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn count_parameters(&self) -> ParamReport {
        ParamReport::from_specs(&self.specs)
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn set_structure(&mut self, structure: Structure) {
        self.structure = structure;
    }

    /// Same weights with the parser skipped.
    pub fn detached(&self) -> Model {
        Model { structure: Structure::Detached, ..self.clone() }
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Registers every parameter as a constant on `tape`.
    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Evaluation-mode forward pass returning plain values.
    pub fn forward(&self, ids: &[u32], pad_mask: &[bool]) -> Result<ForwardResult, ModelError> {
        let tape = Tape::new();
        let vars = self.constants(&tape);
        let g = self.graph(&tape, &vars, ids, pad_mask, None)?;
        Ok(ForwardResult {
            logits: g.logits.value(),
            parser_outputs: g.parser.as_ref().map(ParserGraph::outputs),
            hidden_states: g.hidden_states.iter().map(Var::value).collect(),
            parser_input: g.parser_input.map(|v| v.value()),
        })
    }

    /// Only the parser structure of one sequence, for tree induction.
    pub fn parse(&self, ids: &[u32], pad_mask: &[bool]) -> Result<Option<ParserOutputs>, ModelError> {
        Ok(self.forward(ids, pad_mask)?.parser_outputs)
    }

    /// Builds the forward graph for one sequence over parameter handles
    /// `vars` (in inventory order). Dropout is active iff `dropout_rng` is given.
    pub fn graph<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        ids: &[u32],
        pad_mask: &[bool],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Graph<'t>, ModelError> {
        let cfg = &self.config;
        let len = ids.len();
        if len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if len > cfg.max_seq_len {
            return Err(ModelError::TooLong { len, max: cfg.max_seq_len });
        }
        if pad_mask.len() != len {
            return Err(ModelError::MaskLength { mask: pad_mask.len(), len });
        }
        if pad_mask.iter().all(|&p| p) {
            return Err(ModelError::AllPadding);
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::UnknownId { id, vocab_size: cfg.vocab_size });
        }
        let p = |name: &str| vars[self.index[name]];
        let mut drop = |x: Var<'t>| x.dropout(cfg.dropout, dropout_rng.as_deref_mut());

        let token_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let mut x = p("embed.tokens").embedding(&token_ids)?.add(&p("embed.positions").embedding(&positions)?)?;
        if cfg.embed_norm_dropout {
            x = drop(x.layer_norm(Some(&p("embed.norm.gain")), Some(&p("embed.norm.bias")), NORM_EPS)?);
        }

        let key_mask = {
            let row: Vec<f64> = pad_mask.iter().map(|&m| if m { f64::NEG_INFINITY } else { 0.0 }).collect();
            tape.constant(Tensor::from_vec(vec![1, len], row)?)
        };
        let query_pad = {
            let col: Vec<f64> = pad_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            tape.constant(Tensor::from_vec(vec![len, 1], col)?)
        };
        let query_keep = {
            let col: Vec<f64> = pad_mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
            tape.constant(Tensor::from_vec(vec![len, 1], col)?)
        };

        let gated_from = match self.structure {
            Structure::Detached => None,
            _ => cfg.first_gated_layer(),
        };
        let mut hidden_states = vec![x];
        let mut attention = Vec::with_capacity(cfg.n_layers);
        let mut parser_input = None;
        let mut parser_graph = None;
        let mut gates: Option<Vec<Var<'t>>> = None;
        for l in 0..cfg.n_layers {
            if gated_from == Some(l) {
                parser_input = Some(x);
                let (pg, g) = self.run_parser(tape, &p, &x, pad_mask)?;
                // pad query rows keep plain attention so their rows never vanish
                gates = Some(g.iter().map(|g| g.mul(&query_keep)?.add(&query_pad)).collect::<Result<_, _>>()?);
                parser_graph = Some(pg);
            }
            let name = |s: &str| format!("layers.{l}.{s}");
            let a = x.layer_norm(Some(&p(&name("attn_norm.gain"))), Some(&p(&name("attn_norm.bias"))), NORM_EPS)?;
            let proj = |which: &str, input: &Var<'t>| -> Result<Var<'t>, TensorError> {
                let out = input.matmul(&p(&name(&format!("attn.{which}.weight"))))?;
                match which {
                    "k" => Ok(out),
                    _ => out.add(&p(&name(&format!("attn.{which}.bias")))),
                }
            };
            let (q, k, v) = (proj("q", &a)?, proj("k", &a)?, proj("v", &a)?);
            let dh = cfg.head_dim();
            let scale = 1.0 / (dh as f64).sqrt();
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut layer_probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = q.slice_cols(lo, hi)?;
                let kh = k.slice_cols(lo, hi)?;
                let vh = v.slice_cols(lo, hi)?;
                let mut probs = qh.matmul(&kh.transpose()?)?.scale(scale).add(&key_mask)?.softmax(1)?;
                if let Some(gates) = &gates {
                    probs = probs.mul(&gates[h])?;
                    probs = probs.div(&probs.sum_axis(1)?)?;
                }
                layer_probs.push(probs);
                heads.push(drop(probs).matmul(&vh)?);
            }
            attention.push(layer_probs);
            let attn = proj("o", &Var::concat_cols(&heads)?)?;
            x = x.add(&drop(attn))?;

            let f = x.layer_norm(Some(&p(&name("ffn_norm.gain"))), Some(&p(&name("ffn_norm.bias"))), NORM_EPS)?;
            let f = f
                .matmul(&p(&name("ffn.in.weight")))?
                .add(&p(&name("ffn.in.bias")))?
                .gelu()
                .matmul(&p(&name("ffn.out.weight")))?
                .add(&p(&name("ffn.out.bias")))?;
            x = x.add(&drop(f))?;
            hidden_states.push(x);
        }

        let out = x.layer_norm(Some(&p("final_norm.gain")), Some(&p("final_norm.bias")), NORM_EPS)?;
        let projection = if cfg.tie_output { p("embed.tokens").transpose()? } else { p("output.weight") };
        let logits = out.matmul(&projection)?.add(&p("output.bias"))?;
        Ok(Graph { logits, attention, hidden_states, parser_input, parser: parser_graph })
    }

    fn run_parser<'t>(
        &self,
        tape: &'t Tape,
        p: &dyn Fn(&str) -> Var<'t>,
        input: &Var<'t>,
        pad_mask: &[bool],
    ) -> Result<(ParserGraph<'t>, Vec<Var<'t>>), ModelError> {
        let pcfg = self.config.parser.as_ref().expect("validated: gated variants have a parser");
        let pair = |n: &str| (p(&format!("{n}.weight")), p(&format!("{n}.bias")));
        let weights = ParserWeights {
            convs: (0..pcfg.n_conv_layers).map(|c| pair(&format!("parser.conv.{c}"))).collect(),
            height_hidden: pair("parser.height.hidden"),
            height_out: pair("parser.height.out"),
            distance_left: p("parser.distance.left.weight"),
            distance_right: p("parser.distance.right.weight"),
            distance_bias: p("parser.distance.bias"),
            distance_out: pair("parser.distance.out"),
        };
        let (distances, heights) = parser::distances_heights(input, pad_mask, &weights)?;
        let scope = parser::scope_matrix(&distances, &heights, pad_mask, pcfg.tau_scope)?;
        let deps = parser::dependency_distribution(&scope, &heights, pad_mask, pcfg.tau_height)?;
        let mix = match self.structure {
            Structure::Fixed(w) => {
                let data = w.iter().copied().cycle().take(3 * self.config.n_heads).collect();
                RelationMix::Weights(tape.constant(Tensor::from_vec(vec![self.config.n_heads, 3], data)?))
            }
            _ => RelationMix::Logits(p("parser.relation")),
        };
        let gates = parser::attention_gates(&deps.dep, &mix)?;
        Ok((
            ParserGraph { distances, heights, scope: scope.prob, dep: deps.dep, fallback_rows: deps.fallback_rows },
            gates,
        ))
    }
}

fn initialize(spec: &ParamSpec, rng: &mut impl Rng) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::ones(spec.shape.clone()),
        Init::Normal(std) => {
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..spec.numel()).map(|_| normal.sample(rng)).collect();
            Tensor::from_vec(spec.shape.clone(), data).expect("inventory shape")
        }
    }
}
