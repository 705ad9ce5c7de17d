//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report prints in order
//! and in full. `ACCEPTANCE_ONLY=5,6` restricts the run to some criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structlm::checkpoint::Checkpoint;
use structlm::eval::{corpus_pppl, minimal_pairs_accuracy, MinimalPair};
use structlm::model::{count_parameters, Model, ModelConfig, ModelError, Structure, Variant};
use structlm::parser::structure_from;
use structlm::pretrain::{lr_at, prepare_sequences, Packing, StepStats, TrainConfig, Trainer};
use structlm::tensor::gradcheck::check_gradients;
use structlm::tensor::{Reduction, Tape, Tensor, TensorError, Var};
use structlm::tokenizer::{analyze_vocab, train_bpe, TokenizerModel};

type Check = fn() -> Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    check: Check,
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "gradient integrity", budget: secs(60), check: gradient_integrity },
        Criterion { id: 2, name: "baseline recovery", budget: secs(10), check: baseline_recovery },
        Criterion { id: 3, name: "hard-tree limit", budget: secs(1), check: hard_tree_limit },
        Criterion { id: 4, name: "pppl correctness", budget: None, check: pppl_correctness },
        Criterion { id: 5, name: "overfit smoke", budget: secs(300), check: overfit_smoke },
        Criterion { id: 6, name: "variant discrimination", budget: None, check: variant_discrimination },
        Criterion { id: 7, name: "parameter accounting", budget: None, check: parameter_accounting },
        Criterion { id: 8, name: "determinism and resume", budget: None, check: determinism_and_resume },
        Criterion { id: 9, name: "tokenizer monotonicity", budget: None, check: tokenizer_monotonicity },
        Criterion { id: 10, name: "schedule endpoints", budget: None, check: schedule_endpoints },
    ];
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), b.as_secs())),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += result.is_err() as usize;
        println!("[{tag}] {:>2} {}: {detail} ({:.2}s)", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// ---- 1 -------------------------------------------------------------------

type Scalar = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>>;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.3..1.5)).collect()).unwrap()
}

/// Fixed random weighting so each output element gets its own adjoint.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = y.tape().constant(random(y.shape(), &mut rng));
    Ok(y.mul(&w)?.sum())
}

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, Scalar)> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let m34 = random(vec![3, 4], &mut r);
    let m34b = random(vec![3, 4], &mut r);
    let row4 = random(vec![4], &mut r);
    vec![
        ("add", vec![m34.clone(), row4.clone()], Box::new(|_, v| project(v[0].add(&v[1])?, 1))),
        ("sub", vec![m34.clone(), m34b.clone()], Box::new(|_, v| project(v[0].sub(&v[1])?, 2))),
        ("mul", vec![m34.clone(), row4.clone()], Box::new(|_, v| project(v[0].mul(&v[1])?, 3))),
        ("div", vec![m34.clone(), positive(vec![4], &mut r)], Box::new(|_, v| project(v[0].div(&v[1])?, 4))),
        ("scale", vec![m34.clone()], Box::new(|_, v| project(v[0].scale(-1.7), 5))),
        ("sigmoid", vec![m34.clone()], Box::new(|_, v| project(v[0].sigmoid(), 6))),
        ("log_sigmoid", vec![m34.clone()], Box::new(|_, v| project(v[0].log_sigmoid(), 7))),
        ("tanh", vec![m34.clone()], Box::new(|_, v| project(v[0].tanh(), 8))),
        ("exp", vec![m34.clone()], Box::new(|_, v| project(v[0].exp(), 9))),
        ("ln", vec![positive(vec![3, 4], &mut r)], Box::new(|_, v| project(v[0].ln(), 10))),
        ("gelu", vec![m34.clone()], Box::new(|_, v| project(v[0].gelu(), 11))),
        (
            "matmul",
            vec![m34.clone(), random(vec![4, 2], &mut r)],
            Box::new(|_, v| project(v[0].matmul(&v[1])?, 12)),
        ),
        ("transpose", vec![m34.clone()], Box::new(|_, v| project(v[0].transpose()?, 13))),
        ("reshape", vec![m34.clone()], Box::new(|_, v| project(v[0].reshape(vec![2, 6])?, 14))),
        ("sum", vec![m34.clone()], Box::new(|_, v| Ok(v[0].sum().mul(&v[0].index(3)?)?))),
        ("mean", vec![m34.clone()], Box::new(|_, v| Ok(v[0].mean().mul(&v[0].index(7)?)?))),
        ("sum_axis", vec![m34.clone()], Box::new(|_, v| project(v[0].sum_axis(1)?, 15))),
        ("softmax", vec![m34.clone()], Box::new(|_, v| project(v[0].softmax(1)?, 16))),
        ("cumsum", vec![m34.clone()], Box::new(|_, v| project(v[0].cumsum(1, false)?, 17))),
        ("cumsum_reverse", vec![m34.clone()], Box::new(|_, v| project(v[0].cumsum(0, true)?, 18))),
        (
            "layer_norm",
            vec![m34.clone(), random(vec![4], &mut r), random(vec![4], &mut r)],
            Box::new(|_, v| project(v[0].layer_norm(Some(&v[1]), Some(&v[2]), 1e-5)?, 19)),
        ),
        (
            "conv1d",
            vec![random(vec![5, 3], &mut r), random(vec![3, 3, 2], &mut r), random(vec![2], &mut r)],
            Box::new(|_, v| project(v[0].conv1d(&v[1], Some(&v[2]))?, 20)),
        ),
        ("embedding", vec![random(vec![5, 3], &mut r)], Box::new(|_, v| project(v[0].embedding(&[4, 0, 4, 2])?, 21))),
        (
            "dropout",
            vec![m34.clone()],
            Box::new(|_, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                project(v[0].dropout(0.4, Some(&mut rng)), 22)
            }),
        ),
        (
            "cross_entropy",
            vec![m34.clone()],
            Box::new(|_, v| v[0].cross_entropy(&[1, -100, 3], -100, Reduction::Mean)),
        ),
        ("slice_rows", vec![m34.clone()], Box::new(|_, v| project(v[0].slice_rows(1, 3)?, 23))),
        ("slice_cols", vec![m34.clone()], Box::new(|_, v| project(v[0].slice_cols(1, 3)?, 24))),
        (
            "concat_cols",
            vec![m34.clone(), m34b.clone()],
            Box::new(|_, v| project(Var::concat_cols(&[v[0], v[1], v[0]])?, 25)),
        ),
        ("pad_cols", vec![m34], Box::new(|_, v| project(v[0].pad_cols(1, 2)?, 26))),
    ]
}

fn end_to_end_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(variant, 24);
    cfg.max_seq_len = 8;
    cfg.d_ffn = 24;
    cfg.embed_norm_dropout = true;
    cfg
}

fn gradient_integrity() -> Result<String, String> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    let cases = primitive_cases();
    for (name, inputs, f) in &cases {
        let report = check_gradients(inputs, STEP, |t, v| f(t, v)).map_err(|e| format!("{name}: {e}"))?;
        let err = report.max_relative_error();
        ensure(err <= TOL, || format!("{name}: relative error {err:.3e}"))?;
        worst = worst.max(err);
    }
    for variant in [Variant::S1, Variant::S2] {
        let cfg = end_to_end_config(variant);
        let mut model = Model::new(cfg.clone(), 31).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.4..0.4));
        }
        let ids = [2u32, 9, 14, 7, 20, 11, 9, 3];
        let targets = [-100i64, 12, -100, 7, 5, -100, 9, -100];
        let report = check_gradients(model.params(), STEP, |tape, vars| {
            let g = model.graph(tape, vars, &ids, &[false; 8], None).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            g.logits.cross_entropy(&targets, -100, Reduction::Mean)
        })
        .map_err(|e| e.to_string())?;
        for (spec, err) in model.specs().iter().zip(&report.relative_errors) {
            ensure(*err <= TOL, || format!("{} {}: relative error {err:.3e}", variant.name(), spec.name))?;
        }
        worst = worst.max(report.max_relative_error());
    }
    Ok(format!("{} primitives + s1/s2 end to end (L=8, d_model=16), worst relative error {worst:.2e}", cases.len()))
}

// ---- 2 -------------------------------------------------------------------

fn baseline_recovery() -> Result<String, String> {
    let mut model = Model::new(ModelConfig::tiny(Variant::S1, 60), 41).map_err(|e| e.to_string())?;
    model.set_structure(Structure::Fixed([0.0, 0.0, 1.0]));
    let twin = model.detached();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for len in [3usize, 9, 20] {
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(5..60)).collect();
        let pads = vec![false; len];
        let a = model.forward(&ids, &pads).map_err(|e| e.to_string())?;
        let b = twin.forward(&ids, &pads).map_err(|e| e.to_string())?;
        ensure(a.parser_outputs.is_some() && b.parser_outputs.is_none(), || "twin still runs the parser".into())?;
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max logit difference {worst:.3e}"))?;
    Ok(format!("max elementwise logit difference {worst:.1e}"))
}

// ---- 3 -------------------------------------------------------------------

/// Cold limit by hand: token i reaches across boundary k iff d[k] < h[i],
/// and its parent is the tallest other token it reaches.
fn cold_limit_edges(d: &[f64], h: &[f64]) -> Vec<(usize, usize)> {
    let n = h.len();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut lo = i;
        while lo > 0 && d[lo - 1] < h[i] {
            lo -= 1;
        }
        let mut hi = i;
        while hi + 1 < n && d[hi] < h[i] {
            hi += 1;
        }
        let parent = (lo..=hi).filter(|&j| j != i).max_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap();
        edges.push((i.min(parent), i.max(parent)));
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn hard_tree_limit() -> Result<String, String> {
    let d = [-1.0, 5.0, 10.8];
    let h = [0.0, 10.0, 11.0, 11.5];
    let expected = cold_limit_edges(&d, &h);
    ensure(expected == vec![(0, 1), (1, 2), (2, 3)], || format!("hand derivation gave {expected:?}"))?;
    let out = structure_from(&d, &h, &[false; 4], 1e-4, 1e-4).map_err(|e| e.to_string())?;
    let mut got = out.hard_tree();
    got.sort_unstable();
    ensure(got == expected, || format!("extracted {got:?}, expected {expected:?}"))?;
    Ok(format!("edges {got:?}"))
}

// ---- 4 -------------------------------------------------------------------

/// Masks one position at a time with a fresh forward pass and a hand-rolled log-softmax.
fn naive_pppl(model: &Model, tok: &TokenizerModel, sentences: &[String]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for s in sentences {
        let ids = tok.encode_sentence(s);
        for t in 1..ids.len() - 1 {
            let mut masked = ids.clone();
            masked[t] = tok.specials().mask;
            let logits = model.forward(&masked, &vec![false; ids.len()]).unwrap().logits;
            let row = logits.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += row[ids[t] as usize] - lse;
            count += 1;
        }
    }
    (-total / count as f64).exp()
}

fn pppl_correctness() -> Result<String, String> {
    let corpus = agreement_corpus();
    let sentences: Vec<String> = corpus.iter().take(20).cloned().collect();
    let tok = train_bpe(&corpus, 300).map_err(|e| e.to_string())?.model;
    let model = Model::new(ModelConfig::tiny(Variant::S2, tok.vocab_size()), 43).map_err(|e| e.to_string())?;
    let batched = corpus_pppl(&model, &tok, &sentences, 0).map_err(|e| e.to_string())?.pppl();
    let naive = naive_pppl(&model, &tok, &sentences);
    ensure(rel(batched, naive) <= 1e-9, || format!("batched {batched} vs naive {naive}"))?;

    let mut uniform = Model::new(ModelConfig::tiny(Variant::S1, tok.vocab_size()), 44).map_err(|e| e.to_string())?;
    uniform.params_mut().iter_mut().for_each(|p| p.data_mut().fill(0.0));
    let flat = corpus_pppl(&uniform, &tok, &sentences, 0).map_err(|e| e.to_string())?.pppl();
    let v = tok.vocab_size() as f64;
    ensure(rel(flat, v) <= 1e-6, || format!("uniform model pppl {flat} vs vocab {v}"))?;
    Ok(format!("20 sentences: batched {batched:.6} = naive (rel {:.1e}); uniform {flat:.6} = vocab {v}", rel(batched, naive)))
}

// ---- 5 and 6 -------------------------------------------------------------

const NOUNS: [&str; 16] = [
    "dog", "cat", "bird", "girl", "boy", "horse", "farmer", "teacher", "friend", "doctor", "frog", "king", "baker",
    "sailor", "tiger", "student",
];
const PHRASES: [&str; 4] = ["near the old tree", "by the river", "with a red hat", "under the bridge"];
const VERBS: [&str; 16] = [
    "run", "sing", "sleep", "jump", "laugh", "swim", "walk", "dance", "wait", "smile", "cook", "read", "climb", "shout",
    "listen", "work",
];

fn agreement_sentence(noun: usize, phrase: usize, verb: usize, plural_noun: bool, plural_verb: bool) -> String {
    let n = NOUNS[noun];
    let ns = if plural_noun { "s" } else { "" };
    let vs = if plural_verb { "" } else { "s" };
    format!("the {n}{ns} {} {}{vs} .", PHRASES[phrase], VERBS[verb])
}

/// 32 sentences: noun `k` always takes verb `k` and phrase `k % 4`, in
/// both numbers, so any single masked word is recoverable from one other word.
fn agreement_corpus() -> Vec<String> {
    let mut out = Vec::new();
    for k in 0..NOUNS.len() {
        for plural in [false, true] {
            out.push(agreement_sentence(k, k % PHRASES.len(), k, plural, plural));
        }
    }
    out
}

/// Subject-verb agreement pairs across the intervening phrase, half
/// singular. Each noun keeps its corpus verb but takes any phrase, so three
/// in four pairs are sentences the model never saw.
fn agreement_pairs(n: usize, seed: u64) -> Vec<MinimalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let plural = i % 2 == 1;
            let noun = rng.gen_range(0..NOUNS.len());
            let (phrase, verb) = (rng.gen_range(0..PHRASES.len()), noun);
            MinimalPair {
                phenomenon: if plural { "plural" } else { "singular" }.into(),
                sentence_good: agreement_sentence(noun, phrase, verb, plural, plural),
                sentence_bad: agreement_sentence(noun, phrase, verb, plural, !plural),
            }
        })
        .collect()
}

fn overfit_model_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(Variant::S1, vocab);
    cfg.d_model = 32;
    cfg.d_ffn = 64;
    cfg.parser.as_mut().unwrap().hidden_width = 32;
    cfg
}

fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        seq_len: 32,
        lr_peak: 3e-3,
        warmup_steps: 30,
        weight_decay: 0.01,
        max_steps: 1000,
        packing: Packing::Sentence,
        seed: 5,
        checkpoint_every: 10_000,
        ..TrainConfig::default()
    }
}

struct Overfit {
    tokenizer: TokenizerModel,
    untrained: Model,
    trained: Model,
    steps: u64,
}

fn overfit_run() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let corpus = agreement_corpus();
        let tokenizer = train_bpe(&corpus, 320).unwrap().model;
        let model_cfg = overfit_model_config(tokenizer.vocab_size());
        let cfg = overfit_train_config();
        let sequences = prepare_sequences(&corpus, &tokenizer, cfg.seq_len, cfg.packing);
        let mut trainer = Trainer::new(&model_cfg, cfg.clone(), sequences).unwrap();
        let untrained = trainer.model().clone();
        while !trainer.is_finished() {
            trainer.step().unwrap();
        }
        Overfit { tokenizer, untrained, steps: cfg.max_steps, trained: trainer.into_model() }
    })
}

fn overfit_smoke() -> Result<String, String> {
    let run = overfit_run();
    let corpus = agreement_corpus();
    ensure(run.tokenizer.vocab_size() <= 512, || format!("vocab {}", run.tokenizer.vocab_size()))?;
    let before = corpus_pppl(&run.untrained, &run.tokenizer, &corpus, 0).map_err(|e| e.to_string())?;
    let after = corpus_pppl(&run.trained, &run.tokenizer, &corpus, 0).map_err(|e| e.to_string())?;
    let (acc, ratio) = (after.accuracy(), after.pppl() / before.pppl());
    let detail = format!(
        "{} steps, vocab {}: masked accuracy {:.1}%, pppl {:.2} -> {:.3} ({:.1}% of initial)",
        run.steps,
        run.tokenizer.vocab_size(),
        100.0 * acc,
        before.pppl(),
        after.pppl(),
        100.0 * ratio
    );
    ensure(acc > 0.9 && ratio < 0.25, || detail.clone())?;
    Ok(detail)
}

fn variant_discrimination() -> Result<String, String> {
    let run = overfit_run();
    let pairs = agreement_pairs(500, 77);
    let corpus = agreement_corpus();
    let unseen: Vec<MinimalPair> = pairs.iter().filter(|p| !corpus.contains(&p.sentence_good)).cloned().collect();
    let score = |m: &Model, ps: &[MinimalPair]| {
        minimal_pairs_accuracy(m, &run.tokenizer, ps, "m").map(|r| r.overall.value).map_err(|e| e.to_string())
    };
    let trained = score(&run.trained, &pairs)?;
    let untrained = score(&run.untrained, &pairs)?;
    let trained_unseen = score(&run.trained, &unseen)?;
    let detail = format!(
        "500 pairs: trained s1 {:.1}% ({:.1}% on the {} unseen sentences), untrained {:.1}%",
        100.0 * trained,
        100.0 * trained_unseen,
        unseen.len(),
        100.0 * untrained
    );
    ensure(trained >= 0.6 && (0.42..=0.58).contains(&untrained), || detail.clone())?;
    Ok(detail)
}

// ---- 7 -------------------------------------------------------------------

fn parameter_accounting() -> Result<String, String> {
    let vanilla = count_parameters(&ModelConfig::base(Variant::Vanilla, 32_000));
    let s1 = count_parameters(&ModelConfig::base(Variant::S1, 32_000));
    let s2 = count_parameters(&ModelConfig::base(Variant::S2, 32_000));
    let wide = |v| {
        let mut cfg = ModelConfig::base(v, 32_000);
        cfg.parser.as_mut().unwrap().n_conv_layers = 6;
        count_parameters(&cfg)
    };
    let (s1w, s2w) = (wide(Variant::S1), wide(Variant::S2));
    let near = |n: usize, target: f64| (n as f64 - target).abs() / target <= 0.05;
    ensure(near(vanilla.total, 110e6), || format!("vanilla {}", vanilla.total))?;
    ensure(near(s1.total, 133e6) && near(s2.total, 133e6), || format!("s1 {} s2 {}", s1.total, s2.total))?;
    ensure(s1.total == s2.total && s1w.total == s2w.total, || "s1 and s2 counts differ".into())?;
    ensure(near(s1w.total, 144e6), || format!("six-conv {}", s1w.total))?;
    let parser = s1.group("parser");
    ensure(s1.total - vanilla.total == parser, || format!("delta {} vs parser {parser}", s1.total - vanilla.total))?;
    let breakdown: Vec<String> =
        ["parser.conv", "parser.height", "parser.distance", "parser.relation"].iter().map(|g| format!("{g} {}", s1.group(g))).collect();
    Ok(format!(
        "vanilla {}, s1 = s2 {}, six-conv {}; parser delta {} = {}",
        vanilla.total,
        s1.total,
        s1w.total,
        parser,
        breakdown.join(" + ")
    ))
}

// ---- 8 -------------------------------------------------------------------

fn small_trainer() -> Trainer {
    let corpus = agreement_corpus();
    let tok = train_bpe(&corpus, 300).unwrap().model;
    let cfg = TrainConfig {
        batch_size: 8,
        seq_len: 16,
        lr_peak: 1e-3,
        max_steps: 10,
        seed: 9,
        packing: Packing::Concat,
        ..TrainConfig::default()
    };
    let mut model_cfg = ModelConfig::tiny(Variant::S2, tok.vocab_size());
    model_cfg.dropout = 0.1;
    Trainer::new(&model_cfg, cfg.clone(), prepare_sequences(&corpus, &tok, cfg.seq_len, cfg.packing)).unwrap()
}

fn run_steps(trainer: &mut Trainer, n: usize) -> Vec<StepStats> {
    (0..n).map(|_| trainer.step().unwrap()).collect()
}

fn determinism_and_resume() -> Result<String, String> {
    let bits = |s: &[StepStats]| s.iter().map(|x| x.loss.to_bits()).collect::<Vec<_>>();
    let mut a = small_trainer();
    let mut b = small_trainer();
    let (ta, tb) = (run_steps(&mut a, 10), run_steps(&mut b, 10));
    ensure(bits(&ta) == bits(&tb), || "loss traces differ between identical runs".into())?;

    let mut first = small_trainer();
    let head = run_steps(&mut first, 5);
    let mut bytes = Vec::new();
    first.checkpoint().write_to(&mut bytes).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::read_from(&bytes[..]).map_err(|e| e.to_string())?;
    let corpus = agreement_corpus();
    let tok = train_bpe(&corpus, 300).unwrap().model;
    let seqs = prepare_sequences(&corpus, &tok, 16, Packing::Concat);
    let mut resumed = Trainer::resume(ckpt, seqs).map_err(|e| e.to_string())?;
    let tail = run_steps(&mut resumed, 5);
    let stitched: Vec<StepStats> = head.into_iter().chain(tail).collect();
    ensure(bits(&stitched) == bits(&ta), || "resumed loss trace differs".into())?;
    let same = a.model().params().iter().zip(resumed.model().params()).all(|(x, y)| {
        x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    ensure(same, || "resumed parameters differ".into())?;
    Ok(format!("10-step traces bitwise equal; resume at step 5 matches (final loss {:.6})", ta[9].loss))
}

// ---- 9 -------------------------------------------------------------------

/// Sentences over a made-up lexicon whose word frequencies fall off as 1/rank.
fn zipf_corpus(n_sentences: usize, n_words: usize, seed: u64) -> Vec<String> {
    let letters = b"aeioulnrstdk";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..n_words)
        .map(|_| (0..rng.gen_range(2..8)).map(|_| letters[rng.gen_range(0..letters.len())] as char).collect())
        .collect();
    let weights: Vec<f64> = (1..=n_words).map(|r| 1.0 / r as f64).collect();
    let pick = rand::distributions::WeightedIndex::new(&weights).unwrap();
    (0..n_sentences)
        .map(|_| {
            let len = rng.gen_range(4..12);
            (0..len).map(|_| lexicon[rng.sample(&pick)].as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn tokenizer_monotonicity() -> Result<String, String> {
    let sizes: Vec<usize> = (262..=346).step_by(6).collect();
    let mut lines = Vec::new();
    for (name, corpus) in [("agreement", agreement_corpus()), ("zipf", zipf_corpus(1500, 400, 3))] {
        let mut mins = Vec::new();
        for &size in &sizes {
            let tok = train_bpe(&corpus, size).map_err(|e| e.to_string())?.model;
            mins.push(analyze_vocab(&tok, &corpus, 1).min_frequency().unwrap_or(0));
        }
        ensure(mins.windows(2).all(|w| w[1] <= w[0]), || format!("{name}: {mins:?} over sizes {sizes:?}"))?;
        let positive = mins.iter().filter(|&&m| m > 0).count();
        ensure(positive >= 3, || format!("{name}: only {positive} sizes with a nonzero minimum: {mins:?}"))?;
        lines.push(format!("{name} {mins:?}"));
    }
    Ok(format!("min frequency over sizes {}..={} step 6: {}", sizes[0], sizes[sizes.len() - 1], lines.join("; ")))
}

// ---- 10 ------------------------------------------------------------------

fn schedule_endpoints() -> Result<String, String> {
    let cfg = TrainConfig::default();
    let (start, mid, end) = (lr_at(0, &cfg), lr_at(cfg.max_steps / 2, &cfg), lr_at(cfg.max_steps, &cfg));
    ensure(rel(start, 1e-4) <= 1e-12, || format!("lr_at(0) = {start}"))?;
    ensure(rel(mid, 5e-5) <= 1e-12, || format!("midpoint {mid}"))?;
    ensure(end == 0.0, || format!("lr_at(max_steps) = {end}"))?;
    Ok(format!("lr_at(0) = {start:e}, lr_at({}) = {mid:e}, lr_at({}) = {end}", cfg.max_steps / 2, cfg.max_steps))
}
