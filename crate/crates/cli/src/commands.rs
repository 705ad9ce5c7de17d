use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use structlm::checkpoint::Checkpoint;
use structlm::eval::{
    corpus_pppl, delta_report, delta_table, induce_trees, minimal_pairs_accuracy, parse_gold_trees, read_pairs,
    read_reports, write_reports, write_trees, EvalReport, Metric,
};
use structlm::experiment::{ConfigError, ExperimentConfig};
use structlm::model::{Model, ModelError};
use structlm::pretrain::{prepare_sequences, run_training, TrainError, Trainer};
use structlm::tokenizer::{analyze_vocab, train_bpe, TokenizerModel};

use crate::{Cli, Command, EvalArgs};

/// Bad invocation: missing arguments or inconsistent settings.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

/// A result that came out NaN or infinite.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericError(String);

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// 1 for usage and configuration problems, 3 for numeric blow-ups, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<NumericError>() {
            return 3;
        }
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::NonFinite { .. } => return 3,
                TrainError::Config(_) => return 1,
                _ => {}
            }
        }
        if let Some(ModelError::Config(_)) = cause.downcast_ref::<ModelError>() {
            return 1;
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::from_text(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(command) = &cli.command {
        for (key, value) in flag_overrides(command) {
            cfg.set(key, &value)?;
        }
    }
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(usage("no subcommand given; see --help"));
    };
    match command {
        Command::TrainTokenizer { .. } => train_tokenizer(&cfg),
        Command::AnalyzeVocab { sizes, k, out, .. } => analyze(&cfg, &sizes, k, out.as_deref()),
        Command::Pretrain { resume, .. } => pretrain(&cfg, resume.as_deref()),
        Command::EvalPppl { common, .. } => eval_pppl(&cfg, &common),
        Command::EvalPairs { common } => eval_pairs(&cfg, &common),
        Command::InduceTrees { common, trees_out } => eval_trees(&cfg, &common, trees_out.as_deref()),
        Command::Compare { baseline, reports, out } => compare(&baseline, &reports, out.as_deref()),
    }
}

/// Subcommand flags mapped onto the config keys they override.
fn flag_overrides(command: &Command) -> Vec<(&'static str, String)> {
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let mut out = Vec::new();
    let mut push = |key: &'static str, value: Option<String>| {
        if let Some(v) = value {
            out.push((key, v));
        }
    };
    match command {
        Command::TrainTokenizer { corpus, vocab_size, out } => {
            push("paths.train_corpus", path(corpus));
            push("tokenizer.vocab_size", vocab_size.map(|v| v.to_string()));
            push("paths.tokenizer", path(out));
        }
        Command::AnalyzeVocab { corpus, .. } => push("paths.train_corpus", path(corpus)),
        Command::Pretrain { corpus, tokenizer, out_dir, variant, steps, seed, .. } => {
            push("paths.train_corpus", path(corpus));
            push("paths.tokenizer", path(tokenizer));
            push("paths.output_dir", path(out_dir));
            push("model.variant", variant.clone());
            push("train.max_steps", steps.map(|v| v.to_string()));
            push("seed", seed.map(|v| v.to_string()));
        }
        Command::EvalPppl { common, trim } => {
            push("paths.test_corpus", path(&common.data));
            push("paths.tokenizer", path(&common.tokenizer));
            push("eval.trim_longest", trim.map(|v| v.to_string()));
        }
        Command::EvalPairs { common } | Command::InduceTrees { common, .. } => {
            push("paths.tokenizer", path(&common.tokenizer));
        }
        Command::Compare { .. } => {}
    }
    out
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("{key} is not set; pass {flag} or set it in the config")))
}

/// Non-blank lines, trimmed.
fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn load_tokenizer(cfg: &ExperimentConfig) -> Result<TokenizerModel> {
    let path = required(&cfg.paths.tokenizer, "paths.tokenizer", "--tokenizer")?;
    TokenizerModel::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(path) = path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn train_tokenizer(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = read_lines(required(&cfg.paths.train_corpus, "paths.train_corpus", "--corpus")?)?;
    let out = required(&cfg.paths.tokenizer, "paths.tokenizer", "--out")?;
    let trained = train_bpe(&corpus, cfg.tokenizer_vocab_size)?;
    if let Some(short) = &trained.shortfall {
        log::warn!("{short}");
    }
    trained.model.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} tokens)", out.display(), trained.model.vocab_size());
    Ok(())
}

fn analyze(cfg: &ExperimentConfig, sizes: &[usize], k: usize, out: Option<&Path>) -> Result<()> {
    if sizes.is_empty() {
        return Err(usage("--sizes needs at least one vocabulary size"));
    }
    let corpus = read_lines(required(&cfg.paths.train_corpus, "paths.train_corpus", "--corpus")?)?;
    let mut blocks = Vec::new();
    let mut failed = Vec::new();
    for &size in sizes {
        match train_bpe(&corpus, size) {
            Ok(trained) => {
                if let Some(short) = &trained.shortfall {
                    log::warn!("{short}");
                }
                blocks.push(analyze_vocab(&trained.model, &corpus, k).to_tsv());
            }
            Err(e) => {
                eprintln!("vocab size {size}: {e}");
                failed.push(size);
            }
        }
    }
    write_output(out, &blocks.join("\n"))?;
    if !failed.is_empty() {
        bail!("{} of {} vocabulary sizes failed: {failed:?}", failed.len(), sizes.len());
    }
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<()> {
    let corpus = read_lines(required(&cfg.paths.train_corpus, "paths.train_corpus", "--corpus")?)?;
    let tokenizer = load_tokenizer(cfg)?;
    let out_dir = required(&cfg.paths.output_dir, "paths.output_dir", "--out-dir")?;
    let model_cfg = cfg.model_config(tokenizer.vocab_size())?;
    let train_cfg = cfg.train_config()?;
    let trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ckpt.model.config().vocab_size != tokenizer.vocab_size() {
                bail!(
                    "checkpoint vocabulary ({}) does not match the tokenizer ({})",
                    ckpt.model.config().vocab_size,
                    tokenizer.vocab_size()
                );
            }
            if ckpt.train_config.as_ref() != Some(&train_cfg) {
                log::warn!("resuming with the training settings stored in {}", path.display());
            }
            let ckpt_cfg = ckpt.train_config.clone().unwrap_or(train_cfg);
            let seq_len = ckpt_cfg.seq_len.min(ckpt.model.config().max_seq_len);
            Trainer::resume(ckpt, prepare_sequences(&corpus, &tokenizer, seq_len, ckpt_cfg.packing))?
        }
        None => {
            let seq_len = train_cfg.seq_len.min(model_cfg.max_seq_len);
            let sequences = prepare_sequences(&corpus, &tokenizer, seq_len, train_cfg.packing);
            Trainer::new(&model_cfg, train_cfg, sequences)?
        }
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.resolved"), cfg.to_text())?;
    let outcome = run_training(trainer, out_dir)?;
    match outcome.metrics.last() {
        Some(last) => println!(
            "trained to step {} (loss {:.4}); wrote {}",
            last.step,
            last.loss,
            outcome.final_checkpoint.display()
        ),
        None => println!("nothing to do; wrote {}", outcome.final_checkpoint.display()),
    }
    Ok(())
}

struct Loaded {
    model: Model,
    tokenizer: TokenizerModel,
    name: String,
}

fn load_for_eval(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let tokenizer = load_tokenizer(cfg)?;
    if ckpt.model.config().vocab_size != tokenizer.vocab_size() {
        bail!(
            "checkpoint vocabulary ({}) does not match the tokenizer ({})",
            ckpt.model.config().vocab_size,
            tokenizer.vocab_size()
        );
    }
    let name = args.name.clone().unwrap_or_else(|| {
        args.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    });
    Ok(Loaded { model: ckpt.model, tokenizer, name })
}

fn eval_pppl(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<()> {
    let loaded = load_for_eval(cfg, args)?;
    let sentences = read_lines(required(&cfg.paths.test_corpus, "paths.test_corpus", "--data")?)?;
    let acc = corpus_pppl(&loaded.model, &loaded.tokenizer, &sentences, cfg.trim_longest)?;
    if !acc.pppl().is_finite() {
        bail!(NumericError(format!("pseudo-perplexity is {}", acc.pppl())));
    }
    let report = EvalReport {
        model: loaded.name,
        task: "pppl".into(),
        metric: Metric::Pppl,
        value: acc.pppl(),
        n_items: acc.n_sentences,
    };
    write_output(args.out.as_deref(), &write_reports(&[report]))
}

fn eval_pairs(cfg: &ExperimentConfig, args: &EvalArgs) -> Result<()> {
    let data = args.data.as_deref().ok_or_else(|| usage("eval-pairs needs --data"))?;
    let loaded = load_for_eval(cfg, args)?;
    let text = fs::read_to_string(data).with_context(|| format!("reading {}", data.display()))?;
    let pairs = read_pairs(&text).with_context(|| format!("pairs file {}", data.display()))?;
    let report = minimal_pairs_accuracy(&loaded.model, &loaded.tokenizer, &pairs, &loaded.name)?;
    write_output(args.out.as_deref(), &write_reports(&report.all()))
}

fn eval_trees(cfg: &ExperimentConfig, args: &EvalArgs, trees_out: Option<&Path>) -> Result<()> {
    let data = args.data.as_deref().ok_or_else(|| usage("induce-trees needs --data"))?;
    let loaded = load_for_eval(cfg, args)?;
    let text = fs::read_to_string(data).with_context(|| format!("reading {}", data.display()))?;
    let gold = parse_gold_trees(&text).with_context(|| format!("gold trees {}", data.display()))?;
    let result = induce_trees(&loaded.model, &loaded.tokenizer, &gold, &loaded.name)?;
    if let Some(path) = trees_out {
        fs::write(path, write_trees(&result.predicted)).with_context(|| format!("writing {}", path.display()))?;
    }
    write_output(args.out.as_deref(), &write_reports(&[result.report]))
}

fn compare(baseline: &str, paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut reports = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        reports.extend(read_reports(&text).with_context(|| format!("report {}", path.display()))?);
    }
    let rows = delta_report(&reports, baseline)?;
    let incomplete = rows.iter().filter(|r| r.incomplete()).count();
    if incomplete > 0 {
        log::warn!("{incomplete} score(s) have no baseline counterpart");
    }
    write_output(out, &delta_table(&rows, baseline))
}
