use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Structure-biased masked language model experiments.
#[derive(Debug, Parser)]
#[command(name = "structlm", version, about)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, env = "STRUCTLM_CONFIG")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.max_steps=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from a corpus.
    TrainTokenizer {
        /// Corpus, one sentence per line [paths.train_corpus].
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// [tokenizer.vocab_size]
        #[arg(long)]
        vocab_size: Option<usize>,
        /// Tokenizer file to write [paths.tokenizer].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Least frequent tokens for several vocabulary sizes.
    AnalyzeVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated vocabulary sizes.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        sizes: Vec<usize>,
        /// Tokens listed per size.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-LM pretraining; writes metrics.ndjson and checkpoints.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// [paths.output_dir]
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// vanilla, s1 or s2 [model.variant]
        #[arg(long)]
        variant: Option<String>,
        /// [train.max_steps]
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint; its training settings take precedence.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Corpus pseudo-perplexity.
    EvalPppl {
        #[command(flatten)]
        common: EvalArgs,
        /// Drop this many longest sentences first [eval.trim_longest].
        #[arg(long)]
        trim: Option<usize>,
    },
    /// Zero-shot minimal-pair accuracy.
    EvalPairs {
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Hard dependency trees scored against gold edges.
    InduceTrees {
        #[command(flatten)]
        common: EvalArgs,
        /// Also write the predicted trees here.
        #[arg(long)]
        trees_out: Option<PathBuf>,
    },
    /// Difference table of report files against a baseline model.
    Compare {
        #[arg(long)]
        baseline: String,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation data [paths.test_corpus].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Model name in the report; defaults to the checkpoint file stem.
    #[arg(long)]
    name: Option<String>,
    /// Report file to write; the report is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
