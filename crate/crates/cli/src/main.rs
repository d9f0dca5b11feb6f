// SPDX-License-Identifier: MIT OR Apache-2.0

//! `lincirc`: train a toy transformer and its dictionaries, build exact
//! linear computation graphs, and attribute through them.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "lincirc", version, about = "Circuit discovery with sparse dictionaries and linear computation graphs")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CorpusFamily {
    Mixture,
    Bracket,
    Induction,
    Ioi,
}

/// Selects one input sequence.
#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Corpus JSON to draw the input from.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Index of the sequence within the corpus.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Space-separated tokens, used instead of a corpus.
    #[arg(long, conflicts_with = "corpus")]
    pub input: Option<String>,
    /// Generate a held-out sequence of this family when no corpus or input
    /// is given.
    #[arg(long, value_enum, default_value_t = CorpusFamily::Induction)]
    pub family: CorpusFamily,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of dictionaries.
    #[arg(long)]
    pub dicts: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AttrArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = ["standard", "hierarchical"])]
    pub method: Option<String>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub detach_errors: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub detach_biases: Option<bool>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a default configuration file.
    InitConfig,
    /// Generate a task corpus.
    GenCorpus {
        #[arg(long, value_enum, default_value_t = CorpusFamily::Mixture)]
        family: CorpusFamily,
        #[arg(long)]
        count: Option<usize>,
        /// Induction sequence length.
        #[arg(long, default_value_t = 24)]
        seq_len: usize,
        /// Bracket nesting depth.
        #[arg(long, default_value_t = 3)]
        max_depth: usize,
    },
    /// Train the toy language model.
    TrainLm {
        /// Training corpus; a mixture is generated from the config if absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train dictionaries on a trained model.
    TrainDict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Comma-separated hooks such as `L0.attn-out,L1.mlp`; all configured
        /// hooks by default.
        #[arg(long)]
        hooks: Option<String>,
        /// Overrides every dictionary's token budget.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Prune dead or weak features using held-out statistics.
    PruneDict {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finetune decoders and activation scalers with the encoder frozen.
    FinetuneDict {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Evaluate dictionaries on held-out data.
    EvalDict {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Build and verify the linear computation graph for one input.
    BuildGraph {
        #[command(flatten)]
        m: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        /// `logit:POS:TOK`, `feature:LAYER:SITE:IDX:POS` or `answer`.
        #[arg(long)]
        root: Option<String>,
    },
    /// Attribute a root through a graph.
    Attribute {
        /// A graph written by `build-graph`; otherwise one is built.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dicts: Option<PathBuf>,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        root: Option<String>,
        #[command(flatten)]
        attr: AttrArgs,
    },
    /// Decompose one attention score over pairs of upstream features.
    QkAttribute {
        #[command(flatten)]
        m: ModelArgs,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        /// Query position; the last position by default.
        #[arg(long)]
        query: Option<usize>,
        #[arg(long)]
        key: usize,
        #[arg(long)]
        qk_depth: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Recovery against node count for both attribution methods.
    Sweep {
        #[command(flatten)]
        m: ModelArgs,
        /// `ioi`, `induction`, `bracket`, or a corpus path.
        #[arg(long, default_value = "ioi")]
        inputs: String,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        attr: AttrArgs,
    },
    /// Convert a graph (optionally with an attribution result) to DOT or JSON.
    Export {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        attribution: Option<PathBuf>,
        #[arg(long, value_parser = ["dot", "json"], default_value = "dot")]
        format: String,
    },
}

/// The class printed in the one-line error report.
fn error_class(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(l) = cause.downcast_ref::<lincirc::Error>() {
            return l.class();
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<commands::VerificationFailed>().is_some() {
            return "verification_failed";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LINCIRC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| commands::UsageError(format!("LINCIRC_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(commands::UsageError("LINCIRC_THREADS must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_class(&e));
            ExitCode::FAILURE
        }
    }
}
