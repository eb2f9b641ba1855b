//! `seqmatch`: train, evaluate, score, retrieve, visualize, gradcheck, and
//! bench for the multi-turn response-selection engine.
//!
//! Exit codes: 0 success, 1 internal/check failure, 2 usage or
//! configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqmatch::config::RunConfig;
use seqmatch::Error;

#[derive(Parser)]
#[command(name = "seqmatch", version, about = "Multi-turn response selection engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each one overrides the matching config
/// file key.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Plain key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model kind: scn, san, scn_single, san_single, tfidf.
    #[arg(long)]
    model: Option<String>,
    /// Prediction head: last, static, dynamic.
    #[arg(long)]
    head: Option<String>,
    /// Matching channels: both, words, segments.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Pretrained word vectors (textual "count dim" header format).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Evaluation protocol: ubuntu or douban.
    #[arg(long)]
    mode: Option<String>,
    /// Any other config key, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// File values (or defaults) with flag overrides on top.
    fn build(&self) -> seqmatch::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    /// Layers a config file (when given) and the flags over an existing
    /// base, for commands whose base configuration comes from a checkpoint.
    fn overlay(&self, cfg: &mut RunConfig) -> seqmatch::Result<()> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("config not found: {}: {e}", path.display()))
            })?;
            cfg.apply_kv(&text)?;
        }
        self.apply(cfg)
    }

    /// Applies only the flags (used when the base config comes from a
    /// checkpoint).
    fn apply(&self, cfg: &mut RunConfig) -> seqmatch::Result<()> {
        if let Some(v) = &self.model {
            cfg.set("model", v)?;
        }
        if let Some(v) = &self.head {
            cfg.set("head", v)?;
        }
        if let Some(v) = &self.channels {
            cfg.set("channels", v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.max_turns {
            cfg.max_turns = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = &self.mode {
            cfg.set("mode", v)?;
        }
        for (key, field) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
            ("embeddings", &self.embeddings),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
        ] {
            if let Some(path) = field {
                cfg.set(key, &path.to_string_lossy())?;
            }
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best-validation checkpoint and history.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a test set and report the protocol's ranking metrics.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Restrict to a context-length bucket: (0,5], (5,10] or (10,).
        #[arg(long)]
        bucket: Option<String>,
    },
    /// Rank response candidates for one context.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Context utterances separated by "||".
        #[arg(long)]
        context: String,
        /// Response candidates to rank.
        #[arg(required = true)]
        candidates: Vec<String>,
    },
    /// Retrieve response candidates for a context from an index.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Context utterances separated by "||".
        #[arg(long)]
        context: String,
        /// Build the index from this dataset's responses instead of loading
        /// --index.
        #[arg(long)]
        build_index: Option<PathBuf>,
        /// Persist the built index here.
        #[arg(long)]
        save_index: Option<PathBuf>,
        /// Load a persisted index.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Number of candidates.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Export the similarity/attention grids and gate activations for one
    /// instance.
    Visualize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Context utterances separated by "||".
        #[arg(long)]
        context: String,
        #[arg(long)]
        response: String,
    },
    /// Run the gradient-check suite over all ops and micro models.
    Gradcheck {
        /// Test hook: corrupt the named op's backward rule; the suite must
        /// then fail naming it.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Time both matchers on synthetic batches and report the ratio.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Usage(_)
        | Error::Config(_)
        | Error::Data(_)
        | Error::Parse { .. }
        | Error::Label(_)
        | Error::Vocab(_)
        | Error::Io(_) => 2,
        Error::Checkpoint(_) | Error::Protocol(_) | Error::Numeric(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { cfg } => commands::train(&cfg),
        Command::Evaluate { cfg, bucket } => commands::evaluate(&cfg, bucket.as_deref()),
        Command::Score { cfg, context, candidates } => {
            commands::score(&cfg, &context, &candidates)
        }
        Command::Retrieve { cfg, context, build_index, save_index, index, k } => {
            commands::retrieve(&cfg, &context, build_index, save_index, index, k)
        }
        Command::Visualize { cfg, context, response } => {
            commands::visualize(&cfg, &context, &response)
        }
        Command::Gradcheck { inject_fault } => commands::gradcheck(inject_fault.as_deref()),
        Command::Bench { cfg } => commands::bench(&cfg),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
