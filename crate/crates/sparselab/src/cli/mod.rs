//! Command-line interface: argument definitions and dispatch.

pub mod commands;
pub mod config;
pub mod sweep;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "sparselab",
    about = "Measure, model, and exploit activation sparsity in tiny gated-FFN transformers",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// TOML experiment config; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads where a command supports them.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic text corpus.
    GenCorpus {
        #[command(flatten)]
        shared: Shared,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4_000_000)]
        bytes: usize,
    },
    /// Train a model on a byte corpus, emitting SPLW checkpoints.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// relu or silu.
        #[arg(long)]
        activation: Option<String>,
        #[arg(long)]
        total_tokens: Option<u64>,
        #[arg(long)]
        d_h: Option<usize>,
        #[arg(long)]
        n_layers: Option<usize>,
    },
    /// Measure activation sparsity of a run (stabilized series) or of a
    /// single checkpoint.
    Measure {
        #[command(flatten)]
        shared: Shared,
        /// Training run directory with manifest.json.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Single checkpoint file instead of a run.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluation byte stream; defaults to the run's valid.bin.
        #[arg(long)]
        data: Option<PathBuf>,
        /// zero, topk, fat, or cett.
        #[arg(long)]
        method: Option<String>,
        /// PPL increase tolerance in percent (cett method).
        #[arg(long)]
        p: Option<f64>,
        /// Method scalar: k for topk, epsilon for fat, target for cett.
        #[arg(long)]
        param: Option<f64>,
        /// Calibration sample size in tokens.
        #[arg(long)]
        calib_tokens: Option<usize>,
    },
    /// Fit an activation-vs-data law to a points CSV.
    Fit {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        points: Option<PathBuf>,
        /// relu or silu.
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        normalization: Option<f64>,
    },
    /// Wall-clock benchmark of sparse FFN execution.
    Bench {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        d_h: Option<usize>,
        #[arg(long)]
        d_f: Option<usize>,
        /// gate or norm.
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated sparsity grid, e.g. 0,0.5,0.9.
        #[arg(long, value_delimiter = ',')]
        sparsity: Option<Vec<f64>>,
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Neuron/token activation-pattern analytics for one checkpoint.
    Analyze {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        param: Option<f64>,
        #[arg(long)]
        bins: Option<usize>,
        /// Token-table JSON from a previous run to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Width-depth-ratio sweep at a constant parameter budget.
    Sweep {
        #[command(flatten)]
        shared: Shared,
        /// Comma-separated width-depth ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        p: Option<f64>,
    },
}

/// Run one parsed command to completion.
pub fn run(cli: Cli) -> crate::error::Result<()> {
    match cli.command {
        Command::GenCorpus { shared, out, bytes } => commands::cmd_gen_corpus(&shared, &out, bytes),
        Command::Train {
            shared,
            corpus,
            activation,
            total_tokens,
            d_h,
            n_layers,
        } => commands::cmd_train(&shared, corpus, activation, total_tokens, d_h, n_layers).map(|_| ()),
        Command::Measure {
            shared,
            run_dir,
            ckpt,
            data,
            method,
            p,
            param,
            calib_tokens,
        } => commands::cmd_measure(&shared, run_dir, ckpt, data, method, p, param, calib_tokens),
        Command::Fit {
            shared,
            points,
            family,
            normalization,
        } => commands::cmd_fit(&shared, points, family, normalization).map(|_| ()),
        Command::Bench {
            shared,
            d_h,
            d_f,
            mode,
            sparsity,
            tokens,
        } => commands::cmd_bench(&shared, d_h, d_f, mode, sparsity, tokens),
        Command::Analyze {
            shared,
            ckpt,
            data,
            method,
            p,
            param,
            bins,
            compare,
        } => commands::cmd_analyze(&shared, ckpt, data, method, p, param, bins, compare),
        Command::Sweep { shared, ratios, p } => sweep::cmd_sweep(&shared, ratios, p),
    }
}
