//! Command-line harness: derive draft tables, run speculative generation,
//! sweep `(k, w)` grids, ablate the mixed strategy and emit latency heatmaps.
//!
//! Every command is a pure function of its flags, input files and seed.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ngdraft_core::costmodel::AcceleratorProfile;
use ngdraft_core::drafters::DEFAULT_TABLE_DEPTH;
use ngdraft_core::strategy::{DraftTables, StrategyKind};
use ngdraft_core::vocab::VocabMode;
use thiserror::Error;

pub mod commands;
pub mod setup;

use commands::{EvalConfig, DEFAULT_HEATMAP_LS, DEFAULT_SWEEP_KS, DEFAULT_SWEEP_WS};
use setup::{CorpusConfig, ModelSpec, Workspace};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or inputs that cannot work; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Everything else (I/O, malformed files); exit code 1.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ngdraft_core::Error> for CliError {
    fn from(e: ngdraft_core::Error) -> Self {
        use ngdraft_core::Error as E;
        match e {
            E::EmptyCorpus
            | E::CorpusTooShort { .. }
            | E::InvalidArgument(_)
            | E::ExceedsBound { .. }
            | E::NoEmbeddings => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ngdraft",
    version,
    about = "Speculative greedy decoding with N-gram drafts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = VocabMode::Word)]
    pub vocab_mode: VocabMode,
    /// Corpus file; repeat for several datasets.
    #[arg(long, global = true)]
    pub corpus: Vec<PathBuf>,
    /// Treat every non-empty line as a separate document.
    #[arg(long, global = true)]
    pub per_line: bool,
    /// `table:<order>` or `toy:<seed>:<dim>`.
    #[arg(long, global = true, default_value = "table:3")]
    pub model: ModelSpec,
    /// Toy model weights written by `derive` (overrides the seed).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 10)]
    pub k: usize,
    #[arg(long, global = true, default_value_t = 10)]
    pub w: usize,
    #[arg(long, global = true, default_value_t = 1)]
    pub q: usize,
    #[arg(long, global = true, default_value_t = StrategyKind::Mixed)]
    pub strategy: StrategyKind,
    /// Accelerator profile (`key = value` lines); the built-in default otherwise.
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Prompts sampled per dataset.
    #[arg(long, global = true, default_value_t = 8)]
    pub prompts: usize,
    #[arg(long, global = true, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long, global = true, default_value_t = 64)]
    pub max_tokens: usize,
    /// Rows per seed token in the derived tables (default min(32, vocab)).
    #[arg(long, global = true)]
    pub table_k: Option<usize>,
    #[arg(long, global = true, default_value_t = DEFAULT_TABLE_DEPTH)]
    pub table_depth: usize,
    /// Load tables written by `derive` from this directory.
    #[arg(long, global = true)]
    pub tables: Option<PathBuf>,
    /// Stop generating after this word (or byte) is emitted.
    #[arg(long, global = true)]
    pub stop: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build bigram and extended bigram tables (and toy weights).
    Derive,
    /// Generate from sampled prompts with one (k, w) and report metrics.
    Run,
    /// Evaluate a grid of (k, w) cells.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_KS)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_WS)]
        ws: Vec<usize>,
    },
    /// Acceptance, rank and allocation histograms of the mixed strategy.
    Ablate,
    /// Slowdown grids of the cost model.
    Heatmap {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HEATMAP_LS)]
        ls: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        k_max: usize,
        #[arg(long, default_value_t = 15)]
        w_max: usize,
    },
}

impl CommonArgs {
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            paths: self.corpus.clone(),
            vocab_mode: self.vocab_mode,
            per_line: self.per_line,
            model: self.model,
            weights: self.weights.clone(),
        }
    }

    pub fn profile(&self) -> Result<AcceleratorProfile, CliError> {
        match &self.profile {
            Some(p) => AcceleratorProfile::load(p).map_err(|e| match e {
                ngdraft_core::Error::Io(io) => CliError::Runtime(
                    anyhow::Error::new(io).context(format!("reading {}", p.display())),
                ),
                other => CliError::Config(format!("profile {}: {other}", p.display())),
            }),
            None => Ok(AcceleratorProfile::default()),
        }
    }

    pub fn eval_config(&self, ws: &Workspace) -> Result<EvalConfig, CliError> {
        Ok(EvalConfig {
            kind: self.strategy,
            k: self.k,
            w: self.w,
            q: self.q,
            stop_token: ws.stop_token(self.stop.as_deref())?,
            prompts: self.prompts,
            prompt_len: self.prompt_len,
            max_tokens: self.max_tokens,
            seed: self.seed,
        })
    }

    pub fn tables(&self, ws: &Workspace) -> Result<DraftTables, CliError> {
        match &self.tables {
            Some(dir) => ws.load_tables(dir),
            None => ws.derive_tables(ws.table_k(self.table_k), self.table_depth),
        }
    }
}

/// Runs a parsed command and returns what it prints on success.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let c = &cli.common;
    let profile = c.profile()?;
    if let Command::Heatmap { ls, k_max, w_max } = &cli.command {
        if ls.is_empty() || *k_max < 1 {
            return Err(CliError::Config(
                "heatmap needs --ls and --k-max >= 1".into(),
            ));
        }
        let ks: Vec<usize> = (1..=*k_max).collect();
        let ws: Vec<usize> = (0..=*w_max).collect();
        let grids = commands::heatmaps(&profile, ls, &ks, &ws, &c.out)?;
        let mut s = String::new();
        for g in grids {
            let plateau = g.cells().filter(|&(_, _, v)| v < 1.05).count();
            let max = g.cells().map(|(_, _, v)| v).fold(1.0, f64::max);
            s += &format!(
                "l={:<5} cells<1.05: {plateau:>4}/{}  max slowdown {max:.3}\n",
                g.l,
                ks.len() * ws.len()
            );
        }
        return Ok(s);
    }

    let ws = Workspace::load(&c.corpus_config())?;
    match &cli.command {
        Command::Derive => {
            let written = commands::derive(&ws, ws.table_k(c.table_k), c.table_depth, &c.out)?;
            Ok(written
                .iter()
                .map(|p| format!("wrote {}\n", p.display()))
                .collect())
        }
        Command::Run => {
            let tables = c.tables(&ws)?;
            let cfg = c.eval_config(&ws)?;
            let report = commands::run(&ws, c.model.to_string(), &tables, &profile, &cfg, &c.out)?;
            Ok(report.summary())
        }
        Command::Sweep { ks, ws: widths } => {
            let tables = c.tables(&ws)?;
            let cfg = c.eval_config(&ws)?;
            let report = commands::sweep(&ws, &tables, &profile, &cfg, ks, widths, &c.out)?;
            let mut s = format!(
                "{} cells written to {}\n",
                report.rows.len(),
                c.out.join("sweep.csv").display()
            );
            let b = &report.best;
            s += &format!(
                "best (k*, w*) = ({}, {}): tok/call {:.3}, sim speedup {:.3}\n",
                b.k, b.w, b.tokens_per_call, b.sim_speedup
            );
            if let Some(r) = &report.reference {
                s += &format!(
                    "reference (10, 10): tok/call {:.3}, sim speedup {:.3}\n",
                    r.tokens_per_call, r.sim_speedup
                );
            }
            Ok(s)
        }
        Command::Ablate => {
            let tables = c.tables(&ws)?;
            let cfg = c.eval_config(&ws)?;
            let all = commands::ablate(&ws, &tables, &profile, &cfg, &c.out)?;
            Ok(all
                .iter()
                .map(|t| {
                    format!(
                        "{}: {} calls, histograms in {}\n",
                        t.dataset,
                        t.call_count,
                        c.out.display()
                    )
                })
                .collect())
        }
        Command::Heatmap { .. } => unreachable!("handled above"),
    }
}
