//! `crr` — one binary for the whole experiment loop: augment a corpus,
//! train under a chosen regime, evaluate, run the synthetic causal
//! benchmark, and render saliency/report artifacts. Configuration comes
//! from a TOML file; flags override it; every run writes its effective
//! config and a one-line-timestamp metadata file to the output directory.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crr_core::augment::PositionPolicy;
use crr_core::objective::DivergenceKind;
use crr_core::saliency::{RenderMode, SaliencyTarget};
use crr_core::trainer::{Regime, TrainError};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags — exit 2.
    Config(String),
    /// Missing or malformed input data — exit 3.
    Data(String),
    /// Numeric failure (NaN abort, non-finite params) — exit 4.
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::NumericFailure { .. } => CliError::Numeric(e.to_string()),
            TrainError::Precondition(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crr_core::causal_sim::SimError> for CliError {
    fn from(e: crr_core::causal_sim::SimError) -> CliError {
        use crr_core::causal_sim::SimError;
        match e {
            SimError::Spec(_) => CliError::Config(e.to_string()),
            SimError::Train(t) => t.into(),
            SimError::Model(_) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "crr", version, about = "Aspect-robust sentiment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; all randomness derives from it via named substreams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build an aspect bank and write augmented original/variant pairs.
    Augment {
        #[command(flatten)]
        global: Global,
        /// Training corpus (JSONL).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sentiment lexicon file; defaults to the bundled list.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Append-only placement (no prepended phrases).
        #[arg(long)]
        rear_only: bool,
    },
    /// Train a classifier; writes checkpoint, vocab, and epoch CSV.
    Train {
        #[command(flatten)]
        global: Global,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Augmented pairs from `crr augment` (unused by baseline).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// baseline | adversarial | crr | cad
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// kl_forward | kl_reverse | js
        #[arg(long)]
        divergence: Option<String>,
        /// Sweep the alpha/learning-rate grids and keep the best dev cell.
        #[arg(long)]
        grid: bool,
    },
    /// Evaluate a checkpoint; writes metrics and subset reports.
    Eval {
        #[command(flatten)]
        global: Global,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Treat data as a variants-carrying file (enables ARS).
        #[arg(long)]
        arts: bool,
    },
    /// Generate the synthetic causal benchmark and verify invariance.
    Simulate {
        #[command(flatten)]
        global: Global,
        /// Label-spurious correlation strength in [0, 1].
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Render gradient saliency for selected instances.
    Saliency {
        #[command(flatten)]
        global: Global,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Instance id to render (repeatable); default: all instances.
        #[arg(long = "id")]
        ids: Vec<String>,
        /// ansi | html
        #[arg(long)]
        mode: Option<String>,
        /// gold | predicted
        #[arg(long)]
        target: Option<String>,
    },
    /// Summarize metrics.json files from several runs into one table.
    Report {
        #[command(flatten)]
        global: Global,
        /// metrics.json path (repeatable).
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
}

/// Parse an enum flag through its serde name (the same spelling the
/// config file uses).
fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Config(format!("invalid {what}: {s:?}")))
}

fn merge_global(cfg: &mut RunConfig, g: &Global) {
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let global = match &cli.command {
        Command::Augment { global, .. }
        | Command::Train { global, .. }
        | Command::Eval { global, .. }
        | Command::Simulate { global, .. }
        | Command::Saliency { global, .. }
        | Command::Report { global, .. } => global,
    };
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    merge_global(&mut cfg, global);
    if cfg.out.as_os_str().is_empty() {
        return Err(CliError::Config("output directory is required (--out or config)".into()));
    }

    match &cli.command {
        Command::Augment { data, lexicon, rear_only, .. } => {
            if let Some(d) = data {
                cfg.augment.data = d.clone();
            }
            if let Some(l) = lexicon {
                cfg.augment.lexicon = l.clone();
            }
            if *rear_only {
                cfg.augment.position_policy = PositionPolicy::RearOnly;
            }
            commands::write_run_metadata(&cfg, "augment")?;
            commands::cmd_augment(&cfg)
        }
        Command::Train { data, pairs, regime, epochs, alpha, divergence, grid, .. } => {
            if let Some(d) = data {
                cfg.train.data = d.clone();
            }
            if let Some(p) = pairs {
                cfg.train.pairs = p.clone();
            }
            if let Some(r) = regime {
                cfg.train.regime = parse_enum::<Regime>("regime", r)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(a) = alpha {
                cfg.train.alpha = *a;
            }
            if let Some(d) = divergence {
                cfg.train.divergence = parse_enum::<DivergenceKind>("divergence", d)?;
            }
            if *grid {
                cfg.train.grid = true;
            }
            commands::write_run_metadata(&cfg, "train")?;
            commands::cmd_train(&cfg)
        }
        Command::Eval { checkpoint, vocab, data, arts, .. } => {
            if let Some(c) = checkpoint {
                cfg.eval.checkpoint = c.clone();
            }
            if let Some(v) = vocab {
                cfg.eval.vocab = v.clone();
            }
            if let Some(d) = data {
                cfg.eval.data = d.clone();
            }
            if *arts {
                cfg.eval.arts = true;
            }
            commands::write_run_metadata(&cfg, "eval")?;
            commands::cmd_eval(&cfg)
        }
        Command::Simulate { rho, .. } => {
            if let Some(r) = rho {
                cfg.simulate.rho = *r;
            }
            commands::write_run_metadata(&cfg, "simulate")?;
            commands::cmd_simulate(&cfg)
        }
        Command::Saliency { checkpoint, vocab, data, ids, mode, target, .. } => {
            if let Some(c) = checkpoint {
                cfg.saliency.checkpoint = c.clone();
            }
            if let Some(v) = vocab {
                cfg.saliency.vocab = v.clone();
            }
            if let Some(d) = data {
                cfg.saliency.data = d.clone();
            }
            if !ids.is_empty() {
                cfg.saliency.ids = ids.clone();
            }
            if let Some(m) = mode {
                cfg.saliency.mode = parse_enum::<RenderMode>("mode", m)?;
            }
            if let Some(t) = target {
                cfg.saliency.target = parse_enum::<SaliencyTarget>("target", t)?;
            }
            commands::write_run_metadata(&cfg, "saliency")?;
            commands::cmd_saliency(&cfg)
        }
        Command::Report { inputs, .. } => {
            if !inputs.is_empty() {
                cfg.report.inputs = inputs.clone();
            }
            commands::write_run_metadata(&cfg, "report")?;
            commands::cmd_report(&cfg)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
