//! Run configuration: a TOML file with one section per subcommand, every
//! field defaulted, command-line flags winning over the file. The merged
//! ("effective") config is written into the output directory so a run can
//! be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crr_core::augment::PositionPolicy;
use crr_core::objective::DivergenceKind;
use crr_core::saliency::{RenderMode, SaliencyTarget};
use crr_core::trainer::{DevMetric, Regime};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub simulate: SimulateSection,
    pub saliency: SaliencySection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub data: PathBuf,
    /// Empty path means the bundled lexicon.
    pub lexicon: PathBuf,
    /// Co-occurrence window (tokens) for opinion-phrase extraction.
    pub window: usize,
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub front_probability: f64,
    pub position_policy: PositionPolicy,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            data: PathBuf::new(),
            lexicon: PathBuf::new(),
            window: 5,
            min_phrases: 1,
            max_phrases: 3,
            front_probability: 0.5,
            position_policy: PositionPolicy::Mixed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub data: PathBuf,
    /// Augmented pairs (JSONL); ignored by the baseline regime.
    pub pairs: PathBuf,
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub divergence: DivergenceKind,
    pub freeze_original_in_div: bool,
    pub dev_fraction: f64,
    pub dev_metric: DevMetric,
    pub dropout: f64,
    pub warmup_fraction: f64,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// When true, sweep alpha_grid x lr_grid and keep the best dev cell.
    pub grid: bool,
    pub alpha_grid: Vec<f64>,
    pub lr_grid: Vec<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = crr_core::trainer::TrainConfig::<f64>::default();
        TrainSection {
            data: PathBuf::new(),
            pairs: PathBuf::new(),
            regime: base.regime,
            epochs: base.epochs,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            weight_decay: base.weight_decay,
            alpha: base.alpha,
            divergence: base.divergence,
            freeze_original_in_div: base.freeze_original_in_div,
            dev_fraction: 0.2,
            dev_metric: base.dev_metric,
            dropout: base.dropout,
            warmup_fraction: base.warmup_fraction,
            embedding_dim: 64,
            hidden_dim: 64,
            grid: false,
            alpha_grid: base.alpha_grid,
            lr_grid: base.lr_grid,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub data: PathBuf,
    /// Treat `data` as an ARTs-style file carrying variant records.
    pub arts: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub rho: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub regimes: Vec<Regime>,
    pub alpha: f64,
    pub divergence: DivergenceKind,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let proto = crr_core::causal_sim::Protocol::default();
        SimulateSection {
            rho: crr_core::causal_sim::CausalSpec::default().rho,
            train_size: 240,
            dev_size: 100,
            test_size: 300,
            regimes: vec![Regime::Baseline, Regime::Adversarial, Regime::Crr],
            alpha: 3.0,
            divergence: DivergenceKind::KlForward,
            pretrain_epochs: proto.pretrain_epochs,
            finetune_epochs: proto.finetune_epochs,
            embedding_dim: proto.embedding_dim,
            hidden_dim: proto.hidden_dim,
            batch_size: proto.batch_size,
            dropout: proto.dropout,
            learning_rate: proto.learning_rate,
        }
    }
}

impl SimulateSection {
    pub fn protocol(&self) -> crr_core::causal_sim::Protocol {
        crr_core::causal_sim::Protocol {
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            batch_size: self.batch_size,
            pretrain_epochs: self.pretrain_epochs,
            finetune_epochs: self.finetune_epochs,
            dropout: self.dropout,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub data: PathBuf,
    /// Instance ids to render; empty means every instance in `data`.
    pub ids: Vec<String>,
    pub target: SaliencyTarget,
    pub mode: RenderMode,
}

impl Default for SaliencySection {
    fn default() -> Self {
        SaliencySection {
            checkpoint: PathBuf::new(),
            vocab: PathBuf::new(),
            data: PathBuf::new(),
            ids: Vec::new(),
            target: SaliencyTarget::Gold,
            mode: RenderMode::Html,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// metrics.json files produced by `crr eval`, one per run to compare.
    pub inputs: Vec<PathBuf>,
    /// Row labels; defaults to the parent directory name of each input.
    pub labels: Vec<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let content = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&content)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// Serialize the merged config for the output directory.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("config render: {e}")))
    }
}

pub fn require_path(p: &Path, what: &str) -> Result<(), CliError> {
    if p.as_os_str().is_empty() {
        return Err(CliError::Config(format!("{what} is required (config file or flag)")));
    }
    if !p.exists() {
        return Err(CliError::Data(format!("{what} not found: {}", p.display())));
    }
    Ok(())
}
