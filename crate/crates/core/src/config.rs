//! Experiment configuration: one JSON document, validated before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::gumbel::{DecayTrigger, TemperatureSchedule};
use crate::losses::{validate_target_rate, LossWeights};
use crate::task::TaskSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SynthSpec),
    Csv { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SynthSpec::default())
    }
}

/// Backbone shape; input width and heads come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub width: usize,
    pub blocks: usize,
    /// Per-block hidden widths; `width` for every block when absent.
    pub hidden: Option<Vec<usize>>,
    /// Number of trailing blocks with instance gates.
    pub gated_tail: usize,
    /// Number of leading blocks excluded from the task policy.
    pub pinned_head: usize,
    pub gate_hidden: Option<usize>,
    pub gate_init_bias: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 8,
            hidden: None,
            gated_tail: 4,
            pinned_head: 0,
            gate_hidden: None,
            gate_init_bias: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn build(&self, input_dim: usize, tasks: Vec<TaskSpec>) -> Result<BackboneSpec> {
        if self.gated_tail > self.blocks || self.pinned_head > self.blocks {
            return Err(Error::Config(format!(
                "backbone: gated_tail {} / pinned_head {} exceed {} blocks",
                self.gated_tail, self.pinned_head, self.blocks
            )));
        }
        let mut spec = BackboneSpec::uniform(input_dim, self.width, self.blocks, tasks, self.gated_tail, self.pinned_head);
        if let Some(h) = &self.hidden {
            if h.len() != self.blocks {
                return Err(Error::Config(format!(
                    "backbone: {} hidden widths for {} blocks",
                    h.len(),
                    self.blocks
                )));
            }
            spec.hidden = h.clone();
        }
        spec.gate_hidden = self.gate_hidden;
        spec.gate_init_bias = self.gate_init_bias;
        spec.validate().map_err(|e| Error::Config(format!("backbone: {e}")))?;
        Ok(spec)
    }
}

/// Which parts of the method run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Task policy and instance gating.
    #[default]
    None,
    /// Task policy only; gated blocks always execute.
    TaskOnly,
    /// All-ones policy with gating retrain only.
    InstanceOnly,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::TaskOnly => "task_only",
            Ablation::InstanceOnly => "instance_only",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Ablation::None),
            "task_only" => Ok(Ablation::TaskOnly),
            "instance_only" => Ok(Ablation::InstanceOnly),
            _ => Err(format!("unknown ablation {s:?} (none, task_only, instance_only)")),
        }
    }
}

fn default_target_rates() -> Vec<f64> {
    vec![0.55]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default = "default_target_rates")]
    pub target_rates: Vec<f64>,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            losses: LossWeights::default(),
            target_rates: default_target_rates(),
            ablation: Ablation::None,
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section; called before any training.
    pub fn validate(&self) -> Result<()> {
        let num_tasks = match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                s.validate()?;
                s.tasks().len()
            }
            DatasetConfig::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::Config("dataset.csv.path is empty".into()));
                }
                self.losses.task.len()
            }
        };
        self.train.validate()?;
        if num_tasks > 0 {
            self.losses.validate(num_tasks)?;
        }
        if self.target_rates.is_empty() {
            return Err(Error::Config("target_rates is empty".into()));
        }
        for &t in &self.target_rates {
            validate_target_rate(t)?;
        }
        if self.backbone.blocks == 0 || self.backbone.width == 0 {
            return Err(Error::Config("backbone needs at least one block of positive width".into()));
        }
        let tasks: Vec<TaskSpec> = match &self.dataset {
            DatasetConfig::Synthetic(s) => s.tasks(),
            DatasetConfig::Csv { .. } => Vec::new(),
        };
        if !tasks.is_empty() {
            let dim = match &self.dataset {
                DatasetConfig::Synthetic(s) => s.dim,
                DatasetConfig::Csv { .. } => 1,
            };
            self.backbone.build(dim, tasks)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Documented presets mirroring published hyperparameters at desk scale.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "default" => {}
            // 20000 epochs, half warm-up, lr 0.001 halved at the midpoint,
            // batch 16, τ 5 decaying by 0.965 when the baseline is met.
            "nyu-like" => {
                let t = &mut cfg.train;
                t.max_epochs = 40;
                t.warm_up_epochs = 20;
                t.lr_network = 0.001;
                t.lr_policy = 0.001;
                t.lr_gate = 0.001;
                t.lr_period = 20;
                t.batch_size = 16;
                t.retrain_epochs = 4;
                t.temperature = TemperatureSchedule::new(5.0, 0.965, DecayTrigger::OnMetricMet, 0.5);
                t.num_sampled_plans = 8;
                t.retrain_tau = 1.0;
            }
            // 8 blocks, 1000 epochs with lr 0.001 halved every 250, batch 256.
            "mimic-like" => {
                cfg.backbone.blocks = 8;
                cfg.dataset = DatasetConfig::Synthetic(SynthSpec {
                    regression: true,
                    ..SynthSpec::default()
                });
                let t = &mut cfg.train;
                t.max_epochs = 40;
                t.warm_up_epochs = 10;
                t.lr_network = 0.001;
                t.lr_policy = 0.001;
                t.lr_gate = 0.001;
                t.lr_period = 10;
                t.batch_size = 256;
                t.temperature = TemperatureSchedule::new(5.0, 0.965, DecayTrigger::OnMetricMet, 0.5);
            }
            _ => return Err(Error::Config(format!("unknown preset {name:?} (default, nyu-like, mimic-like)"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
