//! Experiment orchestration: configuration, two-phase training, evaluation,
//! feature projection, ablation grids and report files.

mod ablation;
mod eval;
mod report;
mod train;

pub use ablation::{run_ablation_suite, summarize, AblationRow, AblationTable, Grid, Variant, VariantSummary};
pub use eval::{evaluate, export_projection, pca_2d, write_projection_csv, Evaluation, Projection};
pub use report::{confusion_csv, write_ablation, write_pseudo_labels, write_run, MetricsReport, SCHEMA};
pub use train::{run_experiment, run_training, EpochLosses, RoundStats, RunResult, TrainingData, TrainingOutcome};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentPolicy, TranslationSpec};
use crate::dataio::DataConfig;
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::objectives::LossWeights;
use crate::relational::TemperatureSet;
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Total epochs over both phases.
    pub epochs: usize,
    /// Epochs before self-training starts.
    pub pretrain_epochs: usize,
    /// Pseudo-label rounds spread evenly over the remaining epochs.
    pub rounds: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub bank_capacity: usize,
    pub seeds: Vec<u64>,
    /// Momentum of an optional moving-average encoder for target-side
    /// embeddings; `None` uses the online encoder.
    pub ema_momentum: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            pretrain_epochs: 120,
            rounds: 3,
            batch_size: 32,
            lr_max: 1e-3,
            lr_min: 0.0,
            adam: AdamConfig::default(),
            bank_capacity: 4096,
            seeds: vec![0, 1, 2],
            ema_momentum: None,
        }
    }
}

/// Which parts of the method are active.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleFlags {
    pub translation: bool,
    /// Relational learning, including the augmented terms of the source loss.
    pub relational: bool,
    pub self_training: bool,
    /// Weak/strong policy id such as `"JCw/JCsS"`; overrides the operation
    /// lists of `augment` when set.
    pub policy: Option<String>,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self {
            translation: true,
            relational: true,
            self_training: true,
            policy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory containing `manifest.txt`.
    pub dataset: PathBuf,
    /// Directory receiving checkpoints and reports.
    pub output: PathBuf,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub augment: AugmentPolicy,
    pub translation: TranslationSpec,
    pub temperatures: TemperatureSet,
    pub weights: LossWeights,
    pub training: TrainingConfig,
    pub modules: ModuleFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: EncoderConfig::default(),
            augment: AugmentPolicy::default(),
            translation: TranslationSpec::default(),
            temperatures: TemperatureSet::default(),
            weights: LossWeights::default(),
            training: TrainingConfig::default(),
            modules: ModuleFlags::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.dataset, &mut config.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset.join("manifest.txt")
    }

    /// The augmentation policy after applying `modules.policy`.
    pub fn effective_policy(&self) -> Result<AugmentPolicy> {
        let mut policy = self.augment.clone();
        if let Some(id) = &self.modules.policy {
            let named = AugmentPolicy::from_id(id)?;
            policy.weak = named.weak;
            policy.strong = named.strong;
        }
        policy.validate()?;
        Ok(policy)
    }

    /// First epoch of every self-training round.
    pub fn round_starts(&self) -> Vec<usize> {
        let t = &self.training;
        if !self.modules.self_training {
            return Vec::new();
        }
        let span = t.epochs - t.pretrain_epochs;
        (0..t.rounds).map(|r| t.pretrain_epochs + r * span / t.rounds).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.effective_policy()?;
        self.translation.validate()?;
        self.temperatures.validate()?;
        self.weights.validate()?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || t.bank_capacity == 0 {
            return Err(Error::invalid("epochs, batch size and bank capacity must be positive"));
        }
        if !(t.lr_max > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr_max) {
            return Err(Error::invalid(format!("learning rates {} → {}", t.lr_max, t.lr_min)));
        }
        if t.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if let Some(m) = t.ema_momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::invalid(format!("EMA momentum {m} outside [0, 1)")));
            }
        }
        if self.modules.self_training {
            if t.rounds == 0 || t.pretrain_epochs + t.rounds > t.epochs {
                return Err(Error::invalid(format!(
                    "self-training needs 1 ≤ rounds ≤ epochs − pretrain_epochs (got {} rounds, {} of {} epochs)",
                    t.rounds, t.pretrain_epochs, t.epochs
                )));
            }
        }
        if self.model.num_classes != self.data.classes.len() {
            return Err(Error::invalid(format!(
                "model has {} classes, data config has {}",
                self.model.num_classes,
                self.data.classes.len()
            )));
        }
        if self.augment.model_points != self.data.points {
            return Err(Error::invalid(format!(
                "augmented clouds have {} points, dataset clouds {}",
                self.augment.model_points, self.data.points
            )));
        }
        Ok(())
    }

    /// Short digest of everything that affects results; paths are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        c.output = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
