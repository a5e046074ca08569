use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::train::{run_experiment, EpochLosses, RunResult, TrainingData};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geometry::Axis;

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Source supervision on original clouds only.
    Baseline,
    /// Baseline plus the translation pretext task.
    TranslationOnly,
    /// Baseline plus relational learning and its augmented source terms.
    RelationalOnly,
    /// Both pretext modules and self-training.
    Full,
    /// Full method with translation along the given axes.
    Axes(Vec<Axis>),
    /// Full method with a weak/strong policy id.
    Policy(String),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Baseline => "baseline".into(),
            Variant::TranslationOnly => "translation".into(),
            Variant::RelationalOnly => "relational".into(),
            Variant::Full => "full".into(),
            Variant::Axes(axes) => format!("axes-{}", axes.iter().map(Axis::to_string).collect::<String>()),
            Variant::Policy(id) => format!("policy-{id}"),
        }
    }

    /// `base` with this variant's module flags and overrides applied.
    pub fn configure(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let m = &mut c.modules;
        let (t, r, s) = match self {
            Variant::Baseline => (false, false, false),
            Variant::TranslationOnly => (true, false, false),
            Variant::RelationalOnly => (false, true, false),
            Variant::Full | Variant::Axes(_) | Variant::Policy(_) => (true, true, true),
        };
        m.translation = t;
        m.relational = r;
        m.self_training = s;
        match self {
            Variant::Axes(axes) => c.translation.axes = axes.clone(),
            Variant::Policy(id) => c.modules.policy = Some(id.clone()),
            _ => {}
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Predefined sets of variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Baseline, each module alone, and the full method.
    Modules,
    /// Translation axis subsets XY, XZ, YZ, XYZ.
    Axes,
    /// Weak/strong policy combinations.
    Augmentation,
}

impl Grid {
    pub fn variants(self) -> Vec<Variant> {
        use Axis::{X, Y, Z};
        match self {
            Grid::Modules => vec![
                Variant::Baseline,
                Variant::TranslationOnly,
                Variant::RelationalOnly,
                Variant::Full,
            ],
            Grid::Axes => [vec![X, Y], vec![X, Z], vec![Y, Z], vec![X, Y, Z]]
                .into_iter()
                .map(Variant::Axes)
                .collect(),
            Grid::Augmentation => ["J/JS", "JCw/JCs", "JCw/JCsS"]
                .into_iter()
                .map(|id| Variant::Policy(id.into()))
                .collect(),
        }
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(Grid::Modules),
            "axes" => Ok(Grid::Axes),
            "augmentation" => Ok(Grid::Augmentation),
            _ => Err(Error::invalid(format!(
                "unknown grid {s:?}; expected modules, axes or augmentation"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean: f64,
    /// Standard error of the mean; zero for a single run.
    pub sem: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

impl AblationTable {
    pub fn mean(&self, variant: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.mean)
    }
}

/// Per-variant mean and SEM, in order of first appearance.
pub fn summarize(rows: &[AblationRow]) -> Vec<VariantSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.variant == name).map(|r| r.accuracy).collect();
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let sem = if acc.len() > 1 {
                let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            VariantSummary {
                variant: name.to_string(),
                runs: acc.len(),
                mean,
                sem,
            }
        })
        .collect()
}

/// Runs every variant with every seed of `base.training.seeds`.
///
/// `on_run` receives each finished run, e.g. to write its reports.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    data: &TrainingData,
    variants: &[Variant],
    on_epoch: &mut dyn FnMut(&Variant, u64, &EpochLosses),
    on_run: &mut dyn FnMut(&Variant, u64, &RunResult) -> Result<()>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for variant in variants {
        let config = variant.configure(base)?;
        for &seed in &base.training.seeds {
            let run = run_experiment(&config, data, seed, &mut |e| on_epoch(variant, seed, e))?;
            on_run(variant, seed, &run)?;
            rows.push(AblationRow {
                variant: variant.name(),
                seed,
                accuracy: run.report.target_test.accuracy,
                config_hash: config.hash(),
            });
        }
    }
    let summary = summarize(&rows);
    Ok(AblationTable { rows, summary })
}
