use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablation::AblationTable;
use super::eval::Evaluation;
use super::train::{EpochLosses, RoundStats, RunResult, TrainingOutcome};
use super::{ExperimentConfig, ModuleFlags};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;
use crate::objectives::PseudoLabel;

pub const SCHEMA: &str = "pcuda-metrics v1";

/// Everything recorded about one training run.
///
/// `wall_clock_seconds` is kept out of the serialized summary so that
/// summaries are byte-reproducible; it is written to `timing.txt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub seed: u64,
    pub config_hash: String,
    pub modules: ModuleFlags,
    pub epochs: Vec<EpochLosses>,
    pub rounds: Vec<RoundStats>,
    pub target_test: Evaluation,
    pub source_test: Option<Evaluation>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub(crate) fn new(
        config: &ExperimentConfig,
        seed: u64,
        outcome: &TrainingOutcome,
        target_test: Evaluation,
        source_test: Option<Evaluation>,
        wall_clock_seconds: f64,
    ) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            seed,
            config_hash: config.hash(),
            modules: config.modules.clone(),
            epochs: outcome.epochs.clone(),
            rounds: outcome.rounds.clone(),
            target_test,
            source_test,
            wall_clock_seconds,
        }
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,lr,relational,translation,source,target,total,self_training\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                e.epoch, e.lr, e.relational, e.translation, e.source, e.target, e.total, e.self_training
            );
        }
        out
    }
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(eval: &Evaluation) -> String {
    let c = eval.confusion.len();
    let mut out = String::from("true\\pred");
    for k in 0..c {
        let _ = write!(out, ",{k}");
    }
    out.push('\n');
    for (k, row) in eval.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{k},{}", cells.join(","));
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_pseudo_labels(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let mut out = String::from("sample,class,confidence,selected\n");
    for (i, l) in labels.iter().enumerate() {
        let class = l.class.map_or(String::new(), |c| c.to_string());
        let _ = writeln!(out, "{i},{class},{:e},{}", l.confidence, l.is_selected());
    }
    write(path, &out)
}

/// Writes `checkpoint.txt`, `summary.json`, `metrics.csv`, `confusion.csv`,
/// `pseudo_labels_round<r>.csv` and `timing.txt` into `dir`.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&run.outcome.params, &dir.join("checkpoint.txt"))?;
    write(&dir.join("summary.json"), &run.report.summary_json())?;
    write(&dir.join("metrics.csv"), &run.report.metrics_csv())?;
    write(&dir.join("confusion.csv"), &confusion_csv(&run.report.target_test))?;
    for (r, labels) in run.outcome.pseudo_labels.iter().enumerate() {
        write_pseudo_labels(&dir.join(format!("pseudo_labels_round{r}.csv")), labels)?;
    }
    write(
        &dir.join("timing.txt"),
        &format!("wall_clock_seconds {:.3}\n", run.report.wall_clock_seconds),
    )
}

/// Writes `ablation.csv` (one row per run) and `ablation_summary.csv`.
pub fn write_ablation(dir: &Path, table: &AblationTable) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = String::from("variant,seed,accuracy,config_hash\n");
    for r in &table.rows {
        let _ = writeln!(rows, "{},{},{},{}", r.variant, r.seed, r.accuracy, r.config_hash);
    }
    write(&dir.join("ablation.csv"), &rows)?;
    let mut summary = String::from("variant,runs,mean,sem\n");
    for s in &table.summary {
        let _ = writeln!(summary, "{},{},{},{}", s.variant, s.runs, s.mean, s.sem);
    }
    write(&dir.join("ablation_summary.csv"), &summary)
}
