//! On-disk run records.
//!
//! A run directory holds three files, all written atomically enough for a
//! single process and byte-reproducible across reruns:
//!
//! * `metrics.csv` with one [`MetricsSnapshot`] row per step,
//! * `activations.csv` with per-step integer selection counts per expert,
//! * `summary.json` with the final aggregate measurements.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsSnapshot;

/// Final aggregates of one training run.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunSummary {
    pub final_task_loss: f64,
    pub final_total_loss: f64,
    pub final_expert_cv: f64,
    pub final_group_cv: f64,
    pub final_coverage: f64,
    pub final_h2: f64,
    pub final_i2: f64,
    pub final_overlap: f64,
    pub final_accuracy: f64,
    pub steps_completed: usize,
    pub batch_size: usize,
}

/// Complete in-memory result of one run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub snapshots: Vec<MetricsSnapshot>,
    /// Per step, how many tokens in the batch selected each expert.
    pub activation_counts: Vec<Vec<usize>>,
    pub summary: RunSummary,
    /// Final flat parameter vector, kept in memory for exact comparisons
    /// between runs; not part of the on-disk record.
    pub final_params: Vec<f64>,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut text = String::with_capacity(64 * (self.snapshots.len() + 1));
        text.push_str(MetricsSnapshot::CSV_HEADER);
        text.push('\n');
        for snap in &self.snapshots {
            text.push_str(&snap.to_csv_row());
            text.push('\n');
        }
        text
    }

    pub fn activations_csv(&self) -> String {
        let experts = self.config.num_experts;
        let mut text = String::new();
        text.push_str("step");
        for e in 0..experts {
            let _ = write!(text, ",expert_{e}");
        }
        text.push('\n');
        for (step, counts) in self.activation_counts.iter().enumerate() {
            let _ = write!(text, "{step}");
            for &c in counts {
                let _ = write!(text, ",{c}");
            }
            text.push('\n');
        }
        text
    }

    /// Writes the three record files into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, contents: String| {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
        };
        write("metrics.csv", self.metrics_csv())?;
        write("activations.csv", self.activations_csv())?;
        let summary = SummaryFile {
            config: &self.config,
            summary: &self.summary,
        };
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io {
            path: dir.join("summary.json").display().to_string(),
            reason: e.to_string(),
        })?;
        write("summary.json", json + "\n")
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: &'a ExperimentConfig,
    summary: &'a RunSummary,
}
