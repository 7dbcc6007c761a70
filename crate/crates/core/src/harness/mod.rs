//! Experiment plumbing behind the `cbloss` binary: config documents, grid
//! sweeps and report tables. Every output is a CSV or JSON file.

pub mod config;
pub mod report;
pub mod sweep;

pub use config::{
    BetaSetting, DataFile, DataKeys, DataSource, GridKeys, LossKeys, PreparedData, SweepFile,
    TrainFile, TrainKeys,
};
pub use report::{baseline_deltas, read_results_csv, write_report, DeltaRow};
pub use sweep::{
    run_sweep, write_results_csv, write_sweep_outputs, GridPoint, ReportRow, RowStatus, SweepGrid,
    SweepOptions,
};

use std::path::Path;

use crate::error::Result;
use crate::trainer::{RunRecord, TrainConfig};

impl SweepFile {
    pub fn grid(&self) -> SweepGrid {
        let d = SweepGrid::default();
        let g = &self.grid;
        SweepGrid {
            families: g.families.clone().unwrap_or(d.families),
            betas: g.betas.clone().unwrap_or(d.betas),
            gammas: g.gammas.clone().unwrap_or(d.gammas),
            imbalances: g.imbalances.clone().unwrap_or(d.imbalances),
            seeds: g.seeds.clone().unwrap_or(d.seeds),
        }
    }

    pub fn options(&self) -> SweepOptions {
        let d = SweepOptions::default();
        SweepOptions {
            val_fraction: self.grid.val_fraction.unwrap_or(d.val_fraction),
            tail_k: self.grid.tail_k,
            jobs: None,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.train.apply(TrainConfig::default())
    }
}

/// Writes `metrics.csv`: one row per epoch with the tail error over the `k`
/// smallest training classes.
pub fn write_metrics_csv(record: &RunRecord, tail_k: usize, path: &Path) -> Result<()> {
    let tail = record.train_counts.smallest_classes(tail_k);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "lr",
        "train_loss",
        "test_error",
        "tail_error",
        "per_class_errors",
    ])?;
    for m in &record.epochs {
        let tail_error =
            tail.iter().map(|&c| m.per_class_error[c]).sum::<f64>() / tail.len().max(1) as f64;
        w.write_record([
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.test_error.to_string(),
            tail_error.to_string(),
            sweep::join_errors(&m.per_class_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}
