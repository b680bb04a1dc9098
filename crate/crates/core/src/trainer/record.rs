use std::path::Path;

use crate::error::Result;
use crate::io::{fmt_f64, CsvTable};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub total: f64,
    pub infonce: f64,
    pub divergence: f64,
    /// Temperature used for this step, before the update.
    pub tau: f64,
    pub grad_norm_location: f64,
    pub grad_norm_other: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mean_total: f64,
    pub mean_infonce: f64,
    pub mean_divergence: f64,
}

impl EpochRecord {
    pub(crate) fn summarize(epoch: u64, steps: &[StepRecord]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            mean_total: mean(|s| s.total),
            mean_infonce: mean(|s| s.infonce),
            mean_divergence: mean(|s| s.divergence),
        }
    }
}

/// Append-only training history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn extend(&mut self, other: TrainRecord) {
        self.steps.extend(other.steps);
        self.epochs.extend(other.epochs);
    }

    pub fn steps_table(&self) -> CsvTable {
        let mut t = CsvTable::new([
            "step",
            "epoch",
            "total",
            "infonce",
            "divergence",
            "tau",
            "grad_norm_location",
            "grad_norm_other",
        ]);
        for s in &self.steps {
            t.push([
                s.step.to_string(),
                s.epoch.to_string(),
                fmt_f64(s.total),
                fmt_f64(s.infonce),
                fmt_f64(s.divergence),
                fmt_f64(s.tau),
                fmt_f64(s.grad_norm_location),
                fmt_f64(s.grad_norm_other),
            ]);
        }
        t
    }

    pub fn epochs_table(&self) -> CsvTable {
        let mut t = CsvTable::new(["epoch", "mean_total", "mean_infonce", "mean_divergence"]);
        for e in &self.epochs {
            t.push([
                e.epoch.to_string(),
                fmt_f64(e.mean_total),
                fmt_f64(e.mean_infonce),
                fmt_f64(e.mean_divergence),
            ]);
        }
        t
    }

    pub fn write_csv(&self, steps_path: &Path, epochs_path: &Path) -> Result<()> {
        self.steps_table().write(steps_path)?;
        self.epochs_table().write(epochs_path)
    }
}
