//! Class-incremental run harness: classes enter the training stream at
//! configured epochs, components present at the end of the initial
//! (healthy-only) phase are designated healthy, and per-epoch clustering
//! scores are traced.

use serde::{Deserialize, Serialize};

use super::{EngineCheckpoint, EngineConfig, StatsMode};
use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::Matrix;

/// One schedule entry: from `epoch` on, `classes` are part of the stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub epoch: usize,
    pub classes: Vec<usize>,
}

/// Per-epoch trace row of a scheduled run.
#[derive(Debug, Clone, Serialize)]
pub struct ScheduleEpochRow {
    pub epoch: usize,
    /// Number of samples in the active stream this epoch.
    pub n_active: usize,
    pub k_active: usize,
    pub objective: f64,
    pub elbo: f64,
    pub acc: f64,
    pub ari: f64,
    pub nmi: f64,
    pub dda: f64,
}

/// Outcome of [`run_schedule`].
pub struct ScheduleRun {
    pub ckpt: EngineCheckpoint,
    pub trace: Vec<ScheduleEpochRow>,
}

fn gather_rows(features: &Matrix, idx: &[usize]) -> Matrix {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&r| features.row(r).to_vec()).collect();
    Matrix::from_rows(&rows)
}

/// Train with classes introduced over time.
///
/// In `Batch` stats mode the active dataset grows at each introduction and
/// is re-presented every epoch; in `Streaming` mode the previous phase is
/// retired into the mixture's retained statistics and only the newly
/// introduced classes flow through the network afterwards. Components active
/// at the first introduction (end of the initial phase) are marked healthy.
pub fn run_schedule(
    config: &EngineConfig,
    features: &Matrix,
    labels: &[usize],
    schedule: &[ScheduleStep],
    total_epochs: usize,
) -> Result<ScheduleRun> {
    if features.rows() != labels.len() {
        return Err(Error::ShapeMismatch("labels do not match feature rows".into()));
    }
    if schedule.is_empty() || schedule[0].epoch != 0 {
        return Err(Error::Domain("schedule must start at epoch 0".into()));
    }
    if schedule.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
        return Err(Error::Domain("schedule epochs must be strictly increasing".into()));
    }
    if schedule.last().map_or(false, |s| s.epoch >= total_epochs) {
        return Err(Error::Domain("schedule extends past the epoch budget".into()));
    }

    let rows_of = |classes: &[usize]| -> Vec<usize> {
        (0..labels.len()).filter(|&r| classes.contains(&labels[r])).collect()
    };

    let mut active_classes: Vec<usize> = schedule[0].classes.clone();
    let mut active_rows = rows_of(&active_classes);
    if active_rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut active_data = gather_rows(features, &active_rows);

    let mut ckpt = EngineCheckpoint::new(config.clone(), &active_data)?;
    let mut trace = Vec::with_capacity(total_epochs);
    let mut step_idx = 1usize;
    let mut healthy_marked = false;

    for epoch in 0..total_epochs {
        while step_idx < schedule.len() && schedule[step_idx].epoch == epoch {
            if !healthy_marked {
                ckpt.mark_all_healthy();
                healthy_marked = true;
            }
            let step = &schedule[step_idx];
            match config.stats_mode {
                StatsMode::Batch => {
                    for &c in &step.classes {
                        if !active_classes.contains(&c) {
                            active_classes.push(c);
                        }
                    }
                    active_rows = rows_of(&active_classes);
                }
                StatsMode::Streaming => {
                    ckpt.fold_memory();
                    let fresh: Vec<usize> = step
                        .classes
                        .iter()
                        .copied()
                        .filter(|c| !active_classes.contains(c))
                        .collect();
                    for &c in &fresh {
                        active_classes.push(c);
                    }
                    active_rows = rows_of(&fresh);
                }
            }
            if active_rows.is_empty() {
                return Err(Error::EmptyDataset);
            }
            active_data = gather_rows(features, &active_rows);
            step_idx += 1;
        }

        let stats = ckpt.train_epoch(&active_data)?;
        let active_labels: Vec<usize> = active_rows.iter().map(|&r| labels[r]).collect();
        trace.push(ScheduleEpochRow {
            epoch,
            n_active: active_rows.len(),
            k_active: stats.k_active,
            objective: stats.objective,
            elbo: stats.elbo,
            acc: metrics::acc(&stats.assignments, &active_labels),
            ari: metrics::ari(&stats.assignments, &active_labels),
            nmi: metrics::nmi(&stats.assignments, &active_labels),
            dda: metrics::dda(&stats.flags, &active_labels),
        });
    }

    Ok(ScheduleRun { ckpt, trace })
}
