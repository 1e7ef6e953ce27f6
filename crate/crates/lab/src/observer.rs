//! Run observer: pseudo-label diagnostics against the hidden truth, per-task
//! checkpoints and buffer snapshots.

use std::path::PathBuf;

use log::warn;
use sscl_core::eval::{pseudo_diagnostics, PseudoDiagnostics};
use sscl_core::losses::class_means_labeled;
use sscl_core::numkit::Matrix;
use sscl_core::stream::{features_matrix, TaskStream};
use sscl_core::trainer::{EpochContext, TaskEndContext, TrainObserver};

use crate::checkpoint;

pub struct LabObserver<'a> {
    stream: &'a TaskStream,
    diagnostics: bool,
    checkpoint_dir: Option<PathBuf>,
    /// Unaugmented unlabeled inputs of the current task.
    cached: Option<(usize, Matrix)>,
    pub pseudo: Vec<PseudoDiagnostics>,
    /// `(class, rank, sample id)` after the latest rebalance.
    pub buffer: Vec<(usize, usize, u64)>,
    /// First failure; observers cannot abort a run with a lab error.
    pub io_error: Option<crate::LabError>,
}

impl<'a> LabObserver<'a> {
    pub fn new(stream: &'a TaskStream, diagnostics: bool, checkpoint_dir: Option<PathBuf>) -> Self {
        Self { stream, diagnostics, checkpoint_dir, cached: None, pseudo: Vec::new(), buffer: Vec::new(), io_error: None }
    }
}

impl TrainObserver for LabObserver<'_> {
    fn epoch_end(&mut self, ctx: &EpochContext<'_>) -> sscl_core::Result<()> {
        if !self.diagnostics {
            return Ok(());
        }
        let Some(task) = self.stream.tasks.iter().find(|t| t.task_id == ctx.task_id) else {
            return Ok(());
        };
        let Some(truth) = task.unlabeled_truth() else {
            if ctx.epoch == 0 {
                warn!("task {}: no unlabeled truth, skipping pseudo-label diagnostics", ctx.task_id);
            }
            return Ok(());
        };
        if task.unlabeled.is_empty() {
            return Ok(());
        }
        if self.cached.as_ref().map(|c| c.0) != Some(ctx.task_id) {
            self.cached = Some((ctx.task_id, features_matrix(&task.unlabeled, self.stream.input_dim())));
        }
        let x = &self.cached.as_ref().expect("just filled").1;
        // runs without DCP never build a table, so build one here
        let own;
        let table = match ctx.table {
            Some(t) => t,
            None => {
                own = class_means_labeled(&task.labeled, &task.classes, ctx.model)?.table;
                &own
            }
        };
        self.pseudo.push(pseudo_diagnostics(x, truth, ctx.model, table, ctx.config.tau, ctx.task_id, ctx.epoch)?);
        Ok(())
    }

    fn task_end(&mut self, ctx: &TaskEndContext<'_>) -> sscl_core::Result<()> {
        self.buffer = ctx.buffer.entries().collect();
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(format!("task_{}.ckpt", ctx.task_id));
            if let Err(e) = checkpoint::save(&path, ctx.task_id, ctx.model) {
                self.io_error.get_or_insert(e);
            }
        }
        Ok(())
    }
}
