//! `gen-stream`, `run` and `ablate`.
//!
//! Output layout of `run`:
//!
//! ```text
//! <out>/config.toml         resolved experiment config
//! <out>/summary.csv
//! <out>/seed_<s>/losses.csv, accuracy.csv, metrics.csv, diagnostics.csv,
//!                pseudo_accuracy.csv, buffer.csv, etf.csv, report.json,
//!                checkpoints/task_<t>.ckpt
//! ```
//!
//! `ablate` writes the same per-seed tree under `<out>/cells/<cell>/` plus
//! `<out>/comparison.csv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use sscl_core::stream::{generate_stream, StreamConfig, TaskStream};
use sscl_core::trainer::{run_stream, Learner, RunReport, TrainConfig};

use crate::config::{Cell, ExperimentConfig};
use crate::error::{LabError, LabResult};
use crate::observer::LabObserver;
use crate::report::{self, SeedResult};
use crate::{fsio, stream_io};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub force: bool,
    /// Cap on parallel runs; `None` lets rayon decide.
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> LabResult<()> {
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            let mut seen = std::collections::BTreeSet::new();
            if seeds.is_empty() || !seeds.iter().all(|s| seen.insert(*s)) {
                return Err(LabError::Usage("--seeds must list distinct seeds".into()));
            }
            cfg.seeds = seeds.clone();
        }
        Ok(())
    }
}

/// Writes the `[stream]` stream (with its own seed) to `<out>`.
pub fn cmd_gen_stream(cfg: &ExperimentConfig, force: bool) -> LabResult<TaskStream> {
    let stream = generate_stream(&cfg.stream)?;
    stream_io::write_stream(&cfg.out, &stream, force)?;
    info!("wrote {} tasks to {}", stream.tasks.len(), cfg.out.display());
    Ok(stream)
}

/// Streams per seed: the shared stream directory, or one generated stream
/// per seed. Ablation cells reuse these, so cells differ only in the switch.
fn streams(cfg: &ExperimentConfig) -> LabResult<BTreeMap<u64, TaskStream>> {
    match &cfg.stream_dir {
        Some(dir) => {
            let stream = stream_io::read_stream(dir)?;
            Ok(cfg.seeds.iter().map(|&s| (s, stream.clone())).collect())
        }
        None => cfg
            .seeds
            .iter()
            .map(|&s| Ok((s, generate_stream(&StreamConfig { seed: s, ..cfg.stream.clone() })?)))
            .collect(),
    }
}

fn pool(threads: Option<usize>) -> LabResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| LabError::Usage(format!("thread pool: {e}")))
}

/// Trains one seed and writes its directory.
pub fn run_seed(
    stream: &TaskStream,
    train: &TrainConfig,
    seed: u64,
    dir: &Path,
    cfg: &ExperimentConfig,
) -> LabResult<RunReport> {
    let train = TrainConfig { seed, ..train.clone() };
    fsio::create_dir(dir)?;
    let ckpt = cfg.checkpoints.then(|| dir.join("checkpoints"));
    let mut obs = LabObserver::new(stream, cfg.diagnostics, ckpt);
    let run = run_stream(stream, &train, &mut obs)?;
    if let Some(e) = obs.io_error.take() {
        return Err(e);
    }
    report::write_losses(&dir.join("losses.csv"), &run.losses)?;
    report::write_accuracy(&dir.join("accuracy.csv"), &run.accuracy)?;
    report::write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
    if cfg.diagnostics {
        report::write_diagnostics(&dir.join("diagnostics.csv"), &obs.pseudo)?;
        report::write_pseudo_accuracy(&dir.join("pseudo_accuracy.csv"), &obs.pseudo)?;
    }
    report::write_buffer(&dir.join("buffer.csv"), &obs.buffer)?;
    let frame = Learner::new(&train, stream.input_dim(), stream.total_classes())?.frame;
    report::write_etf(&dir.join("etf.csv"), frame.columns())?;
    let json = serde_json::to_string_pretty(&run).map_err(|e| LabError::format(dir.join("report.json"), e.to_string()))?;
    fsio::write_atomic(&dir.join("report.json"), json.as_bytes())?;
    info!("seed {seed}: A_avg {:.4}, A_last {:.4} -> {}", run.metrics.a_avg, run.metrics.a_last, dir.display());
    Ok(run)
}

fn result_of(seed: u64, r: &RunReport) -> SeedResult {
    SeedResult { seed, a_avg: r.metrics.a_avg, a_last: r.metrics.a_last }
}

fn write_config(cfg: &ExperimentConfig) -> LabResult<()> {
    fsio::write_atomic(&cfg.out.join("config.toml"), cfg.to_toml().as_bytes())
}

/// Runs `[train]` for every seed and writes the summary.
pub fn cmd_run(cfg: &ExperimentConfig, threads: Option<usize>) -> LabResult<Vec<SeedResult>> {
    fsio::create_dir(&cfg.out)?;
    write_config(cfg)?;
    let streams = streams(cfg)?;
    let runs: Vec<LabResult<RunReport>> = pool(threads)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| run_seed(&streams[&s], &cfg.train, s, &cfg.out.join(format!("seed_{s}")), cfg))
            .collect()
    });
    let mut results = Vec::with_capacity(runs.len());
    for (&s, r) in cfg.seeds.iter().zip(runs) {
        results.push(result_of(s, &r?));
    }
    report::write_summary(&cfg.out.join("summary.csv"), &results)?;
    Ok(results)
}

/// One run per grid cell per seed; cells share streams and seeds.
pub fn cmd_ablate(cfg: &ExperimentConfig, threads: Option<usize>) -> LabResult<Vec<(String, Vec<SeedResult>)>> {
    let cells: Vec<Cell> = cfg.grid.cells(&cfg.train)?;
    fsio::create_dir(&cfg.out)?;
    write_config(cfg)?;
    let streams = streams(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s))).collect();
    let runs: Vec<LabResult<RunReport>> = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| {
                let dir = cfg.out.join("cells").join(&cells[c].name).join(format!("seed_{s}"));
                run_seed(&streams[&s], &cells[c].train, s, &dir, cfg)
            })
            .collect()
    });
    let mut table: Vec<(String, Vec<SeedResult>)> = cells.iter().map(|c| (c.name.clone(), Vec::new())).collect();
    for (&(c, s), r) in jobs.iter().zip(runs) {
        table[c].1.push(result_of(s, &r?));
    }
    for (name, results) in &table {
        report::write_summary(&cfg.out.join("cells").join(name).join("summary.csv"), results)?;
    }
    report::write_comparison(&cfg.out.join("comparison.csv"), &table)?;
    Ok(table)
}
