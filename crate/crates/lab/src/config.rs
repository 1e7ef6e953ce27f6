//! Experiment configuration: one TOML file with top-level run settings and
//! `[stream]`, `[train]` and `[grid]` sections.
//!
//! ```toml
//! out = "runs/default"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [stream]
//! class_separation = 4.0
//!
//! [train]
//! epochs = 50
//! pseudo_strategy = "dcp"
//!
//! [grid]
//! cells = ["full", "wo_fsr", "wo_cud", "p-cls"]
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sscl_core::eval::TestStrategy;
use sscl_core::losses::PseudoStrategy;
use sscl_core::stream::StreamConfig;
use sscl_core::trainer::TrainConfig;

use crate::error::{LabError, LabResult};
use crate::fsio;

/// Loss-weight values swept when a sweep gives none.
pub const DEFAULT_SWEEP: [f64; 5] = [0.1, 0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Stream written by `gen-stream`. Every seed then trains on the same
    /// stream; without it each seed generates its own stream from `[stream]`
    /// with the run seed.
    pub stream_dir: Option<PathBuf>,
    /// Per-task model checkpoints under `seed_<s>/checkpoints`.
    pub checkpoints: bool,
    /// Pseudo-label diagnostics against the hidden unlabeled truth.
    pub diagnostics: bool,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2, 3, 4],
            stream_dir: None,
            checkpoints: true,
            diagnostics: true,
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cells: Vec<String>,
    pub sweep: Option<WeightSweep>,
}

/// Sweep of one loss weight with everything else at `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSweep {
    /// One of `uns`, `cl`, `fsr`, `cud`.
    pub weight: String,
    #[serde(default = "default_sweep")]
    pub values: Vec<f64>,
}

fn default_sweep() -> Vec<f64> {
    DEFAULT_SWEEP.to_vec()
}

/// Named switches an ablation cell may use.
pub const CELL_NAMES: [&str; 11] =
    ["full", "baseline", "wo_fsr", "wo_cud", "wo_uns", "p-cls", "p-ncm", "p-r", "t-cls", "t-ncm", "dcp"];

pub const SWEEP_WEIGHTS: [&str; 4] = ["uns", "cl", "fsr", "cud"];

/// One runnable grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub train: TrainConfig,
}

/// Applies a named switch on top of `base`. Every named cell starts from
/// full USP (both extra losses on, DCP for pseudo-labels and test) and
/// changes only what its name says.
pub fn cell_config(name: &str, base: &TrainConfig) -> LabResult<TrainConfig> {
    let full = TrainConfig {
        disable_fsr: false,
        disable_cud: false,
        pseudo_strategy: PseudoStrategy::Dcp,
        test_strategy: TestStrategy::Dcp,
        ..base.clone()
    };
    let cfg = match name {
        "full" | "dcp" => full,
        "baseline" => TrainConfig { disable_fsr: true, disable_cud: true, pseudo_strategy: PseudoStrategy::ClassifierOnly, ..full },
        "wo_fsr" => TrainConfig { disable_fsr: true, ..full },
        "wo_cud" => TrainConfig { disable_cud: true, ..full },
        "wo_uns" | "p-cls" => TrainConfig { pseudo_strategy: PseudoStrategy::ClassifierOnly, ..full },
        "p-ncm" => TrainConfig { pseudo_strategy: PseudoStrategy::NcmOnly, ..full },
        "p-r" => TrainConfig { pseudo_strategy: PseudoStrategy::Reversed, ..full },
        "t-cls" => TrainConfig { test_strategy: TestStrategy::ClassifierOnly, ..full },
        "t-ncm" => TrainConfig { test_strategy: TestStrategy::NcmOnly, ..full },
        other => {
            return Err(LabError::Usage(format!(
                "unknown ablation switch `{other}`; valid names: {}",
                CELL_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

impl GridConfig {
    /// Expands named cells and the weight sweep, in that order.
    pub fn cells(&self, base: &TrainConfig) -> LabResult<Vec<Cell>> {
        let mut out = Vec::new();
        for name in &self.cells {
            out.push(Cell { name: name.clone(), train: cell_config(name, base)? });
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(LabError::Usage("weight sweep has no values".into()));
            }
            for &v in &sweep.values {
                let mut train = cell_config("full", base)?;
                let w = &mut train.weights;
                let slot = match sweep.weight.as_str() {
                    "uns" => &mut w.uns,
                    "cl" => &mut w.cl,
                    "fsr" => &mut w.fsr,
                    "cud" => &mut w.cud,
                    other => {
                        return Err(LabError::Usage(format!(
                            "unknown sweep weight `{other}`; valid names: {}",
                            SWEEP_WEIGHTS.join(", ")
                        )))
                    }
                };
                *slot = v;
                out.push(Cell { name: format!("lambda_{}={v}", sweep.weight), train });
            }
        }
        if out.is_empty() {
            return Err(LabError::Usage("ablation grid is empty: set [grid] cells or [grid.sweep]".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = out.iter().find(|c| !seen.insert(c.name.clone())) {
            return Err(LabError::Usage(format!("ablation cell `{}` listed twice", dup.name)));
        }
        Ok(out)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> LabResult<Self> {
        let src = fsio::read_to_string(path)?;
        Self::parse(&src, &path.display().to_string())
    }

    /// Parses and validates; every error names a line and column of `src`.
    pub fn parse(src: &str, origin: &str) -> LabResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(src, s.start));
            LabError::Config { path: origin.into(), line, column, message: e.message().trim().to_string() }
        })?;
        cfg.validate().map_err(|(section, key, message)| {
            let (line, column) = locate(src, section, key);
            LabError::Config { path: origin.into(), line, column, message }
        })?;
        Ok(cfg)
    }

    /// Semantic checks. Errors carry the section and key to anchor on.
    fn validate(&self) -> Result<(), (Option<&'static str>, String, String)> {
        if self.seeds.is_empty() {
            return Err((None, "seeds".into(), "seeds must list at least one seed".into()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err((None, "seeds".into(), format!("seed {dup} is listed twice")));
        }
        if self.out.as_os_str().is_empty() {
            return Err((None, "out".into(), "out must name a directory".into()));
        }
        self.stream.validate().map_err(|e| (Some("stream"), leading_key(&e), e.to_string()))?;
        self.train.validate().map_err(|e| (Some("train"), leading_key(&e), e.to_string()))?;
        if self.stream.total_classes() < 2 {
            return Err((Some("stream"), "classes_per_task".into(), "the stream needs at least two classes in total".into()));
        }
        if self.train.proj_dim < self.stream.total_classes() {
            return Err((
                Some("train"),
                "proj_dim".into(),
                format!(
                    "proj_dim {} cannot hold an equiangular frame for {} classes",
                    self.train.proj_dim,
                    self.stream.total_classes()
                ),
            ));
        }
        for name in &self.grid.cells {
            if !CELL_NAMES.contains(&name.as_str()) {
                return Err((
                    Some("grid"),
                    "cells".into(),
                    format!("unknown ablation switch `{name}`; valid names: {}", CELL_NAMES.join(", ")),
                ));
            }
        }
        if let Some(s) = &self.grid.sweep {
            if !SWEEP_WEIGHTS.contains(&s.weight.as_str()) {
                return Err((
                    Some("grid.sweep"),
                    "weight".into(),
                    format!("unknown sweep weight `{}`; valid names: {}", s.weight, SWEEP_WEIGHTS.join(", ")),
                ));
            }
            if s.values.is_empty() || s.values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err((Some("grid.sweep"), "values".into(), "sweep values must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    /// Canonical TOML of the resolved config, written next to results.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }
}

/// Core validation messages start with the offending key.
fn leading_key(e: &sscl_core::Error) -> String {
    let msg = match e {
        sscl_core::Error::Config(m) => m.clone(),
        sscl_core::Error::Parameter { name, .. } => (*name).to_string(),
        other => other.to_string(),
    };
    msg.split_whitespace().next().unwrap_or("").to_string()
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Finds `key = ...` inside `[section]` (or before any section when `None`).
/// Falls back to the section header, then to line 1.
fn locate(src: &str, section: Option<&str>, key: String) -> (usize, usize) {
    let mut current: Option<String> = None;
    let mut header = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = Some(name.trim_matches(|c| c == '[' || c == ' ').to_string());
            if current.as_deref() == section {
                header = Some((i + 1, 1));
            }
            continue;
        }
        let in_section = match (section, current.as_deref()) {
            (None, None) => true,
            (Some(s), Some(c)) => c == s || c.starts_with(&format!("{s}.")),
            _ => false,
        };
        if in_section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    let column = raw.len() - raw.trim_start().len() + 1;
                    return (i + 1, column);
                }
            }
        }
    }
    header.unwrap_or((1, 1))
}
