//! Stream directories.
//!
//! ```text
//! manifest.toml              format version, sample counts and the generating StreamConfig
//! task_<t>/labeled.csv       id,label,f0..f{d-1}
//! task_<t>/unlabeled.csv     id,label,f0..   (label is always -1)
//! task_<t>/test.csv          id,label,f0..
//! task_<t>/unlabeled_truth.csv  id,label     hidden truth, read only by diagnostics
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so loading gives
//! back bit-identical features.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sscl_core::stream::{Sample, StreamConfig, TaskSpec, TaskStream};

use crate::error::{LabError, LabResult};
use crate::fsio;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub num_tasks: usize,
    /// `[labeled, unlabeled, test]` per task.
    pub counts: Vec<[usize; 3]>,
    pub stream: StreamConfig,
}

fn task_dir(root: &Path, task_id: usize) -> PathBuf {
    root.join(format!("task_{task_id}"))
}

pub fn sample_header(dim: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "label".to_string()];
    h.extend((0..dim).map(|i| format!("f{i}")));
    h
}

fn sample_rows(samples: &[Sample]) -> impl Iterator<Item = Vec<String>> + '_ {
    samples.iter().map(|s| {
        let mut row = Vec::with_capacity(s.features.len() + 2);
        row.push(s.id.to_string());
        row.push(s.label.map_or("-1".to_string(), |l| l.to_string()));
        row.extend(s.features.iter().map(|v| v.to_string()));
        row
    })
}

/// Writes `stream` under `root`. A non-empty `root` is refused unless
/// `force`, in which case the manifest and task directories are replaced
/// and anything else is left alone.
pub fn write_stream(root: &Path, stream: &TaskStream, force: bool) -> LabResult<()> {
    if let Ok(mut entries) = fs::read_dir(root) {
        if entries.next().is_some() {
            if !force {
                return Err(LabError::Usage(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    root.display()
                )));
            }
            for entry in fs::read_dir(root).map_err(|e| LabError::io(root, e))? {
                let entry = entry.map_err(|e| LabError::io(root, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.starts_with("task_") && entry.path().is_dir() {
                    fs::remove_dir_all(entry.path()).map_err(|e| LabError::io(entry.path(), e))?;
                }
            }
        }
    }
    fsio::create_dir(root)?;
    let dim = stream.input_dim();
    let header = sample_header(dim);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for task in &stream.tasks {
        let dir = task_dir(root, task.task_id);
        fsio::write_csv(&dir.join("labeled.csv"), &header, sample_rows(&task.labeled))?;
        fsio::write_csv(&dir.join("unlabeled.csv"), &header, sample_rows(&task.unlabeled))?;
        fsio::write_csv(&dir.join("test.csv"), &header, sample_rows(&task.test))?;
        if let Some(truth) = task.unlabeled_truth() {
            let rows = task.unlabeled.iter().zip(truth).map(|(s, l)| [s.id.to_string(), l.to_string()]);
            fsio::write_csv(&dir.join("unlabeled_truth.csv"), &["id", "label"], rows)?;
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_tasks: stream.tasks.len(),
        counts: stream.tasks.iter().map(|t| [t.labeled.len(), t.unlabeled.len(), t.test.len()]).collect(),
        stream: stream.config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| LabError::format(root.join(MANIFEST), e.to_string()))?;
    fsio::write_atomic(&root.join(MANIFEST), text.as_bytes())
}

pub fn read_manifest(root: &Path) -> LabResult<Manifest> {
    let path = root.join(MANIFEST);
    let text = fsio::read_to_string(&path)?;
    let m: Manifest = toml::from_str(&text).map_err(|e| LabError::format(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(LabError::format(&path, format!("unsupported format_version {}", m.format_version)));
    }
    if m.counts.len() != m.num_tasks {
        return Err(LabError::format(&path, "counts must have one entry per task"));
    }
    Ok(m)
}

fn read_samples(path: &Path, dim: usize, labeled: bool) -> LabResult<Vec<Sample>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| LabError::format(path, e.to_string()))?;
    let expected = sample_header(dim);
    let header = reader.headers().map_err(|e| LabError::format(path, e.to_string()))?;
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(LabError::format(path, format!("header must be {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| LabError::format(path, e.to_string()))?;
        let bad = |what: &str| LabError::format(path, format!("line {line}: {what}"));
        let id: u64 = record[0].parse().map_err(|_| bad("id is not an unsigned integer"))?;
        let label: i64 = record[1].parse().map_err(|_| bad("label is not an integer"))?;
        let label = match (labeled, label) {
            (false, -1) => None,
            (false, _) => return Err(bad("unlabeled rows must carry label -1")),
            (true, l) if l >= 0 => Some(l as usize),
            (true, _) => return Err(bad("labeled rows need a non-negative label")),
        };
        let features = record
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad("feature is not a finite number"))?;
        out.push(Sample { id, features, label });
    }
    Ok(out)
}

fn read_truth(path: &Path, unlabeled: &[Sample]) -> LabResult<Vec<usize>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| LabError::format(path, e.to_string()))?;
    let mut truth = Vec::with_capacity(unlabeled.len());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LabError::format(path, e.to_string()))?;
        let id: Option<u64> = record.get(0).and_then(|v| v.parse().ok());
        let label: Option<usize> = record.get(1).and_then(|v| v.parse().ok());
        match (id, label, unlabeled.get(i)) {
            (Some(id), Some(label), Some(s)) if s.id == id => truth.push(label),
            _ => return Err(LabError::format(path, format!("line {}: does not match unlabeled.csv", i + 2))),
        }
    }
    if truth.len() != unlabeled.len() {
        return Err(LabError::format(path, "row count differs from unlabeled.csv"));
    }
    Ok(truth)
}

pub fn read_stream(root: &Path) -> LabResult<TaskStream> {
    let manifest = read_manifest(root)?;
    let cfg = manifest.stream.clone();
    let dim = cfg.input_dim;
    let mut tasks = Vec::with_capacity(manifest.num_tasks);
    for t in 1..=manifest.num_tasks {
        let dir = task_dir(root, t);
        let labeled = read_samples(&dir.join("labeled.csv"), dim, true)?;
        let unlabeled = read_samples(&dir.join("unlabeled.csv"), dim, false)?;
        let test = read_samples(&dir.join("test.csv"), dim, true)?;
        let got = [labeled.len(), unlabeled.len(), test.len()];
        if got != manifest.counts[t - 1] {
            return Err(LabError::format(&dir, format!("sample counts {got:?} differ from the manifest")));
        }
        let truth = read_truth(&dir.join("unlabeled_truth.csv"), &unlabeled)?;
        let classes: Vec<usize> = ((t - 1) * cfg.classes_per_task..t * cfg.classes_per_task).collect();
        tasks.push(TaskSpec::new(t, classes, labeled, unlabeled, test, truth)?);
    }
    Ok(TaskStream { config: cfg, tasks })
}
