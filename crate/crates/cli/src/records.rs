//! Metric records and wall-clock timings kept in a run directory.
//!
//! `metrics.jsonl` holds one [`MetricRecord`] per line, appended by
//! in-training evaluation and by `dgan eval`; `timings.jsonl` holds one
//! [`Timing`] per command invocation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dgan::trainer::run::RunDir;
use dgan::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    /// Class name for per-class metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub value: f64,
    /// Spread across splits, for metrics reported as mean and std.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub step: u64,
    pub seed: u64,
    pub dataset_hash: String,
    pub extractor: String,
    pub n_gen: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub seconds: f64,
}

pub fn metrics_path(dir: &RunDir) -> PathBuf {
    dir.root.join("metrics.jsonl")
}

pub fn timings_path(dir: &RunDir) -> PathBuf {
    dir.root.join("timings.jsonl")
}

fn append_lines<R: Serialize>(path: &Path, rows: &[R]) -> dgan::Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

fn read_lines<R: for<'de> Deserialize<'de>>(path: &Path) -> dgan::Result<Vec<R>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

pub fn append_metrics(dir: &RunDir, rows: &[MetricRecord]) -> dgan::Result<()> {
    append_lines(&metrics_path(dir), rows)
}

pub fn read_metrics(dir: &RunDir) -> dgan::Result<Vec<MetricRecord>> {
    read_lines(&metrics_path(dir))
}

/// Keep only the in-training records whose step passes `keep` (resuming
/// replays the steps after the checkpoint).
pub fn retain_train_metrics(dir: &RunDir, keep: impl Fn(u64) -> bool) -> dgan::Result<()> {
    let path = metrics_path(dir);
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<MetricRecord> = read_metrics(dir)?
        .into_iter()
        .filter(|r| r.origin != Origin::Train || keep(r.step))
        .collect();
    fs::remove_file(&path).map_err(|e| Error::io(format!("rewriting {}", path.display()), e))?;
    append_lines(&path, &kept)
}

pub fn append_timing(dir: &RunDir, command: &str, seconds: f64) -> dgan::Result<()> {
    append_lines(
        &timings_path(dir),
        &[Timing {
            command: command.into(),
            seconds,
        }],
    )
}

pub fn read_timings(dir: &RunDir) -> dgan::Result<Vec<Timing>> {
    read_lines(&timings_path(dir))
}
