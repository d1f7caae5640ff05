//! Executor wire contract.
//!
//! Before launch the engine writes into a fresh workspace directory:
//!
//! - `candidate_source.txt`: the candidate code, verbatim.
//! - `run_config.json`: a [`RunConfig`] object.
//!
//! While training, the executor appends lines to `progress.log`, each exactly
//! `STEP <int> LOSS <float>` followed by `\n`. Any other line is ignored.
//!
//! On completion it writes `metrics.json`, an object with exactly these keys:
//!
//! ```json
//! {"status": "ok" | "error",
//!  "loss_curve": [[step, loss], ...],
//!  "benchmarks": {"task": score, ...},
//!  "wall_seconds": 12.5,
//!  "error_log": "..."}
//! ```
//!
//! The process exits with code 0 if and only if `status` is `"ok"`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{MetricsReport, Stage};

pub const SOURCE_FILE: &str = "candidate_source.txt";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const PROGRESS_FILE: &str = "progress.log";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("metrics.json is not valid: {0}")]
    Schema(String),
    #[error("i/o error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> WireError + '_ {
    move |e| WireError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub stage: Stage,
    pub token_budget: u64,
    pub eval_sample_cap: u32,
    pub model_scale: String,
    pub seed: u64,
    pub task_set: Vec<String>,
}

pub fn prepare_workspace(dir: &Path, code: &str, config: &RunConfig) -> Result<(), WireError> {
    let src = dir.join(SOURCE_FILE);
    fs::write(&src, code).map_err(io(&src))?;
    let cfg = dir.join(RUN_CONFIG_FILE);
    let json = serde_json::to_string_pretty(config).map_err(|e| WireError::Schema(e.to_string()))?;
    fs::write(&cfg, json).map_err(io(&cfg))?;
    Ok(())
}

/// Parse one progress line (without its newline).
pub fn parse_progress_line(line: &str) -> Option<(u64, f64)> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut parts = line.split(' ');
    if parts.next()? != "STEP" {
        return None;
    }
    let step_text = parts.next()?;
    if step_text.is_empty() || !step_text.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let step: u64 = step_text.parse().ok()?;
    if parts.next()? != "LOSS" {
        return None;
    }
    let loss: f64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !loss.is_finite() {
        return None;
    }
    Some((step, loss))
}

/// Incremental reader over a growing progress file; yields complete lines only.
#[derive(Debug, Default)]
pub struct ProgressTail {
    offset: u64,
    partial: String,
}

impl ProgressTail {
    pub fn poll(&mut self, path: &Path) -> Vec<(u64, f64)> {
        let Ok(mut f) = fs::File::open(path) else {
            return Vec::new();
        };
        if f.seek(SeekFrom::Start(self.offset)).is_err() {
            return Vec::new();
        }
        let mut buf = Vec::new();
        if f.read_to_end(&mut buf).is_err() {
            return Vec::new();
        }
        self.offset += buf.len() as u64;
        self.partial.push_str(&String::from_utf8_lossy(&buf));
        let mut out = Vec::new();
        while let Some(nl) = self.partial.find('\n') {
            let line: String = self.partial.drain(..=nl).collect();
            if let Some(p) = parse_progress_line(&line[..line.len() - 1]) {
                out.push(p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireStatus {
    Ok,
    Error,
}

/// The contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMetrics {
    pub status: WireStatus,
    pub loss_curve: Vec<(u64, f64)>,
    pub benchmarks: BTreeMap<String, f64>,
    pub wall_seconds: f64,
    pub error_log: String,
}

impl WireMetrics {
    /// The metrics report for an `ok` file.
    pub fn report(&self, task_set: &[String]) -> Result<MetricsReport, WireError> {
        let r = MetricsReport::new(self.loss_curve.clone(), self.benchmarks.clone())
            .map_err(|e| WireError::Schema(e.to_string()))?;
        r.validate(task_set)
            .map_err(|e| WireError::Schema(e.to_string()))?;
        Ok(r)
    }
}

/// Strict validation of a `metrics.json` body.
///
/// Every key is required and no others are allowed. `wall_seconds` must be
/// finite and nonnegative. An `ok` file must carry a valid loss curve and
/// exactly the configured benchmark tasks; an `error` file must carry a
/// non-empty `error_log`.
pub fn validate_metrics_json(text: &str, task_set: &[String]) -> Result<WireMetrics, WireError> {
    let m: WireMetrics =
        serde_json::from_str(text).map_err(|e| WireError::Schema(e.to_string()))?;
    if !(m.wall_seconds.is_finite() && m.wall_seconds >= 0.0) {
        return Err(WireError::Schema("wall_seconds must be finite and nonnegative".into()));
    }
    match m.status {
        WireStatus::Ok => {
            m.report(task_set)?;
        }
        WireStatus::Error => {
            if m.error_log.trim().is_empty() {
                return Err(WireError::Schema("error status requires a non-empty error_log".into()));
            }
        }
    }
    Ok(m)
}

pub fn read_metrics(dir: &Path, task_set: &[String]) -> Result<WireMetrics, WireError> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    validate_metrics_json(&text, task_set)
}
