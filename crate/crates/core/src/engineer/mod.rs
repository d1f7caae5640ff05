//! Training execution, supervision, self-repair and quality judging.

mod monitor;
mod subprocess;
pub mod wire;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use monitor::{replay, time_limit, Kill, Monitor, MonitorConfig, RunEvent, Verdict};
pub use subprocess::SubprocessExecutor;

use crate::fitness::{clamp_judge, JUDGE_MAX, JUDGE_MIN};
use crate::gateway::{GatewayError, LlmGateway, Message, Task};
use crate::prompts::{fence, tags, PromptError, PromptSet, Sections};
use crate::store::{MetricsReport, Revision, Stage};

/// Bytes of error log kept on reports and sent to the debugger.
pub const ERROR_LOG_TAIL: usize = 4000;

/// Judge score used when no number can be read from the reply.
pub const JUDGE_FALLBACK: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EngineerError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("workspace error on {path}: {reason}")]
    Workspace { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    pub token_budget: u64,
    pub eval_sample_cap: u32,
    pub model_scale: String,
    /// Time kill at this multiple of the trailing median training time.
    pub limit_factor: f64,
    /// How many past successful runs form the median.
    pub history_window: usize,
    pub anomaly_threshold: f64,
    pub debug_budget: u32,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::exploration()
    }
}

impl StageConfig {
    pub fn exploration() -> Self {
        Self {
            stage: Stage::Exploration,
            token_budget: 1_000_000_000,
            eval_sample_cap: 500,
            model_scale: "20M".into(),
            limit_factor: 2.5,
            history_window: 20,
            anomaly_threshold: 0.10,
            debug_budget: 3,
        }
    }

    pub fn verification() -> Self {
        Self {
            stage: Stage::Verification,
            model_scale: "340M".into(),
            ..Self::exploration()
        }
    }

    pub fn validate(&self) -> Result<(), EngineerError> {
        let bad = |m: String| Err(EngineerError::Config(m));
        if !(2.0..=3.0).contains(&self.limit_factor) {
            return bad(format!("limit_factor {} outside [2, 3]", self.limit_factor));
        }
        if !(self.anomaly_threshold.is_finite() && self.anomaly_threshold > 0.0) {
            return bad("anomaly_threshold must be positive".into());
        }
        if self.token_budget == 0 || self.eval_sample_cap == 0 || self.history_window == 0 {
            return bad("token_budget, eval_sample_cap and history_window must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Error,
    KilledTimeout,
    KilledAnomaly,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Error => "error",
            RunStatus::KilledTimeout => "killed_timeout",
            RunStatus::KilledAnomaly => "killed_anomaly",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorReport {
    pub status: RunStatus,
    pub metrics: Option<MetricsReport>,
    pub wall_seconds: f64,
    pub error_log: String,
    pub step_stream: Vec<(u64, f64)>,
}

impl ExecutorReport {
    pub fn ok(metrics: MetricsReport, wall_seconds: f64, step_stream: Vec<(u64, f64)>) -> Self {
        Self {
            status: RunStatus::Ok,
            metrics: Some(metrics),
            wall_seconds,
            error_log: String::new(),
            step_stream,
        }
    }

    pub fn failed(status: RunStatus, error_log: impl AsRef<str>, wall_seconds: f64, step_stream: Vec<(u64, f64)>) -> Self {
        let mut log = tail(error_log.as_ref(), ERROR_LOG_TAIL).to_string();
        if log.trim().is_empty() {
            log = format!("run ended with status {}", status.as_str());
        }
        Self {
            status,
            metrics: None,
            wall_seconds,
            error_log: log,
            step_stream,
        }
    }

    pub fn from_kill(kill: &Kill, log: &str, step_stream: Vec<(u64, f64)>) -> Self {
        let text = if log.is_empty() {
            kill.reason.clone()
        } else {
            format!("{log}\n{}", kill.reason)
        };
        Self::failed(kill.status, text, kill.elapsed, step_stream)
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn check(&self) -> Result<(), EngineerError> {
        if self.is_ok() != self.metrics.is_some() {
            return Err(EngineerError::Precondition("status ok must coincide with metrics".into()));
        }
        if self.status == RunStatus::Error && self.error_log.is_empty() {
            return Err(EngineerError::Precondition("error report without a log".into()));
        }
        Ok(())
    }
}

/// The last `max` bytes of `s`, cut at a character boundary.
pub fn tail(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

/// Everything an executor needs for one run.
#[derive(Debug, Clone)]
pub struct RunJob<'a> {
    pub name: &'a str,
    pub motivation: &'a str,
    pub code: &'a str,
    pub stage: &'a StageConfig,
    pub task_set: &'a [String],
    pub seed: u64,
    /// 0 for the first run, then one per debugging revision.
    pub attempt: u32,
}

/// Anything that trains and evaluates a candidate.
///
/// Implementations report progress to the monitor and stop as soon as it
/// returns [`Verdict::Kill`].
pub trait Executor: Send + Sync {
    fn run(&self, job: &RunJob<'_>, monitor: &mut Monitor) -> ExecutorReport;
}

/// Hands out workspace directories that are never reused.
#[derive(Debug)]
pub struct WorkspaceAllocator {
    root: PathBuf,
    counter: AtomicU64,
}

impl WorkspaceAllocator {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            counter: AtomicU64::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn allocate(&self, label: &str) -> Result<PathBuf, EngineerError> {
        let werr = |path: &Path, e: std::io::Error| EngineerError::Workspace {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        fs::create_dir_all(&self.root).map_err(|e| werr(&self.root, e))?;
        let label: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
            .take(48)
            .collect();
        loop {
            let n = self.counter.fetch_add(1, Ordering::Relaxed);
            let path = self.root.join(format!("{label}-{n:06}"));
            match fs::create_dir(&path) {
                Ok(()) => return Ok(path),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(werr(&path, e)),
            }
        }
    }
}

/// Monitor settings for one run from the stage, the trailing history of
/// successful training times and the baseline curve.
pub fn monitor_config(stage: &StageConfig, history: &[f64], baseline_curve: &[(u64, f64)]) -> MonitorConfig {
    let window = &history[history.len().saturating_sub(stage.history_window)..];
    MonitorConfig {
        time_limit: time_limit(window, stage.limit_factor),
        baseline_curve: baseline_curve.to_vec(),
        anomaly_threshold: stage.anomaly_threshold,
    }
}

/// Launch one supervised run.
pub fn execute(
    executor: &dyn Executor,
    job: &RunJob<'_>,
    history: &[f64],
    baseline_curve: &[(u64, f64)],
) -> ExecutorReport {
    let mut monitor = Monitor::new(monitor_config(job.stage, history, baseline_curve));
    executor.run(job, &mut monitor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebugOutcome {
    pub report: ExecutorReport,
    pub code: String,
    pub revisions: Vec<Revision>,
    /// Wall time of the revision runs only.
    pub wall_seconds: f64,
    /// Why the loop stopped early, if it did.
    pub note: Option<String>,
}

fn short_digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Ask the debugger for revised code after each failure and re-run it.
///
/// Stops at the first `ok` report or after `budget` revisions. `rerun` is
/// called with the revised code and the revision number (1-based).
pub fn debug_loop(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    motivation: &str,
    code: &str,
    first: ExecutorReport,
    budget: u32,
    mut rerun: impl FnMut(&str, u32) -> ExecutorReport,
) -> Result<DebugOutcome, EngineerError> {
    if first.is_ok() {
        return Err(EngineerError::Precondition(
            "debug_loop needs a failed first report".into(),
        ));
    }
    let mut report = first;
    let mut code = code.to_string();
    let mut revisions = Vec::new();
    let mut wall = 0.0;
    let mut note = None;
    for attempt in 1..=budget {
        let log = tail(&report.error_log, ERROR_LOG_TAIL);
        let source = fence(tags::SOURCE, &code);
        let error_log = fence(tags::ERROR_LOG, log);
        let messages = prompts.render(
            Task::Debug,
            &[("motivation", motivation), ("code", &source), ("error_log", &error_log)],
        )?;
        let reply = match gateway.chat(Task::Debug, &messages) {
            Ok(r) => r,
            Err(e) => {
                note = Some(format!("debugger unavailable: {e}"));
                break;
            }
        };
        let revised = Sections::parse(&reply)
            .ok()
            .and_then(|s| s.first("CODE").map(str::to_string))
            .filter(|c| !c.trim().is_empty());
        let Some(revised) = revised else {
            tracing::warn!(attempt, "debugger reply has no code section");
            revisions.push(Revision {
                attempt,
                log_digest: short_digest(log),
                code_diff_bytes: 0,
            });
            continue;
        };
        revisions.push(Revision {
            attempt,
            log_digest: short_digest(log),
            code_diff_bytes: revised.len().abs_diff(code.len()) as u64,
        });
        code = revised;
        report = rerun(&code, attempt);
        wall += report.wall_seconds;
        if report.is_ok() {
            break;
        }
    }
    Ok(DebugOutcome {
        report,
        code,
        revisions,
        wall_seconds: wall,
        note,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    pub score: f64,
    /// Number read from the reply before clamping, if any.
    pub raw: Option<f64>,
    pub asks: u32,
    pub warnings: Vec<String>,
}

/// First decimal number in `text`, preferring a `[[SCORE]]` section.
pub fn parse_score(text: &str) -> Option<f64> {
    let scoped = Sections::parse(text)
        .ok()
        .and_then(|s| s.first("SCORE").map(str::to_string));
    first_number(scoped.as_deref().unwrap_or(text))
        .or_else(|| scoped.is_some().then(|| first_number(text)).flatten())
}

fn first_number(text: &str) -> Option<f64> {
    let b = text.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i].is_ascii_digit() {
            let neg = i > 0 && b[i - 1] == b'-';
            let start = if neg { i - 1 } else { i };
            let mut j = i;
            while j < b.len() && b[j].is_ascii_digit() {
                j += 1;
            }
            if j + 1 < b.len() && b[j] == b'.' && b[j + 1].is_ascii_digit() {
                j += 1;
                while j < b.len() && b[j].is_ascii_digit() {
                    j += 1;
                }
            }
            return text[start..j].parse().ok();
        }
        i += 1;
    }
    None
}

/// Score a trained candidate from 1 to 10.
///
/// `baselines` holds one fenced `BASELINE` block per reference model.
pub fn judge_quality(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    name: &str,
    motivation: &str,
    code: &str,
    report: &ExecutorReport,
    baselines: &str,
) -> Result<JudgeOutcome, EngineerError> {
    let metrics = report
        .metrics
        .as_ref()
        .filter(|_| report.is_ok())
        .ok_or_else(|| EngineerError::Precondition("judge_quality needs an ok report".into()))?;
    let digest = fence(tags::METRICS, &metrics.digest());
    let mut messages = prompts.render(
        Task::QualityJudge,
        &[
            ("name", name),
            ("motivation", motivation),
            ("code", code),
            ("metrics", &digest),
            ("baselines", baselines),
        ],
    )?;
    let mut warnings = Vec::new();
    for ask in 1..=2u32 {
        let reply = gateway.chat(Task::QualityJudge, &messages)?;
        if let Some(raw) = parse_score(&reply) {
            let score = clamp_judge(raw);
            if score != raw {
                let w = format!("judge score {raw} clamped to {score}");
                tracing::warn!("{w}");
                warnings.push(w);
            }
            return Ok(JudgeOutcome {
                score,
                raw: Some(raw),
                asks: ask,
                warnings,
            });
        }
        messages.push(Message::assistant(reply));
        messages.push(Message::user(format!(
            "Reply with only a number from {JUDGE_MIN} to {JUDGE_MAX} inside [[SCORE]] and [[/SCORE]] lines."
        )));
    }
    let w = format!("judge gave no score twice; using {JUDGE_FALLBACK}");
    tracing::warn!("{w}");
    warnings.push(w);
    Ok(JudgeOutcome {
        score: JUDGE_FALLBACK,
        raw: None,
        asks: 2,
        warnings,
    })
}
