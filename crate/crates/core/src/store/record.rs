use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::fitness::FitnessBreakdown;

pub type RecordId = u64;
pub type CognitionId = u64;

/// Tolerance for the stored benchmark mean versus the recomputed mean.
const MEAN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Exploration,
    Verification,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Exploration => "exploration",
            Stage::Verification => "verification",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Accepted,
    RejectedLeakage,
    RejectedNovelty,
    RejectedSanity,
    FailedTraining,
    /// The cycle ended before training: gateway exhaustion, an unparseable
    /// proposal, or a worker fault.
    Aborted,
}

impl RecordStatus {
    pub const ALL: [RecordStatus; 6] = [
        RecordStatus::Accepted,
        RecordStatus::RejectedLeakage,
        RecordStatus::RejectedNovelty,
        RecordStatus::RejectedSanity,
        RecordStatus::FailedTraining,
        RecordStatus::Aborted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Accepted => "accepted",
            RecordStatus::RejectedLeakage => "rejected_leakage",
            RecordStatus::RejectedNovelty => "rejected_novelty",
            RecordStatus::RejectedSanity => "rejected_sanity",
            RecordStatus::FailedTraining => "failed_training",
            RecordStatus::Aborted => "aborted",
        }
    }
}

impl fmt::Display for RecordStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training and evaluation outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `(step, loss)` pairs with strictly increasing steps.
    pub loss_curve: Vec<(u64, f64)>,
    pub final_loss: f64,
    pub benchmark_scores: BTreeMap<String, f64>,
    pub benchmark_mean: f64,
}

impl MetricsReport {
    /// Build a report, deriving `final_loss` and `benchmark_mean`.
    pub fn new(
        loss_curve: Vec<(u64, f64)>,
        benchmark_scores: BTreeMap<String, f64>,
    ) -> Result<Self, StoreError> {
        let final_loss = loss_curve
            .last()
            .map(|&(_, l)| l)
            .ok_or_else(|| StoreError::Validation("empty loss curve".into()))?;
        let benchmark_mean = mean(benchmark_scores.values().copied())
            .ok_or_else(|| StoreError::Validation("no benchmark scores".into()))?;
        let report = Self {
            loss_curve,
            final_loss,
            benchmark_scores,
            benchmark_mean,
        };
        report.check_shape()?;
        Ok(report)
    }

    /// Loss at the largest curve step that is `<= step`.
    pub fn loss_at_or_before(&self, step: u64) -> Option<f64> {
        let idx = self.loss_curve.partition_point(|&(s, _)| s <= step);
        idx.checked_sub(1).map(|i| self.loss_curve[i].1)
    }

    fn check_shape(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::Validation(m));
        if self.loss_curve.is_empty() {
            return bad("empty loss curve".into());
        }
        for w in self.loss_curve.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad(format!("loss curve steps not increasing at step {}", w[1].0));
            }
        }
        for &(step, loss) in &self.loss_curve {
            if !(loss.is_finite() && loss > 0.0) {
                return bad(format!("loss {loss} at step {step} is not positive and finite"));
            }
        }
        if self.final_loss != self.loss_curve[self.loss_curve.len() - 1].1 {
            return bad("final_loss differs from the loss at the last step".into());
        }
        for (task, &score) in &self.benchmark_scores {
            if !(0.0..=1.0).contains(&score) {
                return bad(format!("benchmark {task} score {score} outside [0, 1]"));
            }
        }
        let recomputed = mean(self.benchmark_scores.values().copied()).unwrap_or(f64::NAN);
        if !((recomputed - self.benchmark_mean).abs() <= MEAN_TOLERANCE) {
            return bad(format!(
                "benchmark_mean {} differs from recomputed mean {recomputed}",
                self.benchmark_mean
            ));
        }
        Ok(())
    }

    /// One-paragraph text rendering used inside prompts.
    pub fn digest(&self) -> String {
        let scores: Vec<String> = self
            .benchmark_scores
            .iter()
            .map(|(k, v)| format!("{k} {v:.4}"))
            .collect();
        format!(
            "final_loss {:.4} at step {}; benchmark_mean {:.4}; {}",
            self.final_loss,
            self.loss_curve.last().map_or(0, |&(s, _)| s),
            self.benchmark_mean,
            scores.join(", ")
        )
    }

    /// Full validation, including that the scores cover exactly `task_set`.
    pub fn validate(&self, task_set: &[String]) -> Result<(), StoreError> {
        self.check_shape()?;
        let tasks: Vec<&String> = self.benchmark_scores.keys().collect();
        let mut expected: Vec<&String> = task_set.iter().collect();
        expected.sort();
        if tasks != expected {
            return Err(StoreError::Validation(format!(
                "benchmark tasks {tasks:?} differ from configured task set {expected:?}"
            )));
        }
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One debugging revision applied after a failed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub attempt: u32,
    /// Short hex digest of the error-log tail the debugger received.
    pub log_digest: String,
    /// Absolute change in code length, in bytes.
    pub code_diff_bytes: u64,
}

/// Everything about an experiment except the ids the store assigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDraft {
    pub name: String,
    pub motivation: String,
    pub code: String,
    pub parent_id: Option<RecordId>,
    /// Exploration record this verification run re-trains, if any.
    #[serde(default)]
    pub promoted_from: Option<RecordId>,
    pub stage: Stage,
    pub status: RecordStatus,
    pub metrics: Option<MetricsReport>,
    pub fitness: Option<FitnessBreakdown>,
    pub analysis: Option<String>,
    #[serde(default)]
    pub shortcomings: Option<String>,
    #[serde(default)]
    pub cognition_refs: Vec<CognitionId>,
    #[serde(default)]
    pub needs_reanalysis: bool,
    /// Total compute spent on this experiment, all runs included.
    pub wall_seconds: f64,
    /// Wall time of the successful training run, when there was one.
    #[serde(default)]
    pub train_seconds: Option<f64>,
    #[serde(default)]
    pub proposal_attempts: u32,
    #[serde(default)]
    pub revisions: Vec<Revision>,
    /// Human-readable reason for a non-accepted status.
    #[serde(default)]
    pub note: Option<String>,
    /// Cycle slot that produced the record; `None` for seeded baselines.
    #[serde(default)]
    pub slot: Option<u64>,
}

impl RecordDraft {
    /// A draft with every optional field empty.
    pub fn new(name: impl Into<String>, motivation: impl Into<String>, code: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            motivation: motivation.into(),
            code: code.into(),
            parent_id: None,
            promoted_from: None,
            stage: Stage::Exploration,
            status: RecordStatus::Aborted,
            metrics: None,
            fitness: None,
            analysis: None,
            shortcomings: None,
            cognition_refs: Vec::new(),
            needs_reanalysis: false,
            wall_seconds: 0.0,
            train_seconds: None,
            proposal_attempts: 0,
            revisions: Vec::new(),
            note: None,
            slot: None,
        }
    }

    /// `key: value` header lines, a blank line, then the motivation.
    pub fn digest(&self, record_id: Option<RecordId>) -> String {
        let mut out = format!("name: {}\n", self.name);
        if let Some(id) = record_id {
            out.push_str(&format!("record_id: {id}\n"));
        }
        out.push_str(&format!("stage: {}\nstatus: {}\n", self.stage, self.status));
        if let Some(f) = &self.fitness {
            out.push_str(&format!(
                "fitness: {:.4} (loss delta {:+.4}, benchmark delta {:+.4}, judge {})\n",
                f.composite, f.r_loss, f.r_bench, f.judge10
            ));
        }
        if let Some(m) = &self.metrics {
            out.push_str(&format!("results: {}\n", m.digest()));
        }
        out.push('\n');
        out.push_str(self.motivation.trim());
        out
    }

    /// Invariants that do not depend on other records.
    pub fn validate(&self, task_set: &[String]) -> Result<(), StoreError> {
        let bad = |m: &str| Err(StoreError::Validation(m.to_string()));
        if self.name.trim().is_empty() {
            return bad("record name is empty");
        }
        if !(self.wall_seconds.is_finite() && self.wall_seconds >= 0.0) {
            return bad("wall_seconds must be finite and nonnegative");
        }
        if let Some(m) = &self.metrics {
            m.validate(task_set)?;
        }
        if let Some(f) = &self.fitness {
            if f.leakage && self.status != RecordStatus::RejectedLeakage {
                return bad("fitness flags leakage but status is not rejected_leakage");
            }
            if !f.composite.is_finite() {
                return bad("composite fitness is not finite");
            }
        }
        if self.status == RecordStatus::Accepted {
            if self.fitness.is_none() {
                return bad("accepted record lacks fitness");
            }
            if self.metrics.is_none() {
                return bad("accepted record lacks metrics");
            }
        }
        Ok(())
    }
}

/// A persisted experiment node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureRecord {
    pub record_id: RecordId,
    pub created_seq: u64,
    #[serde(flatten)]
    pub body: RecordDraft,
}

impl ArchitectureRecord {
    pub fn composite(&self) -> Option<f64> {
        self.body.fitness.as_ref().map(|f| f.composite)
    }

    pub fn is_accepted(&self) -> bool {
        self.body.status == RecordStatus::Accepted
    }
}
