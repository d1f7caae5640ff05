use std::sync::Arc;

use super::{slot_seed, Engine};
use crate::analyst;
use crate::engineer::{
    debug_loop, execute, judge_quality, tail, ExecutorReport, RunJob, StageConfig, JUDGE_FALLBACK,
};
use crate::fitness::{leakage_check, FitnessBreakdown};
use crate::pool::{cold_start_seed, sample_seed, CandidatePoolSnapshot};
use crate::researcher::{self, Validated, NAME_PREFIX};
use crate::store::{Archive, ArchitectureRecord, MetricsReport, RecordDraft, RecordStatus, Revision};

/// What every slot of a round reads.
#[derive(Debug, Clone)]
pub struct RoundView {
    pub archive: Arc<Archive>,
    pub pool: Option<Arc<CandidatePoolSnapshot>>,
    pub baseline: Arc<ArchitectureRecord>,
}

pub(crate) struct Trained {
    pub report: ExecutorReport,
    pub code: String,
    pub revisions: Vec<Revision>,
    pub wall: f64,
    pub note: Option<String>,
}

pub(crate) fn aborted(slot: u64, parent: Option<u64>, note: String) -> RecordDraft {
    tracing::warn!(slot, "cycle aborted: {note}");
    let mut d = RecordDraft::new(format!("{NAME_PREFIX}aborted_slot{slot}"), "", "");
    d.parent_id = parent;
    d.status = RecordStatus::Aborted;
    d.note = Some(note);
    d.slot = Some(slot);
    d
}

fn failure_note(report: &ExecutorReport) -> String {
    format!("{}: {}", report.status.as_str(), tail(report.error_log.trim(), 600))
}

impl Engine {
    /// Train `code`, handing failures to the debugger.
    pub(crate) fn train(
        &self,
        stage: &StageConfig,
        history: &[f64],
        baseline: &MetricsReport,
        name: &str,
        motivation: &str,
        code: &str,
        seed: u64,
    ) -> Result<Trained, crate::engineer::EngineerError> {
        let task_set = &self.config.task_set;
        let job = RunJob {
            name,
            motivation,
            code,
            stage,
            task_set,
            seed,
            attempt: 0,
        };
        let first = execute(self.executor.as_ref(), &job, history, &baseline.loss_curve);
        let mut wall = first.wall_seconds;
        if first.is_ok() || stage.debug_budget == 0 {
            return Ok(Trained {
                report: first,
                code: code.to_string(),
                revisions: Vec::new(),
                wall,
                note: None,
            });
        }
        let out = debug_loop(
            &self.gateway,
            &self.prompts,
            motivation,
            code,
            first,
            stage.debug_budget,
            |revised, attempt| {
                let job = RunJob {
                    name,
                    motivation,
                    code: revised,
                    stage,
                    task_set,
                    seed,
                    attempt,
                };
                execute(self.executor.as_ref(), &job, history, &baseline.loss_curve)
            },
        )?;
        wall += out.wall_seconds;
        Ok(Trained {
            report: out.report,
            code: out.code,
            revisions: out.revisions,
            wall,
            note: out.note,
        })
    }

    /// Turn a training outcome into a scored draft: failed, leaked, or
    /// accepted with a judged fitness. Analysis is left to the caller.
    pub(crate) fn score(
        &self,
        mut draft: RecordDraft,
        trained: Trained,
        baseline: &ArchitectureRecord,
    ) -> RecordDraft {
        draft.code = trained.code;
        draft.revisions = trained.revisions;
        draft.wall_seconds = trained.wall;
        let report = trained.report;
        let metrics = match (&report.metrics, report.is_ok()) {
            (Some(m), true) => m.clone(),
            _ => {
                draft.status = RecordStatus::FailedTraining;
                let mut note = failure_note(&report);
                if let Some(n) = trained.note {
                    note = format!("{note} ({n})");
                }
                draft.note = Some(note);
                return draft;
            }
        };
        draft.train_seconds = Some(report.wall_seconds);
        let Some(base_metrics) = baseline.body.metrics.as_ref() else {
            draft.status = RecordStatus::Aborted;
            draft.note = Some("baseline has no metrics".into());
            return draft;
        };
        let verdict = match leakage_check(&metrics, base_metrics) {
            Ok(v) => v,
            Err(e) => {
                draft.status = RecordStatus::FailedTraining;
                draft.note = Some(format!("metrics not comparable with the baseline: {e}"));
                return draft;
            }
        };
        if metrics.validate(&self.config.task_set).is_err() {
            draft.status = RecordStatus::FailedTraining;
            draft.note = Some("metrics do not cover the configured task set".into());
            return draft;
        }
        draft.metrics = Some(metrics);
        if verdict.leakage {
            draft.status = RecordStatus::RejectedLeakage;
            draft.fitness = FitnessBreakdown::leaked(verdict.r_loss, verdict.r_bench).ok();
            draft.note = Some(format!(
                "final loss {:.2}% below the baseline; treated as information leakage",
                verdict.r_loss * 100.0
            ));
            return draft;
        }
        let judge = judge_quality(
            &self.gateway,
            &self.prompts,
            &draft.name,
            &draft.motivation,
            &draft.code,
            &report,
            &self.baseline_blocks(baseline),
        );
        let judge10 = match judge {
            Ok(j) => j.score,
            Err(e) => {
                draft.note = Some(format!("judge unavailable ({e}); scored {JUDGE_FALLBACK}"));
                JUDGE_FALLBACK
            }
        };
        match FitnessBreakdown::score(verdict.r_loss, verdict.r_bench, judge10) {
            Ok(f) => {
                draft.fitness = Some(f);
                draft.status = RecordStatus::Accepted;
            }
            Err(e) => {
                draft.status = RecordStatus::Aborted;
                draft.note = Some(format!("fitness could not be computed: {e}"));
            }
        }
        draft
    }

    /// One full evolution step. Always yields a draft; failures become a
    /// draft whose status says where the cycle stopped.
    pub fn run_cycle(&self, view: &RoundView, slot: u64) -> RecordDraft {
        let seed = slot_seed(self.config.seed, slot);
        let policy = &self.config.pool;
        let pick = view
            .pool
            .as_deref()
            .and_then(|p| sample_seed(policy, p, seed))
            .unwrap_or_else(|| cold_start_seed(policy, &view.archive, view.baseline.record_id, seed));
        let Some(parent) = view.archive.get(pick.parent).cloned() else {
            return aborted(slot, None, format!("parent {} not in archive", pick.parent));
        };
        let references: Vec<Arc<ArchitectureRecord>> = pick
            .references
            .iter()
            .filter_map(|&id| view.archive.get(id).cloned())
            .collect();
        let cognitions = analyst::parent_cognitions(&self.cognitions, &parent, self.gateway.as_ref());
        let baseline_digest = format!(
            "{}: {}",
            super::BASELINE_NAME,
            view.baseline
                .body
                .metrics
                .as_ref()
                .map(|m| m.digest())
                .unwrap_or_default()
        );
        let ctx = match researcher::assemble_context(
            &self.gateway,
            &self.prompts,
            parent.clone(),
            &references,
            cognitions,
            baseline_digest,
        ) {
            Ok(c) => c,
            Err(e) => return aborted(slot, Some(parent.record_id), format!("context assembly failed: {e}")),
        };
        let budget = self.config.rewrite_budget;
        let proposal = match researcher::propose_validated(
            &self.gateway,
            &self.prompts,
            &view.archive,
            self.gateway.as_ref(),
            &ctx,
            budget,
        ) {
            Ok(Validated::Passed(p)) => p,
            Ok(Validated::Exhausted {
                last,
                status,
                feedback_history,
            }) => {
                let mut d = RecordDraft::new(last.name, last.motivation, last.code);
                d.parent_id = Some(parent.record_id);
                d.status = status;
                d.proposal_attempts = last.attempt;
                d.note = feedback_history.last().cloned();
                d.slot = Some(slot);
                return d;
            }
            Err(e) => return aborted(slot, Some(parent.record_id), format!("proposal failed: {e}")),
        };

        let mut draft = RecordDraft::new(&proposal.name, &proposal.motivation, &proposal.code);
        draft.parent_id = Some(parent.record_id);
        draft.proposal_attempts = proposal.attempt;
        draft.slot = Some(slot);

        let stage = &self.config.exploration;
        let history = view.archive.recent_train_seconds(stage.stage, stage.history_window);
        let Some(base_metrics) = view.baseline.body.metrics.as_ref() else {
            return aborted(slot, Some(parent.record_id), "baseline has no metrics".into());
        };
        let trained = match self.train(
            stage,
            &history,
            base_metrics,
            &proposal.name,
            &proposal.motivation,
            &proposal.code,
            seed,
        ) {
            Ok(t) => t,
            Err(e) => return aborted(slot, Some(parent.record_id), format!("training harness failed: {e}")),
        };
        let mut draft = self.score(draft, trained, &view.baseline);
        if draft.status != RecordStatus::Accepted {
            return draft;
        }

        let siblings = analyst::recent_siblings(&view.archive, Some(parent.record_id), None, analyst::SIBLING_CAP);
        match analyst::analyze(
            &self.gateway,
            &self.prompts,
            &draft,
            Some(&parent),
            &siblings,
            &self.baseline_blocks(&view.baseline),
        ) {
            Ok(a) => {
                draft.cognition_refs =
                    analyst::retrieve_refs(&self.cognitions, &a.shortcomings_query, self.gateway.as_ref())
                        .unwrap_or_default();
                draft.analysis = Some(a.analysis_text);
                draft.shortcomings = Some(a.shortcomings_query);
            }
            Err(e) => {
                tracing::warn!(slot, "analysis failed: {e}");
                draft.needs_reanalysis = true;
            }
        }
        draft
    }
}
