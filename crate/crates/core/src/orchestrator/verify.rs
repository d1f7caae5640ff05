use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{slot_seed, Engine, OrchestratorError};
use crate::store::{Archive, ArchitectureRecord, RecordDraft, RecordId, RecordStatus, Stage};

/// Salt separating verification seeds from exploration slot seeds.
const VERIFY_SALT: u64 = 0x7665_7269_6679;

/// Accepted exploration records that beat the baseline on loss and benchmarks.
pub fn promote_to_verification(archive: &Archive) -> Vec<Arc<ArchitectureRecord>> {
    archive
        .records()
        .iter()
        .filter(|r| {
            r.body.stage == Stage::Exploration
                && r.is_accepted()
                && r.body.fitness.as_ref().is_some_and(|f| f.beats_baseline_on_both())
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SotaEntry {
    pub record_id: RecordId,
    pub promoted_from: RecordId,
    pub name: String,
    pub composite: f64,
    pub r_loss: f64,
    pub r_bench: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    /// Exploration records eligible for promotion.
    pub eligible: usize,
    /// Eligible records verified in earlier runs.
    pub already_verified: usize,
    /// Verification runs made by this call.
    pub evaluated: usize,
    pub status_counts: BTreeMap<String, usize>,
    /// Verification records that beat the verification baseline on both axes, best first.
    pub sota: Vec<SotaEntry>,
}

impl Engine {
    /// Re-train every promotable exploration record at verification scale.
    ///
    /// Runs `round_size` candidates at a time; records already verified are
    /// skipped, so the call can be repeated after an interruption.
    pub fn run_verification(&self, limit: Option<usize>) -> Result<VerificationSummary, OrchestratorError> {
        self.seed_baseline(Stage::Verification)?;
        let baseline = self.baseline(Stage::Verification)?;
        let base_metrics = baseline
            .body
            .metrics
            .clone()
            .ok_or_else(|| OrchestratorError::Baseline("verification baseline has no metrics".into()))?;
        let archive = self.store.snapshot();
        let eligible = promote_to_verification(&archive);
        let done: BTreeSet<RecordId> = archive
            .records()
            .iter()
            .filter_map(|r| r.body.promoted_from)
            .collect();
        let pending: Vec<_> = eligible
            .iter()
            .filter(|r| !done.contains(&r.record_id))
            .take(limit.unwrap_or(usize::MAX))
            .cloned()
            .collect();
        let stage = &self.config.verification;
        let mut evaluated = 0;
        for chunk in pending.chunks(self.config.round_size) {
            let history = self.store.read(|a| a.recent_train_seconds(Stage::Verification, stage.history_window));
            let ids: Vec<u64> = chunk.iter().map(|r| r.record_id).collect();
            let (drafts, _) = self.run_round(&ids, |id| {
                let source = chunk
                    .iter()
                    .find(|r| r.record_id == id)
                    .expect("chunk member");
                let b = &source.body;
                let mut draft = RecordDraft::new(&b.name, &b.motivation, &b.code);
                draft.stage = Stage::Verification;
                draft.promoted_from = Some(id);
                draft.slot = Some(id);
                draft.cognition_refs = b.cognition_refs.clone();
                let seed = slot_seed(self.config.seed ^ VERIFY_SALT, id);
                match self.train(stage, &history, &base_metrics, &b.name, &b.motivation, &b.code, seed) {
                    Ok(t) => self.score(draft, t, &baseline),
                    Err(e) => {
                        draft.status = RecordStatus::Aborted;
                        draft.note = Some(format!("training harness failed: {e}"));
                        draft
                    }
                }
            });
            for d in drafts {
                self.append_or_abort(d)?;
                evaluated += 1;
            }
            tracing::info!(evaluated, pending = pending.len(), "verification round complete");
        }
        let summary = self.store.read(|a| {
            let mut status_counts: BTreeMap<String, usize> =
                RecordStatus::ALL.iter().map(|s| (s.as_str().to_string(), 0)).collect();
            let mut sota = Vec::new();
            for r in a.records() {
                let Some(from) = r.body.promoted_from else {
                    continue;
                };
                *status_counts.entry(r.body.status.as_str().to_string()).or_default() += 1;
                if let Some(f) = r.body.fitness.as_ref().filter(|f| r.is_accepted() && f.beats_baseline_on_both()) {
                    sota.push(SotaEntry {
                        record_id: r.record_id,
                        promoted_from: from,
                        name: r.body.name.clone(),
                        composite: f.composite,
                        r_loss: f.r_loss,
                        r_bench: f.r_bench,
                    });
                }
            }
            sota.sort_by(|x, y| y.composite.total_cmp(&x.composite).then(x.record_id.cmp(&y.record_id)));
            VerificationSummary {
                eligible: eligible.len(),
                already_verified: eligible.iter().filter(|r| done.contains(&r.record_id)).count(),
                evaluated,
                status_counts,
                sota,
            }
        });
        self.write_json("verification.json", &summary)?;
        Ok(summary)
    }
}
