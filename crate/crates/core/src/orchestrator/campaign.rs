use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cycle::{aborted, RoundView};
use super::{io_err, Engine, OrchestratorError, COST_FILE, SUMMARY_FILE};
use crate::pool::{maybe_rebuild, CandidatePoolSnapshot};
use crate::store::{Archive, RecordDraft, RecordId, RecordStatus, Stage};

/// Pool snapshots live in this subdirectory of the campaign.
pub const POOL_DIR: &str = "pool";
/// One JSON line per rebuild, full snapshot included.
pub const REBUILD_LOG: &str = "rebuilds.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxAccepted,
    MaxCycles,
    MaxComputeHours,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebuildEvent {
    pub snapshot_id: u64,
    pub built_at_count: usize,
    /// Id of the record whose append triggered the rebuild.
    pub after_record: RecordId,
    pub min_fitness: Option<f64>,
    pub mean_fitness: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RebuildLine {
    #[serde(flatten)]
    event: RebuildEvent,
    snapshot: CandidatePoolSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    /// Exploration cycles recorded so far, across resumes.
    pub cycles: u64,
    /// Outcome of every exploration cycle, keyed by status.
    pub status_counts: BTreeMap<String, usize>,
    /// Accepted exploration records, the baseline included.
    pub accepted_total: usize,
    pub records_total: usize,
    pub rebuilds: Vec<RebuildEvent>,
    pub compute_hours: f64,
    pub stop_reason: Option<StopReason>,
    /// Cycles whose worker panicked during this run.
    pub worker_faults: usize,
    /// Every cycle slot produced exactly one record.
    pub conserved: bool,
    pub llm_tokens: u64,
    pub elapsed_seconds: f64,
}

struct Progress {
    cycles: u64,
    next_slot: u64,
    accepted: usize,
    compute_hours: f64,
}

fn progress(archive: &Archive) -> Progress {
    let mut p = Progress {
        cycles: 0,
        next_slot: 0,
        accepted: archive.accepted_in(Stage::Exploration),
        compute_hours: 0.0,
    };
    for r in archive.records() {
        if r.body.stage != Stage::Exploration {
            continue;
        }
        if let Some(slot) = r.body.slot {
            p.cycles += 1;
            p.next_slot = p.next_slot.max(slot + 1);
            p.compute_hours += r.body.wall_seconds / 3600.0;
        }
    }
    p
}

impl Engine {
    fn pool_dir(&self) -> Option<std::path::PathBuf> {
        self.dir.as_ref().map(|d| d.join(POOL_DIR))
    }

    fn load_rebuilds(&self) -> Result<Vec<RebuildLine>, OrchestratorError> {
        let Some(dir) = self.pool_dir() else {
            return Ok(Vec::new());
        };
        let path = dir.join(REBUILD_LOG);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|source| OrchestratorError::Json {
                    context: path.display().to_string(),
                    source,
                })
            })
            .collect()
    }

    fn persist_rebuild(&self, line: &RebuildLine) -> Result<(), OrchestratorError> {
        let Some(dir) = self.pool_dir() else {
            return Ok(());
        };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let tsv = dir.join(format!("snapshot_{}.tsv", line.snapshot.snapshot_id));
        fs::write(&tsv, line.snapshot.to_tsv()).map_err(io_err(&tsv))?;
        let log = dir.join(REBUILD_LOG);
        let json = serde_json::to_string(line).map_err(|source| OrchestratorError::Json {
            context: REBUILD_LOG.into(),
            source,
        })?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .map_err(io_err(&log))?;
        writeln!(f, "{json}").map_err(io_err(&log))
    }

    fn check_rebuild(
        &self,
        pool: &mut Option<Arc<CandidatePoolSnapshot>>,
        events: &mut Vec<RebuildEvent>,
        after_record: RecordId,
    ) -> Result<(), OrchestratorError> {
        let policy = self.config.pool;
        let Some(snap) = self.store.read(|a| maybe_rebuild(&policy, a, pool.as_deref())) else {
            return Ok(());
        };
        let event = RebuildEvent {
            snapshot_id: snap.snapshot_id,
            built_at_count: snap.built_at_count,
            after_record,
            min_fitness: snap.min_fitness(),
            mean_fitness: snap.mean_fitness(),
        };
        tracing::info!(
            snapshot = event.snapshot_id,
            accepted = event.built_at_count,
            min_fitness = event.min_fitness,
            "rebuilt candidate pool"
        );
        let line = RebuildLine {
            event: event.clone(),
            snapshot: snap,
        };
        self.persist_rebuild(&line)?;
        events.push(event);
        *pool = Some(Arc::new(line.snapshot));
        Ok(())
    }

    /// Run every slot of one round, `workers` at a time. The output is in
    /// slot order together with the number of panicked cycles.
    pub(crate) fn run_round<F>(&self, slots: &[u64], cycle: F) -> (Vec<RecordDraft>, usize)
    where
        F: Fn(u64) -> RecordDraft + Sync,
    {
        let next = AtomicUsize::new(0);
        let faults = AtomicUsize::new(0);
        let out: Mutex<Vec<Option<RecordDraft>>> = Mutex::new(vec![None; slots.len()]);
        let workers = self.config.workers.min(slots.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&slot) = slots.get(i) else {
                        break;
                    };
                    let draft = catch_unwind(AssertUnwindSafe(|| cycle(slot))).unwrap_or_else(|payload| {
                        faults.fetch_add(1, Ordering::Relaxed);
                        let msg = payload
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "unknown panic".into());
                        aborted(slot, None, format!("worker fault: {msg}"))
                    });
                    out.lock().expect("round results")[i] = Some(draft);
                });
            }
        });
        let drafts = out
            .into_inner()
            .expect("round results")
            .into_iter()
            .zip(slots)
            .map(|(d, &slot)| d.unwrap_or_else(|| aborted(slot, None, "cycle produced no result".into())))
            .collect();
        (drafts, faults.into_inner())
    }

    /// Append `draft`, or an aborted stand-in if the store refuses it.
    pub(crate) fn append_or_abort(&self, draft: RecordDraft) -> Result<RecordId, OrchestratorError> {
        let slot = draft.slot.unwrap_or(0);
        let parent = draft.parent_id;
        let stage = draft.stage;
        let promoted = draft.promoted_from;
        match self.store.append_record(draft) {
            Ok(id) => Ok(id),
            Err(e) => {
                tracing::error!(slot, "record rejected by the store: {e}");
                let mut d = aborted(slot, None, format!("record could not be stored: {e}"));
                d.parent_id = parent.filter(|&p| self.store.get(p).is_some());
                d.stage = stage;
                d.promoted_from = promoted;
                Ok(self.store.append_record(d)?)
            }
        }
    }

    fn stop_reason(&self, p: &Progress) -> Option<StopReason> {
        let s = &self.config.stop;
        if s.max_accepted.is_some_and(|m| p.accepted >= m) {
            return Some(StopReason::MaxAccepted);
        }
        if s.max_cycles.is_some_and(|m| p.cycles >= m) {
            return Some(StopReason::MaxCycles);
        }
        if s.max_compute_hours.is_some_and(|m| p.compute_hours >= m) {
            return Some(StopReason::MaxComputeHours);
        }
        None
    }

    /// Run exploration cycles until a stop condition holds. Resumes from
    /// whatever the store and pool log already contain.
    pub fn run_campaign(&self) -> Result<CampaignSummary, OrchestratorError> {
        let started = Instant::now();
        let baseline = self.baseline(Stage::Exploration)?;
        let lines = self.load_rebuilds()?;
        let mut rebuilds: Vec<RebuildEvent> = lines.iter().map(|l| l.event.clone()).collect();
        let mut pool = lines.into_iter().last().map(|l| Arc::new(l.snapshot));
        self.check_rebuild(&mut pool, &mut rebuilds, self.store.len() as RecordId)?;
        let mut faults = 0;
        let stop = loop {
            let p = self.store.read(progress);
            if let Some(reason) = self.stop_reason(&p) {
                break reason;
            }
            let mut n = self.config.round_size as u64;
            if let Some(m) = self.config.stop.max_accepted {
                n = n.min((m - p.accepted) as u64);
            }
            if let Some(m) = self.config.stop.max_cycles {
                n = n.min(m - p.cycles);
            }
            let slots: Vec<u64> = (p.next_slot..p.next_slot + n).collect();
            let view = RoundView {
                archive: self.store.snapshot(),
                pool: pool.clone(),
                baseline: baseline.clone(),
            };
            let (drafts, f) = self.run_round(&slots, |slot| self.run_cycle(&view, slot));
            faults += f;
            for draft in drafts {
                let id = self.append_or_abort(draft)?;
                self.check_rebuild(&mut pool, &mut rebuilds, id)?;
            }
            tracing::info!(
                cycles = p.cycles + n,
                accepted = self.store.read(|a| a.accepted_in(Stage::Exploration)),
                "round complete"
            );
        };
        let summary = self.summarize(rebuilds, Some(stop), faults, started);
        self.write_json(SUMMARY_FILE, &summary)?;
        self.write_json(COST_FILE, &self.gateway.ledger())?;
        Ok(summary)
    }

    fn summarize(
        &self,
        rebuilds: Vec<RebuildEvent>,
        stop_reason: Option<StopReason>,
        worker_faults: usize,
        started: Instant,
    ) -> CampaignSummary {
        self.store.read(|a| {
            let p = progress(a);
            let mut status_counts: BTreeMap<String, usize> =
                RecordStatus::ALL.iter().map(|s| (s.as_str().to_string(), 0)).collect();
            let mut slots = std::collections::BTreeSet::new();
            let mut duplicate_slot = false;
            for r in a.records() {
                if r.body.stage != Stage::Exploration {
                    continue;
                }
                if let Some(slot) = r.body.slot {
                    *status_counts.entry(r.body.status.as_str().to_string()).or_default() += 1;
                    duplicate_slot |= !slots.insert(slot);
                }
            }
            let counted: usize = status_counts.values().sum();
            let contiguous = slots.iter().copied().eq(0..p.next_slot);
            CampaignSummary {
                cycles: p.cycles,
                status_counts,
                accepted_total: p.accepted,
                records_total: a.len(),
                rebuilds,
                compute_hours: p.compute_hours,
                stop_reason,
                worker_faults,
                conserved: !duplicate_slot && contiguous && counted as u64 == p.cycles,
                llm_tokens: self.gateway.ledger().total_tokens(),
                elapsed_seconds: started.elapsed().as_secs_f64(),
            }
        })
    }

    /// Summary of the stored campaign without running anything.
    pub fn summary(&self) -> Result<CampaignSummary, OrchestratorError> {
        let rebuilds = self.load_rebuilds()?.into_iter().map(|l| l.event).collect();
        Ok(self.summarize(rebuilds, None, 0, Instant::now()))
    }
}
