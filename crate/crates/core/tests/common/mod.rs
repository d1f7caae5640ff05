#![allow(dead_code)]

pub mod fixtures;

use std::sync::Arc;

use evoarch_core::embedding::TextEmbedder;
use evoarch_core::fitness::FitnessBreakdown;
use evoarch_core::gateway::HashEmbedder;
use evoarch_core::reference;
use evoarch_core::store::{CampaignHeader, MetricsReport, RecordDraft, RecordStatus, RecordStore};

pub const DIM: usize = 64;

pub fn embedder() -> Arc<dyn TextEmbedder> {
    Arc::new(HashEmbedder::new(DIM))
}

pub fn header() -> CampaignHeader {
    CampaignHeader::new(DIM, reference::task_set())
}

pub fn memory_store() -> RecordStore {
    RecordStore::in_memory(header(), embedder()).unwrap()
}

/// Baseline metrics with the final loss scaled by `loss_factor`.
pub fn metrics(loss_factor: f64) -> MetricsReport {
    let base = reference::delta_net();
    let curve = base.loss_curve.iter().map(|&(s, l)| (s, l * loss_factor)).collect();
    MetricsReport::new(curve, base.benchmark_scores.clone()).unwrap()
}

pub fn accepted(name: &str, motivation: &str, composite_hint: f64) -> RecordDraft {
    let mut d = RecordDraft::new(name, motivation, "class DeltaNet: pass");
    d.status = RecordStatus::Accepted;
    d.metrics = Some(metrics(1.0));
    let mut f = FitnessBreakdown::score(0.0, 0.0, 5.0).unwrap();
    f.composite = composite_hint;
    d.fitness = Some(f);
    d.wall_seconds = 3600.0;
    d
}
