use std::collections::BTreeMap;
use std::sync::Arc;

use evoarch_core::analytics::{classify_motivations, Classification, Taxonomy};
use evoarch_core::cognition::CognitionBase;
use evoarch_core::fitness::FitnessBreakdown;
use evoarch_core::gateway::{LlmGateway, Message, ProviderError, Responder, Task};
use evoarch_core::prompts::{fence, PromptSet};
use evoarch_core::store::{ArchitectureRecord, RecordDraft, RecordStatus, RecordStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{memory_store, metrics, DIM};

pub fn scored(name: &str, motivation: &str, r_loss: f64, r_bench: f64) -> RecordDraft {
    let mut d = RecordDraft::new(name, motivation, "class DeltaNet: pass");
    d.status = RecordStatus::Accepted;
    d.metrics = Some(metrics(1.0));
    d.fitness = Some(FitnessBreakdown::score(r_loss, r_bench, 5.0).unwrap());
    d
}

/// Replies with whatever `label=<word>` and `component=<word>` say in the motivation.
pub struct LabelReader;

impl Responder for LabelReader {
    fn respond(&self, _task: Task, messages: &[Message]) -> Result<String, ProviderError> {
        let text = &messages.last().unwrap().content;
        let grab = |key: &str| {
            text.split_whitespace()
                .find_map(|w| w.strip_prefix(key))
                .unwrap_or("")
                .replace('_', " ")
        };
        Ok(format!(
            "{}\n{}",
            fence("COMPONENTS", &grab("component=")),
            fence("PROVENANCE", &grab("label="))
        ))
    }
}

/// Gallery and non-gallery records with the given provenance counts, shuffled.
pub fn provenance_fixture(gallery: [usize; 3], rest: [usize; 3]) -> RecordStore {
    let store = memory_store();
    store.append_record(scored("delta_net", "baseline", 0.0, 0.0)).unwrap();
    let labels = ["cognition", "analysis", "original"];
    let mut plan = Vec::new();
    for (counts, in_gallery) in [(gallery, true), (rest, false)] {
        for (label, &n) in labels.iter().zip(&counts) {
            plan.extend(std::iter::repeat((*label, in_gallery)).take(n));
        }
    }
    plan.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    for (i, (label, g)) in plan.into_iter().enumerate() {
        let (rl, rb) = if g { (0.01, 0.02) } else { (0.01, -0.02) };
        let mut d = scored(&format!("r{i}"), &format!("idea {i} label={label} component=gating"), rl, rb);
        d.parent_id = Some(1);
        store.append_record(d).unwrap();
    }
    store
}

pub fn classify(store: &RecordStore) -> Vec<Classification> {
    let gateway = LlmGateway::mock(Arc::new(LabelReader), DIM);
    let archive = store.snapshot();
    let records: Vec<_> = archive.records().iter().skip(1).cloned().collect();
    classify_motivations(
        &gateway,
        &PromptSet::builtin(),
        &Taxonomy::builtin(),
        &archive,
        &CognitionBase::new(DIM),
        &gateway,
        &records,
    )
}

/// Gallery records every `1000 / 5.3` hours with filler runs in between.
pub fn linear_fixture() -> Vec<Arc<ArchitectureRecord>> {
    let store = memory_store();
    let period_hours = 1000.0 / 5.3;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..106 {
        let filler_hours = rng.gen_range(10.0..period_hours - 10.0);
        let mut f = RecordDraft::new(format!("f{k}"), format!("filler {k}"), "");
        f.status = RecordStatus::FailedTraining;
        f.wall_seconds = filler_hours * 3600.0;
        store.append_record(f).unwrap();
        let mut g = scored(&format!("g{k}"), &format!("win {k}"), 0.01, 0.01);
        g.wall_seconds = (period_hours - filler_hours) * 3600.0;
        store.append_record(g).unwrap();
    }
    store.snapshot().records().to_vec()
}

/// Connected components of an exported JSON tree, by union-find.
pub fn components(json: &str) -> usize {
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    let ids: Vec<u64> = v["nodes"].as_array().unwrap().iter().map(|n| n["id"].as_u64().unwrap()).collect();
    let mut parent: BTreeMap<u64, u64> = ids.iter().map(|&i| (i, i)).collect();
    fn find(p: &mut BTreeMap<u64, u64>, x: u64) -> u64 {
        let up = p[&x];
        if up == x {
            return x;
        }
        let r = find(p, up);
        p.insert(x, r);
        r
    }
    for e in v["edges"].as_array().unwrap() {
        let a = find(&mut parent, e["from"].as_u64().unwrap());
        let b = find(&mut parent, e["to"].as_u64().unwrap());
        parent.insert(a, b);
    }
    ids.iter().filter(|&&i| find(&mut parent, i) == i).count()
}
