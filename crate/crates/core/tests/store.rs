mod common;

use std::sync::Arc;

use common::{accepted, embedder, header, memory_store};
use evoarch_core::gateway::HashEmbedder;
use evoarch_core::store::{
    decode_record_line, encode_record_line, ArchitectureRecord, RecordDraft, RecordStatus, RecordStore, Stage,
    StoreError, StoreOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ids_start_at_one_and_increase() {
    let s = memory_store();
    assert_eq!(s.append_record(accepted("a", "first idea", 0.5)).unwrap(), 1);
    assert_eq!(s.append_record(accepted("b", "second idea", 0.5)).unwrap(), 2);
    assert_eq!(s.len(), 2);
}

#[test]
fn dangling_parent_is_rejected_without_trace() {
    let s = memory_store();
    s.append_record(accepted("a", "first idea", 0.5)).unwrap();
    let mut d = accepted("b", "orphan", 0.5);
    d.parent_id = Some(999);
    assert!(matches!(s.append_record(d), Err(StoreError::DanglingParent { parent: 999, .. })));
    assert_eq!(s.len(), 1);
    assert_eq!(s.read(|a| a.motivation_index().len()), 1);
}

#[test]
fn accepted_records_need_fitness_and_metrics() {
    let s = memory_store();
    let mut d = accepted("a", "idea", 0.5);
    d.fitness = None;
    assert!(matches!(s.append_record(d), Err(StoreError::Validation(_))));
    let mut d = RecordDraft::new("b", "idea", "");
    d.status = RecordStatus::FailedTraining;
    s.append_record(d).unwrap();
}

#[test]
fn full_campaign_log_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let options = StoreOptions { sync: false };
    let dump = {
        let s = RecordStore::create(dir.path(), header(), embedder(), options).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 1..=1773u64 {
            let mut d = accepted(&format!("delta_net_n{i}"), &format!("idea number {i} about gating"), rng.gen());
            if i > 1 {
                d.parent_id = Some(rng.gen_range(1..i));
            }
            if i % 7 == 0 {
                d.status = RecordStatus::RejectedNovelty;
                d.fitness = None;
            }
            s.append_record(d).unwrap();
        }
        s.set_baseline(Stage::Exploration, 1).unwrap();
        s.dump_jsonl().unwrap()
    };
    let s = RecordStore::open(dir.path(), embedder(), options).unwrap();
    assert_eq!(s.len(), 1773);
    assert_eq!(s.dump_jsonl().unwrap(), dump);
    assert_eq!(s.baseline(Stage::Exploration).unwrap().record_id, 1);
    assert_eq!(s.read(|a| a.motivation_index().len()), 1773);
    assert_eq!(s.append_record(accepted("next", "one more", 0.1)).unwrap(), 1774);
}

#[test]
fn reopen_with_other_dimension_fails() {
    let dir = tempfile::tempdir().unwrap();
    let options = StoreOptions { sync: false };
    RecordStore::create(dir.path(), header(), embedder(), options).unwrap();
    let other = Arc::new(HashEmbedder::new(common::DIM + 1));
    assert!(matches!(
        RecordStore::open(dir.path(), other, options),
        Err(StoreError::DimensionMismatch { .. })
    ));
}

#[test]
fn nearest_motivation_finds_exact_repeat() {
    let s = memory_store();
    for (i, m) in [
        "gate the state with a learned decay",
        "add a short convolution to keys",
        "normalize the read-out per head",
    ]
    .iter()
    .enumerate()
    {
        s.append_record(accepted(&format!("r{i}"), m, 0.5)).unwrap();
    }
    let q = s.embedder().embed("add a short convolution to keys").unwrap();
    let hits = s.nearest_motivations(&q, 2).unwrap();
    assert_eq!(hits[0].0, 2);
    assert!((hits[0].1 - 1.0).abs() < 1e-12);
    assert_eq!(hits.len(), 2);
}

#[test]
fn lineage_walks_to_the_root() {
    let s = memory_store();
    s.append_record(accepted("root", "root idea", 0.5)).unwrap();
    for (name, parent) in [("a", 1), ("b", 2), ("c", 2), ("d", 2)] {
        let mut d = accepted(name, &format!("idea {name}"), 0.5);
        d.parent_id = Some(parent);
        s.append_record(d).unwrap();
    }
    let l = s.lineage(4).unwrap();
    assert_eq!(l.ancestors, vec![1, 2]);
    assert_eq!(l.siblings, vec![3, 5]);
    assert!(s.lineage(1).unwrap().ancestors.is_empty());
    assert!(matches!(s.lineage(42), Err(StoreError::NotFound(42))));
}

#[test]
fn top_by_fitness_breaks_ties_by_id() {
    let s = memory_store();
    for (i, f) in [0.6, 0.7, 0.6, 0.7, 0.5].iter().enumerate() {
        s.append_record(accepted(&format!("r{i}"), &format!("m{i}"), *f)).unwrap();
    }
    let ids: Vec<u64> = s.top_by_fitness(4).iter().map(|r| r.record_id).collect();
    assert_eq!(ids, vec![2, 4, 1, 3]);
}

#[test]
fn top_by_fitness_matches_sort_oracle() {
    let s = memory_store();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut oracle = Vec::new();
    for i in 1..=300u64 {
        // Coarse values force ties.
        let f = (rng.gen_range(0..40) as f64) / 40.0;
        let mut d = accepted(&format!("r{i}"), &format!("motivation {i}"), f);
        if i % 5 == 0 {
            d.status = RecordStatus::FailedTraining;
            d.fitness = None;
            d.metrics = None;
        } else {
            oracle.push((f, i));
        }
        s.append_record(d).unwrap();
    }
    oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let got: Vec<u64> = s.top_by_fitness(50).iter().map(|r| r.record_id).collect();
    let want: Vec<u64> = oracle.iter().take(50).map(|x| x.1).collect();
    assert_eq!(got, want);
}

#[test]
fn concurrent_writers_get_unique_contiguous_ids() {
    let s = Arc::new(memory_store());
    std::thread::scope(|scope| {
        for t in 0..8 {
            let s = s.clone();
            scope.spawn(move || {
                for i in 0..50 {
                    s.append_record(accepted(&format!("t{t}_{i}"), &format!("writer {t} idea {i}"), 0.5))
                        .unwrap();
                }
            });
        }
    });
    let ids: Vec<u64> = s.read(|a| a.records().iter().map(|r| r.record_id).collect());
    assert_eq!(ids, (1..=400).collect::<Vec<_>>());
    assert_eq!(s.accepted_count(), 400);
}

fn arb_draft() -> impl Strategy<Value = RecordDraft> {
    (
        "[a-z_]{1,12}",
        "[ -~]{0,80}",
        "[ -~\n]{0,120}",
        prop::option::of(0.0f64..1e6),
        0u32..5,
        prop::option::of("[ -~]{0,40}"),
    )
        .prop_map(|(name, motivation, code, train, attempts, note)| {
            let mut d = RecordDraft::new(name, motivation, code);
            d.status = RecordStatus::RejectedSanity;
            d.train_seconds = train;
            d.proposal_attempts = attempts;
            d.note = note;
            d
        })
}

proptest! {
    #[test]
    fn record_lines_round_trip(draft in arb_draft(), id in 1u64..1_000_000) {
        let rec = ArchitectureRecord { record_id: id, created_seq: id, body: draft };
        let line = encode_record_line(&rec).unwrap();
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(decode_record_line(&line).unwrap(), rec);
    }
}
