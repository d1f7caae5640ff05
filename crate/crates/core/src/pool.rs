//! Ranked candidate pool, its rebuild schedule, and two-tier seed sampling.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::store::{Archive, RecordId, Stage};

/// When to rebuild and how large the pool is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolPolicy {
    /// Accepted records needed before the first snapshot.
    pub cold_start: usize,
    /// New accepted records between rebuilds.
    pub rebuild_batch: usize,
    pub size: usize,
    /// Parents are drawn from ranks `1..=parent_ranks`.
    pub parent_ranks: usize,
    pub references: usize,
}

impl Default for PoolPolicy {
    fn default() -> Self {
        Self {
            cold_start: 200,
            rebuild_batch: 50,
            size: 50,
            parent_ranks: 10,
            references: 4,
        }
    }
}

impl PoolPolicy {
    pub fn should_rebuild(&self, accepted_count: usize, current: Option<&CandidatePoolSnapshot>) -> bool {
        match current {
            None => accepted_count >= self.cold_start,
            Some(s) => accepted_count.saturating_sub(s.built_at_count) >= self.rebuild_batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub record_id: RecordId,
    pub fitness: f64,
}

/// Immutable ranked view of the best accepted exploration records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoolSnapshot {
    pub snapshot_id: u64,
    pub built_at_count: usize,
    /// Rank 1 first.
    pub entries: Vec<PoolEntry>,
}

impl CandidatePoolSnapshot {
    pub fn build(archive: &Archive, size: usize, snapshot_id: u64) -> Self {
        let entries = archive
            .top_by_fitness_in(Stage::Exploration, size)
            .iter()
            .map(|r| PoolEntry {
                record_id: r.record_id,
                fitness: r.composite().unwrap_or(f64::NAN),
            })
            .collect();
        Self {
            snapshot_id,
            built_at_count: archive.accepted_in(Stage::Exploration),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn min_fitness(&self) -> Option<f64> {
        self.entries.last().map(|e| e.fitness)
    }

    pub fn mean_fitness(&self) -> Option<f64> {
        (!self.entries.is_empty())
            .then(|| self.entries.iter().map(|e| e.fitness).sum::<f64>() / self.entries.len() as f64)
    }

    /// Tab-separated `rank`, `record_id`, `fitness`, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\trecord_id\tfitness\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{:.6}", i + 1, e.record_id, e.fitness);
        }
        out
    }
}

/// A new snapshot if the policy calls for one at the archive's accepted count.
pub fn maybe_rebuild(
    policy: &PoolPolicy,
    archive: &Archive,
    current: Option<&CandidatePoolSnapshot>,
) -> Option<CandidatePoolSnapshot> {
    if !policy.should_rebuild(archive.accepted_in(Stage::Exploration), current) {
        return None;
    }
    let next_id = current.map_or(1, |s| s.snapshot_id + 1);
    Some(CandidatePoolSnapshot::build(archive, policy.size, next_id))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub parent: RecordId,
    pub references: Vec<RecordId>,
}

/// Parent uniform over the top tier, references uniform without replacement
/// over the ranks after it.
///
/// With fewer than `parent_ranks + references` entries the reference tier
/// shrinks to whatever follows the top tier. When nothing follows it, the
/// references come from the top-tier entries other than the parent.
pub fn sample_seed(policy: &PoolPolicy, snapshot: &CandidatePoolSnapshot, rng_seed: u64) -> Option<Seed> {
    let n = snapshot.len();
    if n == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let top = policy.parent_ranks.min(n);
    let parent_rank = rng.gen_range(0..top);
    let tier: Vec<usize> = if n > top {
        (top..n).collect()
    } else {
        (0..n).filter(|&i| i != parent_rank).collect()
    };
    let count = policy.references.min(tier.len());
    let references = index::sample(&mut rng, tier.len(), count)
        .into_iter()
        .map(|i| snapshot.entries[tier[i]].record_id)
        .collect();
    Some(Seed {
        parent: snapshot.entries[parent_rank].record_id,
        references,
    })
}

/// Seed used before the first snapshot: the baseline as parent and up to
/// `policy.references` distinct earlier accepted records as references.
pub fn cold_start_seed(policy: &PoolPolicy, archive: &Archive, baseline: RecordId, rng_seed: u64) -> Seed {
    let pool: Vec<RecordId> = archive
        .records()
        .iter()
        .filter(|r| r.is_accepted() && r.body.stage == Stage::Exploration && r.record_id != baseline)
        .map(|r| r.record_id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let count = policy.references.min(pool.len());
    let mut references: Vec<RecordId> = index::sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    references.sort_unstable();
    Seed {
        parent: baseline,
        references,
    }
}
