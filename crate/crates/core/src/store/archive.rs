use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use super::record::{ArchitectureRecord, RecordId, RecordStatus, Stage};
use super::StoreError;
use crate::embedding::{self, UnitVector};

/// A motivation vector in the similarity index, flagged by the record's status.
#[derive(Debug, Clone)]
pub struct IndexedMotivation {
    pub record_id: RecordId,
    pub status: RecordStatus,
    pub vector: UnitVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lineage {
    /// Root first, immediate parent last.
    pub ancestors: Vec<RecordId>,
    /// Other children of the same parent, ascending id. Roots have no siblings.
    pub siblings: Vec<RecordId>,
}

/// Immutable-after-clone view of every record plus derived indexes.
///
/// The store keeps one of these behind a lock and hands out clones as
/// snapshots; all queries live here so live reads and snapshots agree.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    records: Vec<Arc<ArchitectureRecord>>,
    children: HashMap<RecordId, Vec<RecordId>>,
    motivations: Vec<IndexedMotivation>,
    accepted: usize,
    accepted_exploration: usize,
}

impl Archive {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted
    }

    /// Accepted records of `stage`.
    pub fn accepted_in(&self, stage: Stage) -> usize {
        match stage {
            Stage::Exploration => self.accepted_exploration,
            Stage::Verification => self.accepted - self.accepted_exploration,
        }
    }

    pub fn next_id(&self) -> RecordId {
        self.records.len() as RecordId + 1
    }

    pub fn records(&self) -> &[Arc<ArchitectureRecord>] {
        &self.records
    }

    pub fn get(&self, id: RecordId) -> Option<&Arc<ArchitectureRecord>> {
        let idx = usize::try_from(id).ok()?.checked_sub(1)?;
        self.records.get(idx)
    }

    pub fn require(&self, id: RecordId) -> Result<&Arc<ArchitectureRecord>, StoreError> {
        self.get(id).ok_or(StoreError::NotFound(id))
    }

    pub fn motivation_index(&self) -> &[IndexedMotivation] {
        &self.motivations
    }

    pub fn motivation_vector(&self, id: RecordId) -> Option<&UnitVector> {
        // Index entries are pushed in id order.
        let pos = self
            .motivations
            .binary_search_by_key(&id, |m| m.record_id)
            .ok()?;
        Some(&self.motivations[pos].vector)
    }

    pub(crate) fn push(&mut self, record: ArchitectureRecord, vector: Option<UnitVector>) {
        let rec = Arc::new(record);
        if let Some(p) = rec.body.parent_id {
            self.children.entry(p).or_default().push(rec.record_id);
        }
        if rec.is_accepted() {
            self.accepted += 1;
            if rec.body.stage == Stage::Exploration {
                self.accepted_exploration += 1;
            }
        }
        if let Some(vector) = vector {
            self.motivations.push(IndexedMotivation {
                record_id: rec.record_id,
                status: rec.body.status,
                vector,
            });
        }
        self.records.push(rec);
    }

    /// Cosine top-k over every indexed motivation.
    pub fn nearest_motivations(
        &self,
        query: &UnitVector,
        k: usize,
    ) -> Result<Vec<(RecordId, f64)>, StoreError> {
        self.nearest_motivations_where(query, k, |_| true)
    }

    pub fn nearest_motivations_where(
        &self,
        query: &UnitVector,
        k: usize,
        keep: impl Fn(RecordStatus) -> bool,
    ) -> Result<Vec<(RecordId, f64)>, StoreError> {
        let candidates = self
            .motivations
            .iter()
            .filter(|m| keep(m.status))
            .map(|m| (m.record_id, &m.vector));
        Ok(embedding::top_k(query, candidates, k)?)
    }

    pub fn children_of(&self, id: RecordId) -> &[RecordId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn lineage(&self, id: RecordId) -> Result<Lineage, StoreError> {
        let rec = self.require(id)?;
        let mut ancestors = Vec::new();
        let mut cursor = rec.body.parent_id;
        while let Some(p) = cursor {
            ancestors.push(p);
            cursor = self.require(p)?.body.parent_id;
        }
        ancestors.reverse();
        let siblings = match rec.body.parent_id {
            Some(p) => self
                .children_of(p)
                .iter()
                .copied()
                .filter(|&c| c != id)
                .collect(),
            None => Vec::new(),
        };
        Ok(Lineage {
            ancestors,
            siblings,
        })
    }

    /// Accepted records, descending composite fitness, ties by smaller id.
    pub fn top_by_fitness(&self, n: usize) -> Vec<Arc<ArchitectureRecord>> {
        self.top_where(n, |_| true)
    }

    /// [`Archive::top_by_fitness`] restricted to one stage.
    pub fn top_by_fitness_in(&self, stage: Stage, n: usize) -> Vec<Arc<ArchitectureRecord>> {
        self.top_where(n, |r| r.body.stage == stage)
    }

    fn top_where(&self, n: usize, keep: impl Fn(&ArchitectureRecord) -> bool) -> Vec<Arc<ArchitectureRecord>> {
        let mut accepted: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.is_accepted() && r.body.fitness.is_some() && keep(r))
            .cloned()
            .collect();
        accepted.sort_by(|a, b| fitness_order(a, b));
        accepted.truncate(n);
        accepted
    }

    /// Wall seconds of the last `n` successful training runs in `stage`, oldest first.
    pub fn recent_train_seconds(&self, stage: Stage, n: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .records
            .iter()
            .rev()
            .filter(|r| r.body.stage == stage)
            .filter_map(|r| r.body.train_seconds)
            .take(n)
            .collect();
        out.reverse();
        out
    }
}

pub(crate) fn fitness_order(a: &ArchitectureRecord, b: &ArchitectureRecord) -> Ordering {
    let fa = a.composite().unwrap_or(f64::NEG_INFINITY);
    let fb = b.composite().unwrap_or(f64::NEG_INFINITY);
    fb.partial_cmp(&fa)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.record_id.cmp(&b.record_id))
}
