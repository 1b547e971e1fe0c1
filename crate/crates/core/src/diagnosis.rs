//! Transductive diagnosis: a new case takes the majority label of its k
//! nearest stored neighbors.
//!
//! Unlabeled neighbors are kept in the neighbor list but cast no vote.
//! A vote tie goes to the tied class that appears earliest in the
//! neighbor ranking; the lowest class index is the final fallback.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::fusion::{fuse_average, FusionConfig, FusionError};
use crate::hashing::{sign_quantize_bits, HashCode, HashError};
use crate::index::{
    knn_ball_tree_filtered, BallTreeIndex, IndexError, RankedNeighbors,
};
use crate::model::{CaseStore, Label, LesionRecord, MultiViewScene};

/// Default neighborhood size for diagnosis.
pub const DEFAULT_K: usize = 6;

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("store fails validation ({count} violations; first: {first})")]
    StoreInvalid { count: usize, first: String },
    #[error("store has no label space")]
    NoLabelSpace,
    #[error("diagnosis needs at least two classes, store declares {num_classes}")]
    InvalidClassCount { num_classes: usize },
    #[error("no labeled neighbors to vote with")]
    NoLabeledEvidence,
    #[error("exclusion removed every candidate")]
    EmptyCandidates,
    #[error("query has dimension {actual}, store expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("neighbor {record_id} carries class {label} outside the label space")]
    LabelOutOfRange { record_id: u64, label: i32 },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Outcome of a majority vote over retrieved neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    /// Winning class index.
    pub predicted_class: usize,
    /// Votes per class; sums to the number of labeled neighbors.
    pub class_votes: Vec<u32>,
    /// Votes normalized by the labeled-neighbor count.
    pub class_scores: Vec<f64>,
    /// The neighbors the vote was taken over, unlabeled ones included.
    pub neighbors: RankedNeighbors,
    /// Neighbors actually retrieved (may be below the requested k).
    pub k_used: usize,
}

/// Majority vote over a ranked neighbor list.
///
/// `lookup` maps a record id to its label; ids it cannot resolve count
/// as unlabeled.
pub fn majority_vote(
    neighbors: &RankedNeighbors,
    lookup: impl Fn(u64) -> Option<Label>,
    num_classes: usize,
) -> Result<Diagnosis, DiagnosisError> {
    if num_classes < 2 {
        return Err(DiagnosisError::InvalidClassCount { num_classes });
    }
    let mut votes = vec![0u32; num_classes];
    let mut total = 0u32;
    for entry in &neighbors.entries {
        let label = lookup(entry.record_id).unwrap_or(Label::UNLABELED);
        if let Some(class) = label.class_index() {
            if class >= num_classes {
                return Err(DiagnosisError::LabelOutOfRange {
                    record_id: entry.record_id,
                    label: label.raw(),
                });
            }
            votes[class] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(DiagnosisError::NoLabeledEvidence);
    }

    let max_votes = *votes.iter().max().expect("num_classes >= 2");
    let tied: Vec<usize> = (0..num_classes)
        .filter(|&c| votes[c] == max_votes)
        .collect();
    let predicted_class = if tied.len() == 1 {
        tied[0]
    } else {
        neighbors
            .entries
            .iter()
            .filter_map(|e| lookup(e.record_id).and_then(Label::class_index))
            .find(|c| tied.contains(c))
            .unwrap_or(tied[0])
    };

    let class_scores = votes.iter().map(|&v| v as f64 / total as f64).collect();
    Ok(Diagnosis {
        predicted_class,
        class_votes: votes,
        class_scores,
        neighbors: neighbors.clone(),
        k_used: neighbors.entries.len(),
    })
}

/// A validated store with its ball tree and id lookup, ready to serve
/// queries. This is the object the CLI and the HTTP service both load.
#[derive(Debug, Clone)]
pub struct CaseDatabase {
    store: CaseStore,
    index: BallTreeIndex,
    by_id: HashMap<u64, usize>,
}

impl CaseDatabase {
    /// Validates the store, builds the tree with the store's own
    /// parameters, and indexes record ids.
    pub fn build(store: CaseStore) -> Result<CaseDatabase, DiagnosisError> {
        let violations = store.validate();
        if let Some(first) = violations.first() {
            return Err(DiagnosisError::StoreInvalid {
                count: violations.len(),
                first: first.to_string(),
            });
        }
        let index = BallTreeIndex::from_store(&store)?;
        let by_id = store
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.record_id, i))
            .collect();
        Ok(CaseDatabase {
            store,
            index,
            by_id,
        })
    }

    pub fn store(&self) -> &CaseStore {
        &self.store
    }

    pub fn index(&self) -> &BallTreeIndex {
        &self.index
    }

    pub fn record(&self, record_id: u64) -> Option<&LesionRecord> {
        self.by_id
            .get(&record_id)
            .map(|&i| &self.store.records()[i])
    }

    pub fn label_of(&self, record_id: u64) -> Option<Label> {
        self.record(record_id).map(|r| r.label)
    }

    /// Ids of every record belonging to a polyp, in store order.
    pub fn record_ids_of_polyp(&self, polyp_id: u64) -> Vec<u64> {
        self.store
            .records()
            .iter()
            .filter(|r| r.polyp_id == polyp_id)
            .map(|r| r.record_id)
            .collect()
    }

    /// Quantizes query embedding values against this store: the
    /// dimension must match, and the leading `hash_bits` components
    /// become the code.
    pub fn quantize_query(&self, values: &[f64]) -> Result<HashCode, DiagnosisError> {
        if values.len() != self.store.dimension() {
            return Err(DiagnosisError::DimensionMismatch {
                expected: self.store.dimension(),
                actual: values.len(),
            });
        }
        Ok(sign_quantize_bits(values, self.store.hash_bits())?)
    }

    /// Exact k nearest stored neighbors of a code.
    pub fn retrieve(
        &self,
        code: &HashCode,
        k: usize,
        exclude: Option<&HashSet<u64>>,
    ) -> Result<RankedNeighbors, DiagnosisError> {
        let (neighbors, _) = knn_ball_tree_filtered(&self.index, code, k, exclude)?;
        if neighbors.entries.is_empty() {
            return Err(DiagnosisError::EmptyCandidates);
        }
        Ok(neighbors)
    }

    /// Retrieval plus vote. Errors if the store declares no label space
    /// or no labeled neighbor was retrieved.
    pub fn diagnose_code(
        &self,
        code: &HashCode,
        k: usize,
        exclude: Option<&HashSet<u64>>,
    ) -> Result<Diagnosis, DiagnosisError> {
        let neighbors = self.retrieve(code, k, exclude)?;
        let space = self
            .store
            .label_space()
            .ok_or(DiagnosisError::NoLabelSpace)?;
        majority_vote(
            &neighbors,
            |id| self.label_of(id),
            space.num_classes(),
        )
    }

    /// Diagnoses raw embedding values.
    pub fn diagnose_embedding(
        &self,
        values: &[f64],
        k: usize,
        exclude: Option<&HashSet<u64>>,
    ) -> Result<Diagnosis, DiagnosisError> {
        let code = self.quantize_query(values)?;
        self.diagnose_code(&code, k, exclude)
    }

    /// Fuses a multi-view scene and diagnoses the result.
    pub fn diagnose_scene(
        &self,
        scene: &MultiViewScene,
        fusion: FusionConfig,
        k: usize,
        exclude: Option<&HashSet<u64>>,
    ) -> Result<Diagnosis, DiagnosisError> {
        let fused = fuse_average(scene, fusion)?;
        self.diagnose_embedding(&fused.values, k, exclude)
    }

    /// Retrieval plus best-effort vote: stores without a label space or
    /// without labeled neighbors still answer with the neighbor list.
    pub fn query_embedding(
        &self,
        values: &[f64],
        k: usize,
        exclude: Option<&HashSet<u64>>,
    ) -> Result<(RankedNeighbors, Option<Diagnosis>), DiagnosisError> {
        let code = self.quantize_query(values)?;
        let neighbors = self.retrieve(&code, k, exclude)?;
        let diagnosis = match self.store.label_space() {
            None => None,
            Some(space) => {
                match majority_vote(&neighbors, |id| self.label_of(id), space.num_classes())
                {
                    Ok(d) => Some(d),
                    Err(DiagnosisError::NoLabeledEvidence) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        Ok((neighbors, diagnosis))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::sign_quantize_values;
    use crate::index::NeighborEntry;
    use crate::model::LabelSpace;

    fn neighbors_of(ids_dists: &[(u64, u32)]) -> RankedNeighbors {
        RankedNeighbors {
            entries: ids_dists
                .iter()
                .map(|&(record_id, distance)| NeighborEntry {
                    record_id,
                    distance,
                })
                .collect(),
            requested_k: ids_dists.len(),
        }
    }

    fn lookup_from(pairs: &[(u64, i32)]) -> impl Fn(u64) -> Option<Label> + '_ {
        move |id| {
            pairs
                .iter()
                .find(|(rid, _)| *rid == id)
                .map(|&(_, raw)| Label::from_raw(raw).unwrap())
        }
    }

    #[test]
    fn majority_counts_only_labeled_neighbors() {
        let neighbors =
            neighbors_of(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6)]);
        let labels = [(0, 1), (1, 1), (2, 0), (3, -1), (4, 0), (5, 1)];
        let d = majority_vote(&neighbors, lookup_from(&labels), 2).unwrap();
        assert_eq!(d.predicted_class, 1);
        assert_eq!(d.class_votes, vec![2, 3]);
        assert_eq!(d.class_scores, vec![0.4, 0.6]);
        assert_eq!(d.k_used, 6);
        assert_eq!(d.class_votes.iter().sum::<u32>(), 5);
    }

    #[test]
    fn vote_tie_goes_to_nearest_tied_class() {
        let neighbors = neighbors_of(&[(10, 1), (11, 2), (12, 3), (13, 4)]);
        // Class 1 and class 0 tie 2-2; the nearest neighbor is class 1.
        let labels = [(10, 1), (11, 0), (12, 1), (13, 0)];
        let d = majority_vote(&neighbors, lookup_from(&labels), 2).unwrap();
        assert_eq!(d.predicted_class, 1);

        // Nearest neighbor unlabeled: the next labeled one decides.
        let neighbors = neighbors_of(&[(20, 1), (21, 2), (22, 3), (23, 4), (24, 5)]);
        let labels = [(20, -1), (21, 0), (22, 1), (23, 1), (24, 0)];
        let d = majority_vote(&neighbors, lookup_from(&labels), 2).unwrap();
        assert_eq!(d.predicted_class, 0);
    }

    #[test]
    fn unresolvable_ids_count_as_unlabeled() {
        let neighbors = neighbors_of(&[(1, 1), (99, 2)]);
        let labels = [(1, 0)];
        let d = majority_vote(&neighbors, lookup_from(&labels), 2).unwrap();
        assert_eq!(d.class_votes, vec![1, 0]);
    }

    #[test]
    fn vote_rejects_degenerate_inputs() {
        let neighbors = neighbors_of(&[(0, 1)]);
        assert!(matches!(
            majority_vote(&neighbors, |_| Some(Label::UNLABELED), 2),
            Err(DiagnosisError::NoLabeledEvidence)
        ));
        assert!(matches!(
            majority_vote(&neighbors, |_| Some(Label::class(0)), 1),
            Err(DiagnosisError::InvalidClassCount { num_classes: 1 })
        ));
        assert!(matches!(
            majority_vote(&neighbors, |_| Some(Label::class(5)), 2),
            Err(DiagnosisError::LabelOutOfRange { record_id: 0, .. })
        ));
    }

    fn toy_database(labels: &[i32]) -> CaseDatabase {
        // Codes on an 8-bit line so distances are easy to reason about.
        let mut store = CaseStore::new(8, 8)
            .with_label_space(Some(LabelSpace::new(2).unwrap()));
        for (i, &raw) in labels.iter().enumerate() {
            let values: Vec<f64> = (0..8)
                .map(|b| if b <= i { 1.0 } else { -1.0 })
                .collect();
            store
                .push(LesionRecord {
                    record_id: i as u64,
                    polyp_id: i as u64,
                    code: sign_quantize_values(&values).unwrap(),
                    label: Label::from_raw(raw).unwrap(),
                })
                .unwrap();
        }
        CaseDatabase::build(store).unwrap()
    }

    #[test]
    fn self_query_with_k1_returns_own_label() {
        let db = toy_database(&[0, 1, 1, 0, 1]);
        for record in db.store().records() {
            let d = db.diagnose_code(&record.code, 1, None).unwrap();
            assert_eq!(d.predicted_class, record.label.class_index().unwrap());
            assert_eq!(d.neighbors.entries[0].record_id, record.record_id);
            assert_eq!(d.neighbors.entries[0].distance, 0);
        }
    }

    #[test]
    fn exclusion_empties_candidates() {
        let db = toy_database(&[0, 1]);
        let all: HashSet<u64> = [0u64, 1].into_iter().collect();
        assert!(matches!(
            db.diagnose_code(&db.store().records()[0].code, 2, Some(&all)),
            Err(DiagnosisError::EmptyCandidates)
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let db = toy_database(&[0, 1]);
        assert!(matches!(
            db.diagnose_embedding(&[1.0; 5], 2, None),
            Err(DiagnosisError::DimensionMismatch {
                expected: 8,
                actual: 5
            })
        ));
    }

    #[test]
    fn record_order_does_not_change_diagnosis() {
        let labels = [0, 1, 1, 0, 1, 0, 1];
        let db = toy_database(&labels);
        let mut store2 = CaseStore::new(8, 8)
            .with_label_space(Some(LabelSpace::new(2).unwrap()));
        for record in db.store().records().iter().rev() {
            store2.push(record.clone()).unwrap();
        }
        let db2 = CaseDatabase::build(store2).unwrap();
        let query: Vec<f64> = (0..8).map(|b| if b < 3 { 1.0 } else { -1.0 }).collect();
        let a = db.diagnose_embedding(&query, 3, None).unwrap();
        let b = db2.diagnose_embedding(&query, 3, None).unwrap();
        assert_eq!(a.predicted_class, b.predicted_class);
        assert_eq!(a.class_votes, b.class_votes);
        assert_eq!(a.neighbors, b.neighbors);
    }

    #[test]
    fn build_rejects_invalid_store() {
        let mut store = CaseStore::new(8, 8);
        let code = sign_quantize_values(&[1.0; 8]).unwrap();
        for _ in 0..2 {
            store
                .push(LesionRecord {
                    record_id: 7,
                    polyp_id: 7,
                    code: code.clone(),
                    label: Label::UNLABELED,
                })
                .unwrap();
        }
        assert!(matches!(
            CaseDatabase::build(store),
            Err(DiagnosisError::StoreInvalid { count: 1, .. })
        ));
    }

    #[test]
    fn query_without_label_space_still_returns_neighbors() {
        let mut store = CaseStore::new(8, 8);
        let code = sign_quantize_values(&[1.0; 8]).unwrap();
        store
            .push(LesionRecord {
                record_id: 0,
                polyp_id: 0,
                code,
                label: Label::UNLABELED,
            })
            .unwrap();
        let db = CaseDatabase::build(store).unwrap();
        let (neighbors, diagnosis) =
            db.query_embedding(&[1.0; 8], 3, None).unwrap();
        assert_eq!(neighbors.entries.len(), 1);
        assert!(diagnosis.is_none());
    }

    #[test]
    fn polyp_exclusion_set_covers_all_its_records() {
        let mut store = CaseStore::new(8, 8);
        for (rid, pid) in [(0u64, 100u64), (1, 100), (2, 200)] {
            let v: Vec<f64> = (0..8).map(|b| if b as u64 % 3 == rid % 3 { 1.0 } else { -1.0 }).collect();
            store
                .push(LesionRecord {
                    record_id: rid,
                    polyp_id: pid,
                    code: sign_quantize_values(&v).unwrap(),
                    label: Label::UNLABELED,
                })
                .unwrap();
        }
        let db = CaseDatabase::build(store).unwrap();
        assert_eq!(db.record_ids_of_polyp(100), vec![0, 1]);
        assert_eq!(db.record_ids_of_polyp(999), Vec::<u64>::new());
    }
}
