//! Measurement harness: re-identification metrics over pooled rankings,
//! classification metrics under k-fold cross-validation, and the
//! speed/accuracy benchmark for the hash pipeline.
//!
//! Ranking metrics share one convention: higher score is better, and
//! every tie anywhere is broken by ascending `(query_id, reference_id)`
//! so results are deterministic. All metrics are invariant under
//! strictly monotonic transformations of the scores.

pub mod reid;
pub mod speed;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diagnosis::{CaseDatabase, DiagnosisError};
use crate::fusion::FusionError;
use crate::hashing::HashError;
use crate::model::CaseStore;

/// Precision threshold for [`recall_at_p90`].
pub const P90_PRECISION: f64 = 0.90;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task has no queries or no references")]
    EmptyTask,
    #[error("duplicate query id {0}")]
    DuplicateQueryId(u64),
    #[error("duplicate reference id {0}")]
    DuplicateReferenceId(u64),
    #[error("query {query_id} has no ground-truth reference")]
    MissingGroundTruth { query_id: u64 },
    #[error("query {query_id} maps to reference {reference_id}, which is not in the task")]
    TruthMissingFromReferences { query_id: u64, reference_id: u64 },
    #[error("score for query {query_id} x reference {reference_id} is not finite")]
    NonFiniteScore { query_id: u64, reference_id: u64 },
    #[error("score table does not match the task's query and reference ids")]
    ScoreTableMismatch,
    #[error("protocol row requests {requested} views, only {available} are available")]
    InvalidProtocolRow { requested: usize, available: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("input lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("value at index {index} is {value}, expected 0 or 1")]
    NonBinaryValue { index: usize, value: usize },
    #[error("AUC needs both classes present")]
    SingleClassAuc,
    #[error("cannot split {ids} polyp ids into {folds} folds")]
    InvalidFoldCount { folds: usize, ids: usize },
    #[error("classification eval needs a binary label space, store declares {num_classes}")]
    ClassificationNeedsBinary { num_classes: usize },
    #[error("store declares no label space")]
    NoLabelSpace,
    #[error("fold {fold} leaves an empty training store")]
    EmptyTrainingFold { fold: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),
}

/// A retrieval task: queries, references, and exactly one true
/// reference per query. `T` is the scoring payload, typically a fused
/// embedding or a hash code.
#[derive(Debug, Clone)]
pub struct ReidTask<T> {
    queries: Vec<(u64, T)>,
    references: Vec<(u64, T)>,
    ground_truth: HashMap<u64, u64>,
}

impl<T> ReidTask<T> {
    pub fn new(
        queries: Vec<(u64, T)>,
        references: Vec<(u64, T)>,
        ground_truth: HashMap<u64, u64>,
    ) -> Result<Self, EvalError> {
        if queries.is_empty() || references.is_empty() {
            return Err(EvalError::EmptyTask);
        }
        let mut seen = BTreeSet::new();
        for (id, _) in &queries {
            if !seen.insert(*id) {
                return Err(EvalError::DuplicateQueryId(*id));
            }
        }
        let mut ref_ids = BTreeSet::new();
        for (id, _) in &references {
            if !ref_ids.insert(*id) {
                return Err(EvalError::DuplicateReferenceId(*id));
            }
        }
        for (id, _) in &queries {
            let target = ground_truth
                .get(id)
                .ok_or(EvalError::MissingGroundTruth { query_id: *id })?;
            if !ref_ids.contains(target) {
                return Err(EvalError::TruthMissingFromReferences {
                    query_id: *id,
                    reference_id: *target,
                });
            }
        }
        Ok(ReidTask {
            queries,
            references,
            ground_truth,
        })
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    pub fn reference_count(&self) -> usize {
        self.references.len()
    }

    pub fn queries(&self) -> &[(u64, T)] {
        &self.queries
    }

    pub fn references(&self) -> &[(u64, T)] {
        &self.references
    }

    pub fn true_reference(&self, query_id: u64) -> Option<u64> {
        self.ground_truth.get(&query_id).copied()
    }

    /// Scores every query x reference pair with `f`.
    pub fn score_with(&self, mut f: impl FnMut(&T, &T) -> f64) -> Result<ScoreTable, EvalError> {
        let mut scores = Vec::with_capacity(self.queries.len() * self.references.len());
        for (_, q) in &self.queries {
            for (_, r) in &self.references {
                scores.push(f(q, r));
            }
        }
        ScoreTable::new(
            self.queries.iter().map(|(id, _)| *id).collect(),
            self.references.iter().map(|(id, _)| *id).collect(),
            scores,
        )
    }
}

/// Dense query x reference score matrix, higher is better.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    query_ids: Vec<u64>,
    reference_ids: Vec<u64>,
    scores: Vec<f64>,
}

impl ScoreTable {
    pub fn new(
        query_ids: Vec<u64>,
        reference_ids: Vec<u64>,
        scores: Vec<f64>,
    ) -> Result<Self, EvalError> {
        if query_ids.is_empty() || reference_ids.is_empty() {
            return Err(EvalError::EmptyTask);
        }
        if scores.len() != query_ids.len() * reference_ids.len() {
            return Err(EvalError::LengthMismatch {
                left: scores.len(),
                right: query_ids.len() * reference_ids.len(),
            });
        }
        for (i, s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(EvalError::NonFiniteScore {
                    query_id: query_ids[i / reference_ids.len()],
                    reference_id: reference_ids[i % reference_ids.len()],
                });
            }
        }
        Ok(ScoreTable {
            query_ids,
            reference_ids,
            scores,
        })
    }

    pub fn query_ids(&self) -> &[u64] {
        &self.query_ids
    }

    pub fn reference_ids(&self) -> &[u64] {
        &self.reference_ids
    }

    pub fn get(&self, query_index: usize, reference_index: usize) -> f64 {
        self.scores[query_index * self.reference_ids.len() + reference_index]
    }
}

fn check_alignment<T>(task: &ReidTask<T>, scores: &ScoreTable) -> Result<(), EvalError> {
    let queries_match = task
        .queries
        .iter()
        .map(|(id, _)| *id)
        .eq(scores.query_ids.iter().copied());
    let refs_match = task
        .references
        .iter()
        .map(|(id, _)| *id)
        .eq(scores.reference_ids.iter().copied());
    if !queries_match || !refs_match {
        return Err(EvalError::ScoreTableMismatch);
    }
    Ok(())
}

/// One pooled pair in the global ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledEntry {
    pub query_id: u64,
    pub reference_id: u64,
    pub score: f64,
    pub is_match: bool,
}

/// All query x reference pairs sorted by descending score, ties by
/// ascending `(query_id, reference_id)`.
pub fn pooled_ranking<T>(
    task: &ReidTask<T>,
    scores: &ScoreTable,
) -> Result<Vec<PooledEntry>, EvalError> {
    check_alignment(task, scores)?;
    let mut pool = Vec::with_capacity(task.query_count() * task.reference_count());
    for (qi, (query_id, _)) in task.queries.iter().enumerate() {
        let truth = task.ground_truth[query_id];
        for (ri, (reference_id, _)) in task.references.iter().enumerate() {
            pool.push(PooledEntry {
                query_id: *query_id,
                reference_id: *reference_id,
                score: scores.get(qi, ri),
                is_match: *reference_id == truth,
            });
        }
    }
    pool.sort_unstable_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores validated finite")
            .then(a.query_id.cmp(&b.query_id))
            .then(a.reference_id.cmp(&b.reference_id))
    });
    Ok(pool)
}

/// Micro-averaged precision over the pooled ranking: the sum of
/// precision at each true match's pooled rank, divided by the query
/// count.
pub fn micro_average_precision<T>(
    task: &ReidTask<T>,
    scores: &ScoreTable,
) -> Result<f64, EvalError> {
    let pool = pooled_ranking(task, scores)?;
    let mut hits = 0u64;
    let mut precision_sum = 0.0;
    for (rank0, entry) in pool.iter().enumerate() {
        if entry.is_match {
            hits += 1;
            precision_sum += hits as f64 / (rank0 as u64 + 1) as f64;
        }
    }
    Ok(precision_sum / task.query_count() as f64)
}

/// Macro-averaged precision: each query is ranked on its own, its AP is
/// the reciprocal rank of its true match, and queries average equally.
pub fn macro_average_precision<T>(
    task: &ReidTask<T>,
    scores: &ScoreTable,
) -> Result<f64, EvalError> {
    check_alignment(task, scores)?;
    let mut total = 0.0;
    for (qi, (query_id, _)) in task.queries.iter().enumerate() {
        let truth = task.ground_truth[query_id];
        let mut order: Vec<usize> = (0..task.reference_count()).collect();
        order.sort_unstable_by(|&a, &b| {
            scores
                .get(qi, b)
                .partial_cmp(&scores.get(qi, a))
                .expect("scores validated finite")
                .then(task.references[a].0.cmp(&task.references[b].0))
        });
        let rank = order
            .iter()
            .position(|&ri| task.references[ri].0 == truth)
            .expect("truth validated present") as f64
            + 1.0;
        total += 1.0 / rank;
    }
    Ok(total / task.query_count() as f64)
}

/// Fraction of queries whose best-scoring reference (ties to the lowest
/// reference id) is the true match.
pub fn acc_at_1<T>(task: &ReidTask<T>, scores: &ScoreTable) -> Result<f64, EvalError> {
    check_alignment(task, scores)?;
    let mut correct = 0usize;
    for (qi, (query_id, _)) in task.queries.iter().enumerate() {
        let mut best_ri = 0usize;
        for ri in 1..task.reference_count() {
            let better = scores.get(qi, ri) > scores.get(qi, best_ri)
                || (scores.get(qi, ri) == scores.get(qi, best_ri)
                    && task.references[ri].0 < task.references[best_ri].0);
            if better {
                best_ri = ri;
            }
        }
        if task.references[best_ri].0 == task.ground_truth[query_id] {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.query_count() as f64)
}

/// Maximum recall over pooled prefixes whose precision is at least
/// 0.90; zero when no prefix qualifies.
pub fn recall_at_p90<T>(task: &ReidTask<T>, scores: &ScoreTable) -> Result<f64, EvalError> {
    let pool = pooled_ranking(task, scores)?;
    let total_matches = task.query_count() as f64;
    let mut hits = 0u64;
    let mut best_recall = 0.0f64;
    for (rank0, entry) in pool.iter().enumerate() {
        if entry.is_match {
            hits += 1;
        }
        let precision = hits as f64 / (rank0 as u64 + 1) as f64;
        if precision >= P90_PRECISION {
            best_recall = best_recall.max(hits as f64 / total_matches);
        }
    }
    Ok(best_recall)
}

/// Mann-Whitney AUC: the probability a positive outscores a negative,
/// with half credit for ties. Computed by average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore {
            query_id: 0,
            reference_id: 0,
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClassAuc);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares its average rank.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// F1 and accuracy for binary predictions with class 1 as positive.
/// A degenerate case with no positives anywhere scores F1 = 1.0, so a
/// perfect all-negative prediction is not penalized.
pub fn f1_and_acc(predictions: &[usize], labels: &[usize]) -> Result<(f64, f64), EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    for (index, &value) in predictions.iter().chain(labels).enumerate() {
        if value > 1 {
            return Err(EvalError::NonBinaryValue {
                index: index % predictions.len(),
                value,
            });
        }
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let acc = (tp + tn) as f64 / predictions.len() as f64;
    Ok((f1, acc))
}

/// One train/test split at the polyp level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

/// Deterministic k-fold partition of polyp ids: ids are deduplicated,
/// sorted, shuffled by a ChaCha8 stream keyed on `seed`, and cut into
/// contiguous chunks whose sizes differ by at most one. Outputs are
/// sorted for stable downstream iteration.
pub fn kfold_split(
    polyp_ids: &[u64],
    folds: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, EvalError> {
    let mut ids: Vec<u64> = polyp_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if folds < 2 || folds > ids.len() {
        return Err(EvalError::InvalidFoldCount {
            folds,
            ids: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let base = ids.len() / folds;
    let extra = ids.len() % folds;
    let mut splits = Vec::with_capacity(folds);
    let mut offset = 0;
    for fold in 0..folds {
        let size = base + usize::from(fold < extra);
        let mut test: Vec<u64> = ids[offset..offset + size].to_vec();
        let mut train: Vec<u64> = ids[..offset]
            .iter()
            .chain(&ids[offset + size..])
            .copied()
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        splits.push(FoldSplit { train, test });
        offset += size;
    }
    Ok(splits)
}

/// Retrieval metrics, with classification extras when a run computes
/// them. Serialized field order is the canonical key order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub uap: f64,
    pub acc_at_1: f64,
    pub recall_at_p90: f64,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub f1: Option<f64>,
    pub queries_per_sec: Option<f64>,
}

impl MetricsReport {
    pub fn retrieval(uap: f64, acc_at_1: f64, recall_at_p90: f64) -> MetricsReport {
        MetricsReport {
            uap,
            acc_at_1,
            recall_at_p90,
            auc: None,
            acc: None,
            f1: None,
            queries_per_sec: None,
        }
    }

    /// True when every present metric lies in `[0, 1]`.
    pub fn is_well_formed(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        [Some(self.uap), Some(self.acc_at_1), Some(self.recall_at_p90)]
            .into_iter()
            .chain([self.auc, self.acc, self.f1])
            .flatten()
            .all(unit)
    }
}

/// Renders rows as a plain-text table with space-aligned columns.
/// Numeric-looking cells are right-aligned, everything else left.
pub fn aligned_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let columns = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().take(columns).enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let numeric: Vec<bool> = (0..columns).map(|i| {
        rows.iter()
            .filter_map(|r| r.get(i))
            .all(|c| c.parse::<f64>().is_ok())
            && !rows.is_empty()
    })
    .collect();

    let mut out = String::new();
    let emit = |cells: Vec<String>, out: &mut String| {
        let line: Vec<String> = cells
            .iter()
            .enumerate()
            .take(columns)
            .map(|(i, c)| {
                if numeric[i] {
                    format!("{c:>width$}", width = widths[i])
                } else {
                    format!("{c:<width$}", width = widths[i])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    };
    emit(headers.iter().map(|h| h.to_string()).collect(), &mut out);
    for row in rows {
        emit(row.clone(), &mut out);
    }
    out
}

/// Classification quality on one held-out fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub test_queries: usize,
}

/// Cross-validated classification results plus their means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub folds: Vec<FoldOutcome>,
    pub mean_auc: f64,
    pub mean_acc: f64,
    pub mean_f1: f64,
    pub k: usize,
    pub seed: u64,
}

/// Leave-fold-out kNN diagnosis over a labeled binary store: for each
/// fold, records of held-out polyps are diagnosed against a store built
/// from the remaining polyps only. Unlabeled records never leave the
/// training side.
pub fn classification_benchmark(
    store: &CaseStore,
    folds: usize,
    seed: u64,
    k: usize,
) -> Result<ClassificationReport, EvalError> {
    let space = store.label_space().ok_or(EvalError::NoLabelSpace)?;
    if space.num_classes() != 2 {
        return Err(EvalError::ClassificationNeedsBinary {
            num_classes: space.num_classes(),
        });
    }
    let labeled_polyps: Vec<u64> = store
        .records()
        .iter()
        .filter(|r| r.label.is_labeled())
        .map(|r| r.polyp_id)
        .collect();
    let splits = kfold_split(&labeled_polyps, folds, seed)?;

    let mut outcomes = Vec::with_capacity(folds);
    for (fold, split) in splits.iter().enumerate() {
        let test_set: BTreeSet<u64> = split.test.iter().copied().collect();
        let mut train_store = CaseStore::new(store.dimension(), store.hash_bits())
            .with_label_space(store.label_space().cloned())
            .with_index_params(store.index_params());
        for record in store.records() {
            if !test_set.contains(&record.polyp_id) {
                train_store.push(record.clone()).expect("bits unchanged");
            }
        }
        if train_store.is_empty() {
            return Err(EvalError::EmptyTrainingFold { fold });
        }
        let db = CaseDatabase::build(train_store)?;

        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for record in store.records() {
            let Some(class) = record.label.class_index() else {
                continue;
            };
            if !test_set.contains(&record.polyp_id) {
                continue;
            }
            let diagnosis = db.diagnose_code(&record.code, k, None)?;
            predictions.push(diagnosis.predicted_class);
            labels.push(class);
            scores.push(diagnosis.class_scores[1]);
        }
        let flags: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let auc = roc_auc(&scores, &flags)?;
        let (f1, acc) = f1_and_acc(&predictions, &labels)?;
        outcomes.push(FoldOutcome {
            fold,
            auc,
            acc,
            f1,
            test_queries: labels.len(),
        });
    }

    let n = outcomes.len() as f64;
    Ok(ClassificationReport {
        mean_auc: outcomes.iter().map(|o| o.auc).sum::<f64>() / n,
        mean_acc: outcomes.iter().map(|o| o.acc).sum::<f64>() / n,
        mean_f1: outcomes.iter().map(|o| o.f1).sum::<f64>() / n,
        folds: outcomes,
        k,
        seed,
    })
}
