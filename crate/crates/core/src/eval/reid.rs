//! Multi-view re-identification protocol: scenes are split into
//! disjoint query-side and reference-side view sets, each protocol row
//! fuses a prefix of each side, and the fused pair is scored either in
//! float space (cosine) or in hash space (1 - 2h/K). Ground truth is
//! polyp identity.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    acc_at_1, aligned_table, micro_average_precision, recall_at_p90, EvalError, MetricsReport,
    ReidTask, ScoreTable,
};
use crate::fusion::{fuse_store, FusionConfig};
use crate::hashing::{hamming_distance, hamming_to_cosine, sign_quantize_bits, HashCode};
use crate::model::MultiViewScene;

/// Which similarity the ranking runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    Hamming,
    Cosine,
}

impl std::fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimilarityMetric::Hamming => "hamming",
            SimilarityMetric::Cosine => "cosine",
        })
    }
}

/// How many views each side of the task fuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReidProtocolRow {
    pub query_views: usize,
    pub reference_views: usize,
}

/// Disjoint view-id pools for the two sides. A single-view corpus
/// shares its one view across both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSplit {
    pub query_slots: Vec<u32>,
    pub reference_slots: Vec<u32>,
}

/// Splits the sorted union of view ids: the first half (rounded up)
/// feeds queries, the rest feeds references.
pub fn split_views(scenes: &[MultiViewScene]) -> Result<ViewSplit, EvalError> {
    let mut union = BTreeSet::new();
    for scene in scenes {
        for view in scene.views() {
            union.insert(view.view_id());
        }
    }
    let ids: Vec<u32> = union.into_iter().collect();
    if ids.is_empty() {
        return Err(EvalError::EmptyTask);
    }
    if ids.len() == 1 {
        return Ok(ViewSplit {
            query_slots: ids.clone(),
            reference_slots: ids,
        });
    }
    let cut = ids.len().div_ceil(2);
    Ok(ViewSplit {
        query_slots: ids[..cut].to_vec(),
        reference_slots: ids[cut..].to_vec(),
    })
}

/// Every (query_views, reference_views) combination the split supports,
/// in row-major order.
pub fn full_grid(split: &ViewSplit) -> Vec<ReidProtocolRow> {
    let mut rows = Vec::new();
    for q in 1..=split.query_slots.len() {
        for r in 1..=split.reference_slots.len() {
            rows.push(ReidProtocolRow {
                query_views: q,
                reference_views: r,
            });
        }
    }
    rows
}

/// Cosine similarity; zero-norm inputs rank last at 0.0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Hash-space similarity on the shared ranking scale, 1 - 2h/K.
pub fn hash_similarity(a: &HashCode, b: &HashCode) -> Result<f64, EvalError> {
    let h = hamming_distance(a, b)?;
    Ok(hamming_to_cosine(h, a.bit_len())?)
}

fn side_prefix(slots: &[u32], views: usize) -> Result<BTreeSet<u32>, EvalError> {
    if views == 0 || views > slots.len() {
        return Err(EvalError::InvalidProtocolRow {
            requested: views,
            available: slots.len(),
        });
    }
    Ok(slots[..views].iter().copied().collect())
}

/// Builds the fused float task for one protocol row. Query and
/// reference payloads for a polyp come from different views, and the
/// true reference of each query is its own polyp.
pub fn build_fused_task(
    scenes: &[MultiViewScene],
    split: &ViewSplit,
    row: ReidProtocolRow,
    fusion: FusionConfig,
) -> Result<ReidTask<Vec<f64>>, EvalError> {
    let query_set = side_prefix(&split.query_slots, row.query_views)?;
    let reference_set = side_prefix(&split.reference_slots, row.reference_views)?;
    let query_side = fuse_store(scenes, fusion, Some(&query_set))?;
    let reference_side = fuse_store(scenes, fusion, Some(&reference_set))?;

    let queries: Vec<(u64, Vec<f64>)> = query_side
        .into_iter()
        .map(|e| (e.polyp_id, e.values))
        .collect();
    let references: Vec<(u64, Vec<f64>)> = reference_side
        .into_iter()
        .map(|e| (e.polyp_id, e.values))
        .collect();
    let truth: HashMap<u64, u64> = queries.iter().map(|(id, _)| (*id, *id)).collect();
    ReidTask::new(queries, references, truth)
}

fn quantize_task(
    task: &ReidTask<Vec<f64>>,
    bits: usize,
) -> Result<ReidTask<HashCode>, EvalError> {
    let map_side = |side: &[(u64, Vec<f64>)]| -> Result<Vec<(u64, HashCode)>, EvalError> {
        side.iter()
            .map(|(id, values)| Ok((*id, sign_quantize_bits(values, bits)?)))
            .collect()
    };
    let truth: HashMap<u64, u64> = task
        .queries()
        .iter()
        .map(|(id, _)| (*id, task.true_reference(*id).expect("validated")))
        .collect();
    ReidTask::new(map_side(task.queries())?, map_side(task.references())?, truth)
}

/// Scores a fused task under the chosen metric. For Hamming the
/// payloads are sign-quantized to `hash_bits` (embedding dimension by
/// default) first.
pub fn score_task(
    task: &ReidTask<Vec<f64>>,
    metric: SimilarityMetric,
    hash_bits: Option<usize>,
) -> Result<ScoreTable, EvalError> {
    match metric {
        SimilarityMetric::Cosine => task.score_with(|a, b| cosine_similarity(a, b)),
        SimilarityMetric::Hamming => {
            let dim = task.queries()[0].1.len();
            let coded = quantize_task(task, hash_bits.unwrap_or(dim))?;
            coded.score_with(|a, b| {
                let h = hamming_distance(a, b).expect("codes share one width");
                hamming_to_cosine(h, a.bit_len()).expect("distance bounded by width")
            })
        }
    }
}

/// Metrics for one protocol row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReidRowReport {
    pub query_views: usize,
    pub reference_views: usize,
    pub metric: SimilarityMetric,
    pub report: MetricsReport,
}

/// Runs the full protocol: one fused task and one metrics report per
/// row. Throughput covers scoring plus metric computation.
pub fn reid_benchmark(
    scenes: &[MultiViewScene],
    metric: SimilarityMetric,
    rows: &[ReidProtocolRow],
    fusion: FusionConfig,
    hash_bits: Option<usize>,
) -> Result<Vec<ReidRowReport>, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let split = split_views(scenes)?;
    let mut reports = Vec::with_capacity(rows.len());
    for &row in rows {
        let task = build_fused_task(scenes, &split, row, fusion)?;
        let timer = Instant::now();
        let scores = score_task(&task, metric, hash_bits)?;
        let uap = micro_average_precision(&task, &scores)?;
        let top1 = acc_at_1(&task, &scores)?;
        let recall = recall_at_p90(&task, &scores)?;
        let elapsed = timer.elapsed().as_secs_f64().max(1e-9);

        let mut report = MetricsReport::retrieval(uap, top1, recall);
        report.queries_per_sec = Some(task.query_count() as f64 / elapsed);
        reports.push(ReidRowReport {
            query_views: row.query_views,
            reference_views: row.reference_views,
            metric,
            report,
        });
    }
    Ok(reports)
}

/// Plain-text table of row reports.
pub fn render_reid_table(reports: &[ReidRowReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                format!("{}x{}", r.query_views, r.reference_views),
                r.metric.to_string(),
                format!("{:.4}", r.report.uap),
                format!("{:.4}", r.report.acc_at_1),
                format!("{:.4}", r.report.recall_at_p90),
                format!("{:.0}", r.report.queries_per_sec.unwrap_or(0.0)),
            ]
        })
        .collect();
    aligned_table(
        &["views", "metric", "uap", "acc@1", "recall@p90", "queries/s"],
        &rows,
    )
}
