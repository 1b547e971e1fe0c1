//! Wire types and the response builder. The terminal query path and
//! the HTTP handler both go through [`build_query_response`] and
//! serialize with serde's declaration-order keys, so identical inputs
//! produce identical bytes on either surface.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use hashscope_core::diagnosis::{CaseDatabase, DiagnosisError};
use hashscope_core::eval::reid::SimilarityMetric;
use hashscope_core::fusion::{fuse_average, FusionConfig, FusionError};
use hashscope_core::model::{Label, ModelError, MultiViewScene, ViewEmbedding};

/// One query: a single embedding row, or several rows fused as views
/// of one scene before retrieval.
#[derive(Debug, Clone, Deserialize)]
pub struct QueryRequest {
    pub embeddings: Vec<Vec<f64>>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub metric: Option<SimilarityMetric>,
}

/// Distance on the wire: Hamming keeps the integer bit count, cosine
/// reports 1 - similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DistanceOut {
    Bits(u32),
    Cosine(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborOut {
    pub record_id: u64,
    pub polyp_id: u64,
    pub distance: DistanceOut,
    pub label: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosisOut {
    pub label: i32,
    pub scores: Vec<f64>,
}

/// Neighbors plus the vote; `diagnosis` is null when the store carries
/// no labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResponse {
    pub neighbors: Vec<NeighborOut>,
    pub diagnosis: Option<DiagnosisOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthResponse {
    pub status: &'static str,
    pub records: usize,
    pub k_bits: usize,
}

/// Record metadata; the code ships only on request, as one hex string
/// of its little-endian packed words.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordResponse {
    pub record_id: u64,
    pub polyp_id: u64,
    pub label: i32,
    pub k_bits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("request body is not valid JSON: {0}")]
    BadRequest(String),
    #[error("query carries no embeddings")]
    EmptyQuery,
    #[error("embedding has dimension {actual}, database expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("record {0} not found")]
    UnknownRecord(u64),
    #[error("query embedding is degenerate: {0}")]
    BadEmbedding(#[from] FusionError),
    #[error("query embedding is malformed: {0}")]
    BadViews(#[from] ModelError),
    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),
}

impl ApiError {
    /// Stable machine-readable code for the error body.
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "bad_request",
            ApiError::EmptyQuery => "empty_query",
            ApiError::DimensionMismatch { .. } => "dimension_mismatch",
            ApiError::InvalidK => "invalid_k",
            ApiError::UnknownRecord(_) => "record_not_found",
            ApiError::BadEmbedding(_) => "bad_embedding",
            ApiError::BadViews(_) => "bad_embedding",
            ApiError::Diagnosis(DiagnosisError::DimensionMismatch { .. }) => "dimension_mismatch",
            ApiError::Diagnosis(DiagnosisError::EmptyCandidates) => "no_candidates",
            ApiError::Diagnosis(_) => "query_failed",
        }
    }

    /// Whether the caller or the service is at fault, as an HTTP-style
    /// status.
    pub fn status(&self) -> u16 {
        match self {
            ApiError::UnknownRecord(_) => 404,
            ApiError::Diagnosis(e) => match e {
                DiagnosisError::DimensionMismatch { .. }
                | DiagnosisError::EmptyCandidates
                | DiagnosisError::NoLabeledEvidence
                | DiagnosisError::Hash(_) => 400,
                _ => 500,
            },
            _ => 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

/// `{"error": {"code", "message"}}`
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl ErrorBody {
    pub fn from_api(err: &ApiError) -> ErrorBody {
        ErrorBody {
            error: ErrorDetail {
                code: err.code().to_string(),
                message: err.to_string(),
            },
        }
    }
}

pub fn health_response(db: &CaseDatabase) -> HealthResponse {
    HealthResponse {
        status: "ok",
        records: db.store().len(),
        k_bits: db.store().hash_bits(),
    }
}

pub fn record_response(
    db: &CaseDatabase,
    record_id: u64,
    include_code: bool,
) -> Result<RecordResponse, ApiError> {
    let record = db
        .record(record_id)
        .ok_or(ApiError::UnknownRecord(record_id))?;
    let code = include_code.then(|| {
        record
            .code
            .words()
            .iter()
            .map(|w| format!("{w:016x}"))
            .collect::<String>()
    });
    Ok(RecordResponse {
        record_id: record.record_id,
        polyp_id: record.polyp_id,
        label: record.label.raw(),
        k_bits: record.code.bit_len(),
        code,
    })
}

/// Runs one query end to end: validate, fuse the rows into a single
/// scene embedding, retrieve, vote. Ranking is identical under both
/// metrics (they are monotonically related on codes); only the
/// reported distance changes.
pub fn build_query_response(
    db: &CaseDatabase,
    views: &[Vec<f64>],
    k: usize,
    metric: SimilarityMetric,
    fusion: FusionConfig,
    exclude: Option<&HashSet<u64>>,
) -> Result<QueryResponse, ApiError> {
    if views.is_empty() {
        return Err(ApiError::EmptyQuery);
    }
    if k == 0 {
        return Err(ApiError::InvalidK);
    }
    let expected = db.store().dimension();
    for row in views {
        if row.len() != expected {
            return Err(ApiError::DimensionMismatch {
                expected,
                actual: row.len(),
            });
        }
    }
    let scene_views: Vec<ViewEmbedding> = views
        .iter()
        .enumerate()
        .map(|(i, row)| ViewEmbedding::new(0, i as u32, row.clone()))
        .collect::<Result<_, _>>()?;
    let scene = MultiViewScene::new(0, scene_views, Label::UNLABELED)?;
    let fused = fuse_average(&scene, fusion)?;

    let (neighbors, diagnosis) = db.query_embedding(&fused.values, k, exclude)?;
    let bits = db.store().hash_bits();
    let out = neighbors
        .entries
        .iter()
        .map(|entry| {
            let record = db
                .record(entry.record_id)
                .expect("retrieved ids resolve in their own store");
            NeighborOut {
                record_id: record.record_id,
                polyp_id: record.polyp_id,
                distance: match metric {
                    SimilarityMetric::Hamming => DistanceOut::Bits(entry.distance),
                    SimilarityMetric::Cosine => {
                        DistanceOut::Cosine(2.0 * f64::from(entry.distance) / bits as f64)
                    }
                },
                label: record.label.raw(),
            }
        })
        .collect();
    Ok(QueryResponse {
        neighbors: out,
        diagnosis: diagnosis.map(|d| DiagnosisOut {
            label: Label::class(d.predicted_class).raw(),
            scores: d.class_scores,
        }),
    })
}
