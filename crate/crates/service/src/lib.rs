//! Read-only retrieval service over a loaded snapshot. One immutable
//! database is shared by every request; nothing mutates after startup,
//! so concurrent reads need no locking. Updates happen by re-ingesting
//! and swapping snapshot files, then restarting.

pub mod api;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use thiserror::Error;
use tokio::net::TcpListener;

use hashscope_core::diagnosis::{CaseDatabase, DiagnosisError, DEFAULT_K};
use hashscope_core::eval::reid::SimilarityMetric;
use hashscope_core::fusion::FusionConfig;
use hashscope_core::snapshot::{load_snapshot, SnapshotError};

use api::{
    build_query_response, health_response, record_response, ApiError, ErrorBody, QueryRequest,
};

pub const DEFAULT_BODY_LIMIT: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub snapshot: PathBuf,
    pub host: String,
    pub port: u16,
    pub default_k: usize,
    pub metric: SimilarityMetric,
    pub max_body_bytes: usize,
}

impl ServiceConfig {
    pub fn new(snapshot: PathBuf, port: u16) -> ServiceConfig {
        ServiceConfig {
            snapshot,
            host: "127.0.0.1".to_string(),
            port,
            default_k: DEFAULT_K,
            metric: SimilarityMetric::Hamming,
            max_body_bytes: DEFAULT_BODY_LIMIT,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("default k must be at least 1")]
    InvalidK,
    #[error("cannot load snapshot {path}: {source}")]
    Snapshot {
        path: PathBuf,
        source: SnapshotError,
    },
    #[error("snapshot {path} does not build a usable database: {source}")]
    Database {
        path: PathBuf,
        source: DiagnosisError,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Serve(std::io::Error),
}

/// Everything a request handler needs, built once at startup.
pub struct AppState {
    pub db: CaseDatabase,
    pub default_k: usize,
    pub metric: SimilarityMetric,
    pub fusion: FusionConfig,
}

/// Loads the snapshot and builds the index; all startup validation
/// happens here so `serve` can fail before binding.
pub fn load_state(config: &ServiceConfig) -> Result<AppState, ServiceError> {
    if config.default_k == 0 {
        return Err(ServiceError::InvalidK);
    }
    let store = load_snapshot(&config.snapshot).map_err(|source| ServiceError::Snapshot {
        path: config.snapshot.clone(),
        source,
    })?;
    let db = CaseDatabase::build(store).map_err(|source| ServiceError::Database {
        path: config.snapshot.clone(),
        source,
    })?;
    Ok(AppState {
        db,
        default_k: config.default_k,
        metric: config.metric,
        fusion: FusionConfig::default(),
    })
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody::from_api(&self))).into_response()
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(health_response(&state.db)).into_response()
}

#[derive(Deserialize)]
struct RecordQuery {
    #[serde(default)]
    include_code: bool,
}

async fn get_record(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Query(params): Query<RecordQuery>,
) -> Result<Response, ApiError> {
    let record = record_response(&state.db, id, params.include_code)?;
    Ok(Json(record).into_response())
}

// The body is parsed by hand so malformed JSON gets the same
// machine-readable error envelope as every other failure.
async fn post_query(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let request: QueryRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let k = match request.k {
        Some(0) => return Err(ApiError::InvalidK),
        Some(k) => k,
        None => state.default_k,
    };
    let metric = request.metric.unwrap_or(state.metric);
    let response = build_query_response(
        &state.db,
        &request.embeddings,
        k,
        metric,
        state.fusion,
        None,
    )?;
    Ok(Json(response).into_response())
}

async fn track_latency(
    request: axum::extract::Request,
    next: axum::middleware::Next,
) -> Response {
    let started = Instant::now();
    let method = request.method().clone();
    let path = request.uri().path().to_string();
    let mut response = next.run(request).await;
    let elapsed = started.elapsed();
    tracing::info!(
        target: "hashscope_service",
        %method,
        path,
        status = response.status().as_u16(),
        micros = elapsed.as_micros() as u64,
        "request"
    );
    if let Ok(value) = HeaderValue::from_str(&format!("{:.3}", elapsed.as_secs_f64() * 1e3)) {
        response.headers_mut().insert("x-latency-ms", value);
    }
    response
}

async fn not_found() -> Response {
    let body = ErrorBody {
        error: api::ErrorDetail {
            code: "not_found".to_string(),
            message: "no such endpoint".to_string(),
        },
    };
    (StatusCode::NOT_FOUND, Json(body)).into_response()
}

pub fn router(state: Arc<AppState>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/records/{id}", get(get_record))
        .route("/v1/query", post(post_query))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .layer(axum::middleware::from_fn(track_latency))
        .with_state(state)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        tokio::signal::ctrl_c()
            .await
            .expect("ctrl-c handler installs");
    };
    #[cfg(unix)]
    let terminate = async {
        tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("sigterm handler installs")
            .recv()
            .await;
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
    tracing::info!(target: "hashscope_service", "shutdown signal received");
}

/// Binds and serves until a termination signal arrives. In-flight
/// requests drain before exit.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(load_state(&config)?);
    let addr = format!("{}:{}", config.host, config.port);
    let listener = TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: addr.clone(),
            source,
        })?;
    let local = listener.local_addr().map_err(ServiceError::Serve)?;
    tracing::info!(
        target: "hashscope_service",
        %local,
        records = state.db.store().len(),
        k_bits = state.db.store().hash_bits(),
        "listening"
    );
    axum::serve(listener, router(state, config.max_body_bytes))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(ServiceError::Serve)
}

/// Serves on an already-bound listener until `shutdown` resolves.
/// Test harnesses bind port 0 themselves and pass the trigger in.
pub async fn serve_until(
    listener: TcpListener,
    state: Arc<AppState>,
    max_body_bytes: usize,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(state, max_body_bytes))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServiceError::Serve)
}

