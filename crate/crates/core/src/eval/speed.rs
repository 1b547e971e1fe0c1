//! Throughput benchmark: float cosine linear scan vs packed Hamming
//! linear scan vs the Hamming ball tree, on identical synthetic data.
//!
//! Repeats are interleaved across methods so cache and clock drift hit
//! all of them alike, and the reported figure per method is the median
//! batch time. Everything runs on the calling thread; the report says
//! so explicitly. Result sets are digested so two runs with one seed
//! can be compared while timings vary.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{sign_quantize_values, HashCode, PackedCodes};
use crate::index::{
    knn_ball_tree_filtered, knn_linear_scan, BallTreeIndex, IndexError, RankedNeighbors,
};
use crate::model::{CaseStore, IndexParams, Label, LesionRecord};
use crate::synth::float_rows;

#[derive(Debug, Error)]
pub enum SpeedBenchError {
    #[error("benchmark needs at least one record")]
    NoRecords,
    #[error("benchmark needs at least 3 repeats, got {0}")]
    TooFewRepeats(usize),
    #[error("invalid benchmark parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Shape of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchDistribution {
    /// Rows drawn around 64 shared centroids; Hamming balls stay tight
    /// so the tree gets pruning opportunities.
    Clustered,
    /// Isotropic rows with uniform sign patterns, the tree's worst
    /// case.
    Uniform,
}

impl std::fmt::Display for BenchDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchDistribution::Clustered => "clustered",
            BenchDistribution::Uniform => "uniform",
        })
    }
}

const CLUSTER_COUNT: usize = 64;
const CLUSTER_NOISE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeedBenchConfig {
    pub records: usize,
    pub dim: usize,
    pub distribution: BenchDistribution,
    pub repeats: usize,
    pub queries: usize,
    pub k: usize,
    pub leaf_size: usize,
    pub seed: u64,
}

impl SpeedBenchConfig {
    pub fn new(
        records: usize,
        dim: usize,
        distribution: BenchDistribution,
        repeats: usize,
    ) -> SpeedBenchConfig {
        SpeedBenchConfig {
            records,
            dim,
            distribution,
            repeats,
            queries: 64,
            k: 10,
            leaf_size: crate::index::DEFAULT_LEAF_SIZE,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), SpeedBenchError> {
        if self.records == 0 {
            return Err(SpeedBenchError::NoRecords);
        }
        if self.repeats < 3 {
            return Err(SpeedBenchError::TooFewRepeats(self.repeats));
        }
        if self.dim == 0 {
            return Err(SpeedBenchError::InvalidParameter("dim must be >= 1"));
        }
        if self.queries == 0 {
            return Err(SpeedBenchError::InvalidParameter("queries must be >= 1"));
        }
        if self.k == 0 {
            return Err(SpeedBenchError::InvalidParameter("k must be >= 1"));
        }
        if self.leaf_size == 0 {
            return Err(SpeedBenchError::InvalidParameter("leaf_size must be >= 1"));
        }
        Ok(())
    }
}

/// Median batch time and derived throughput for one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodTiming {
    pub median_batch_secs: f64,
    pub queries_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedReport {
    pub records: usize,
    pub dim: usize,
    pub hash_bits: usize,
    pub distribution: BenchDistribution,
    pub repeats: usize,
    pub queries: usize,
    pub k: usize,
    pub leaf_size: usize,
    pub seed: u64,
    pub single_threaded: bool,
    pub cosine_scan: MethodTiming,
    pub hamming_scan: MethodTiming,
    pub hamming_tree: MethodTiming,
    pub hamming_scan_speedup_vs_cosine: f64,
    pub tree_speedup_vs_cosine: f64,
    pub tree_codes_scanned_fraction: f64,
    pub result_digest: String,
}

/// Top-k by descending score, ties broken by ascending id. Small
/// insertion buffer; k stays tiny in this benchmark.
struct TopScores {
    k: usize,
    entries: Vec<(f32, u64)>,
}

impl TopScores {
    fn new(k: usize) -> TopScores {
        TopScores {
            k,
            entries: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn beats(a: (f32, u64), b: (f32, u64)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    #[inline]
    fn offer(&mut self, score: f32, id: u64) {
        let candidate = (score, id);
        if self.entries.len() == self.k {
            let worst = *self.entries.last().expect("buffer full");
            if !Self::beats(candidate, worst) {
                return;
            }
            self.entries.pop();
        }
        let at = self
            .entries
            .iter()
            .position(|&e| Self::beats(candidate, e))
            .unwrap_or(self.entries.len());
        self.entries.insert(at, candidate);
    }
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn cosine_scan_batch(
    data: &[f32],
    dim: usize,
    queries: &[f32],
    k: usize,
) -> Vec<Vec<(f32, u64)>> {
    let n = data.len() / dim;
    queries
        .chunks_exact(dim)
        .map(|q| {
            let mut top = TopScores::new(k);
            for i in 0..n {
                let score = dot_f32(&data[i * dim..(i + 1) * dim], q);
                top.offer(score, i as u64);
            }
            top.entries
        })
        .collect()
}

fn hamming_scan_batch(
    points: &PackedCodes,
    ids: &[u64],
    queries: &[HashCode],
    k: usize,
) -> Vec<RankedNeighbors> {
    queries
        .iter()
        .map(|q| knn_linear_scan(points, ids, q, k).expect("non-empty matrix, widths match"))
        .collect()
}

fn tree_batch(
    index: &BallTreeIndex,
    queries: &[HashCode],
    k: usize,
) -> (Vec<RankedNeighbors>, u64) {
    let mut scanned = 0u64;
    let results = queries
        .iter()
        .map(|q| {
            let (neighbors, stats) =
                knn_ball_tree_filtered(index, q, k, None).expect("built index, widths match");
            scanned += stats.codes_scanned;
            neighbors
        })
        .collect();
    (results, scanned)
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2.0
    }
}

fn fnv1a(digest: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *digest ^= u64::from(b);
        *digest = digest.wrapping_mul(0x100000001b3);
    }
}

/// Runs the three retrieval methods on one synthetic corpus and
/// reports median throughputs plus a digest of the (timing-free)
/// result sets. The tree and the packed scan must agree exactly; that
/// is asserted here on every query.
pub fn speed_benchmark(config: SpeedBenchConfig) -> Result<SpeedReport, SpeedBenchError> {
    config.validate()?;
    let clusters = match config.distribution {
        BenchDistribution::Clustered => Some(CLUSTER_COUNT),
        BenchDistribution::Uniform => None,
    };
    let rows = float_rows(
        config.records + config.queries,
        config.dim,
        clusters,
        CLUSTER_NOISE,
        config.seed,
    );
    let (data_rows, query_rows) = rows.split_at(config.records);

    // Float side in f32, the precision embeddings ship in.
    let data_f32: Vec<f32> = data_rows.iter().flatten().map(|&v| v as f32).collect();
    let queries_f32: Vec<f32> = query_rows.iter().flatten().map(|&v| v as f32).collect();

    // Hash side: same vectors, sign-quantized at full width.
    let codes: Vec<HashCode> = data_rows
        .iter()
        .map(|r| sign_quantize_values(r).expect("synthetic rows are finite"))
        .collect();
    let query_codes: Vec<HashCode> = query_rows
        .iter()
        .map(|r| sign_quantize_values(r).expect("synthetic rows are finite"))
        .collect();
    let ids: Vec<u64> = (0..config.records as u64).collect();
    let points = PackedCodes::from_codes(&codes, config.dim)
        .expect("codes quantized at dim width");

    let mut store = CaseStore::new(config.dim, config.dim).with_index_params(IndexParams {
        leaf_size: config.leaf_size,
        build_seed: config.seed,
    });
    for (id, code) in ids.iter().zip(&codes) {
        store
            .push(LesionRecord {
                record_id: *id,
                polyp_id: *id,
                code: code.clone(),
                label: Label::UNLABELED,
            })
            .expect("widths match by construction");
    }
    let index = BallTreeIndex::from_store(&store)?;

    // Untimed pass: correctness check plus the determinism digest.
    let cosine_results = cosine_scan_batch(&data_f32, config.dim, &queries_f32, config.k);
    let scan_results = hamming_scan_batch(&points, &ids, &query_codes, config.k);
    let (tree_results, codes_scanned) = tree_batch(&index, &query_codes, config.k);
    for (scan, tree) in scan_results.iter().zip(&tree_results) {
        assert_eq!(
            scan.entries, tree.entries,
            "tree and packed scan must return identical neighbors"
        );
    }
    let mut digest = 0xcbf29ce484222325u64;
    for per_query in &cosine_results {
        for (score, id) in per_query {
            fnv1a(&mut digest, &score.to_bits().to_le_bytes());
            fnv1a(&mut digest, &id.to_le_bytes());
        }
    }
    for results in [&scan_results, &tree_results] {
        for neighbors in results.iter() {
            for entry in &neighbors.entries {
                fnv1a(&mut digest, &entry.distance.to_le_bytes());
                fnv1a(&mut digest, &entry.record_id.to_le_bytes());
            }
        }
    }

    let mut cosine_times = Vec::with_capacity(config.repeats);
    let mut scan_times = Vec::with_capacity(config.repeats);
    let mut tree_times = Vec::with_capacity(config.repeats);
    for _ in 0..config.repeats {
        let timer = Instant::now();
        let r = cosine_scan_batch(&data_f32, config.dim, &queries_f32, config.k);
        cosine_times.push(timer.elapsed().as_secs_f64());
        std::hint::black_box(r);

        let timer = Instant::now();
        let r = hamming_scan_batch(&points, &ids, &query_codes, config.k);
        scan_times.push(timer.elapsed().as_secs_f64());
        std::hint::black_box(r);

        let timer = Instant::now();
        let r = tree_batch(&index, &query_codes, config.k);
        tree_times.push(timer.elapsed().as_secs_f64());
        std::hint::black_box(r);
    }

    let timing = |times: &mut Vec<f64>| {
        let secs = median(times).max(1e-9);
        MethodTiming {
            median_batch_secs: secs,
            queries_per_sec: config.queries as f64 / secs,
        }
    };
    let cosine_scan = timing(&mut cosine_times);
    let hamming_scan = timing(&mut scan_times);
    let hamming_tree = timing(&mut tree_times);

    Ok(SpeedReport {
        records: config.records,
        dim: config.dim,
        hash_bits: config.dim,
        distribution: config.distribution,
        repeats: config.repeats,
        queries: config.queries,
        k: config.k,
        leaf_size: config.leaf_size,
        seed: config.seed,
        single_threaded: true,
        cosine_scan,
        hamming_scan,
        hamming_tree,
        hamming_scan_speedup_vs_cosine: hamming_scan.queries_per_sec
            / cosine_scan.queries_per_sec,
        tree_speedup_vs_cosine: hamming_tree.queries_per_sec / cosine_scan.queries_per_sec,
        tree_codes_scanned_fraction: codes_scanned as f64
            / (config.records as f64 * config.queries as f64),
        result_digest: format!("{digest:016x}"),
    })
}
