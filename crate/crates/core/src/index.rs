//! Exact k-nearest-neighbor search in Hamming space: a brute-force
//! linear scan and a ball tree that prunes with the triangle inequality.
//!
//! Both return identical results for identical inputs, including ties:
//! neighbors are ordered by ascending `(distance, record_id)`, and the
//! tree only skips a subtree when its lower bound strictly exceeds the
//! current k-th best distance, so equal-distance candidates with smaller
//! ids are never lost.
//!
//! Construction is deterministic: the split seed point is drawn from a
//! ChaCha8 stream keyed by `build_seed`, and all argmax scans resolve
//! ties to the earliest member. Two builds over the same store with the
//! same parameters produce identical node arrays.

use std::collections::BinaryHeap;
use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hashing::{hamming_words, HashCode, HashError, PackedCodes};
use crate::model::CaseStore;

pub const DEFAULT_LEAF_SIZE: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("cannot build an index over an empty store")]
    EmptyStore,
    #[error("leaf size must be at least 1")]
    InvalidLeafSize,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query code is {actual} bits, index holds {expected}-bit codes")]
    QueryLengthMismatch { expected: usize, actual: usize },
    #[error("{ids} ids for {points} points")]
    IdCountMismatch { points: usize, ids: usize },
    #[error(transparent)]
    Hash(#[from] HashError),
}

/// One retrieved neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborEntry {
    pub record_id: u64,
    pub distance: u32,
}

/// Neighbors sorted by ascending `(distance, record_id)`. Holds fewer
/// than `requested_k` entries when the candidate pool is smaller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedNeighbors {
    pub entries: Vec<NeighborEntry>,
    pub requested_k: usize,
}

/// Work counters for one tree query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub nodes_visited: u64,
    pub codes_scanned: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeKind {
    Leaf,
    Internal { left: u32, right: u32 },
}

/// Ball over the members `perm[start..end]`; `center` is a row index
/// into the packed code matrix and `radius` the max Hamming distance
/// from it to any member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Node {
    center: u32,
    radius: u32,
    start: u32,
    end: u32,
    kind: NodeKind,
}

/// Hamming-metric ball tree over a store's codes.
///
/// Codes stay in record order; leaves reference them through `perm`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BallTreeIndex {
    nodes: Vec<Node>,
    perm: Vec<u32>,
    points: PackedCodes,
    ids: Vec<u64>,
    leaf_size: usize,
    build_seed: u64,
}

struct Builder<'a> {
    points: &'a PackedCodes,
    perm: &'a mut Vec<u32>,
    nodes: &'a mut Vec<Node>,
    rng: ChaCha8Rng,
    leaf_size: usize,
}

impl Builder<'_> {
    fn distance(&self, a: u32, b: u32) -> u32 {
        hamming_words(self.points.row(a as usize), self.points.row(b as usize))
    }

    /// First index attaining the maximum, so ties never depend on
    /// iteration incidentals.
    fn farthest_from(&self, row: u32, start: usize, end: usize) -> (usize, u32) {
        let mut best_pos = start;
        let mut best_dist = 0u32;
        for pos in start..end {
            let d = self.distance(row, self.perm[pos]);
            if d > best_dist {
                best_dist = d;
                best_pos = pos;
            }
        }
        (best_pos, best_dist)
    }

    fn build_range(&mut self, start: usize, end: usize) -> u32 {
        let len = end - start;
        let node_index = self.nodes.len() as u32;
        if len <= self.leaf_size {
            let center = self.perm[start];
            let (_, radius) = self.farthest_from(center, start, end);
            self.nodes.push(Node {
                center,
                radius,
                start: start as u32,
                end: end as u32,
                kind: NodeKind::Leaf,
            });
            return node_index;
        }

        let seed_pos = start + self.rng.random_range(0..len);
        let seed_row = self.perm[seed_pos];
        let (pivot_a_pos, _) = self.farthest_from(seed_row, start, end);
        let pivot_a = self.perm[pivot_a_pos];

        let mut radius = 0u32;
        let mut pivot_b = pivot_a;
        let mut dist_a = vec![0u32; len];
        for pos in start..end {
            let d = self.distance(pivot_a, self.perm[pos]);
            dist_a[pos - start] = d;
            if d > radius {
                radius = d;
                pivot_b = self.perm[pos];
            }
        }

        let mut left_rows = Vec::with_capacity(len);
        let mut right_rows = Vec::new();
        if radius == 0 {
            // All members coincide; split by position to keep recursion
            // finite.
            left_rows.extend_from_slice(&self.perm[start..start + len / 2]);
            right_rows.extend_from_slice(&self.perm[start + len / 2..end]);
        } else {
            for pos in start..end {
                let row = self.perm[pos];
                let d_b = self.distance(pivot_b, row);
                if dist_a[pos - start] <= d_b {
                    left_rows.push(row);
                } else {
                    right_rows.push(row);
                }
            }
        }
        debug_assert!(!left_rows.is_empty() && !right_rows.is_empty());
        let mid = start + left_rows.len();
        self.perm[start..mid].copy_from_slice(&left_rows);
        self.perm[mid..end].copy_from_slice(&right_rows);

        self.nodes.push(Node {
            center: pivot_a,
            radius,
            start: start as u32,
            end: end as u32,
            kind: NodeKind::Leaf, // patched below
        });
        let left = self.build_range(start, mid);
        let right = self.build_range(mid, end);
        self.nodes[node_index as usize].kind = NodeKind::Internal { left, right };
        node_index
    }
}

/// Builds the tree for a store with explicit parameters.
pub fn build_ball_tree(
    store: &CaseStore,
    leaf_size: usize,
    build_seed: u64,
) -> Result<BallTreeIndex, IndexError> {
    if store.is_empty() {
        return Err(IndexError::EmptyStore);
    }
    if leaf_size == 0 {
        return Err(IndexError::InvalidLeafSize);
    }
    let codes: Vec<HashCode> = store.records().iter().map(|r| r.code.clone()).collect();
    let points = PackedCodes::from_codes(&codes, store.hash_bits())?;
    let ids: Vec<u64> = store.records().iter().map(|r| r.record_id).collect();
    let mut perm: Vec<u32> = (0..store.len() as u32).collect();
    let mut nodes = Vec::with_capacity(2 * store.len() / leaf_size.max(1) + 1);
    let mut builder = Builder {
        points: &points,
        perm: &mut perm,
        nodes: &mut nodes,
        rng: ChaCha8Rng::seed_from_u64(build_seed),
        leaf_size,
    };
    builder.build_range(0, store.len());
    Ok(BallTreeIndex {
        nodes,
        perm,
        points,
        ids,
        leaf_size,
        build_seed,
    })
}

impl BallTreeIndex {
    /// Builds with the parameters carried by the store itself.
    pub fn from_store(store: &CaseStore) -> Result<BallTreeIndex, IndexError> {
        let params = store.index_params();
        build_ball_tree(store, params.leaf_size, params.build_seed)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bit_len(&self) -> usize {
        self.points.bit_len()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn build_seed(&self) -> u64 {
        self.build_seed
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn points(&self) -> &PackedCodes {
        &self.points
    }

    fn search(
        &self,
        node_index: u32,
        query: &[u64],
        heap: &mut KBest,
        exclude: Option<&HashSet<u64>>,
        stats: &mut QueryStats,
    ) {
        let node = &self.nodes[node_index as usize];
        stats.nodes_visited += 1;
        match node.kind {
            NodeKind::Leaf => {
                for &row in &self.perm[node.start as usize..node.end as usize] {
                    let id = self.ids[row as usize];
                    if exclude.is_some_and(|ex| ex.contains(&id)) {
                        continue;
                    }
                    let d = self.points.distance_to_row(row as usize, query);
                    stats.codes_scanned += 1;
                    heap.offer(d, id);
                }
            }
            NodeKind::Internal { left, right } => {
                let bound_of = |child: u32| {
                    let n = &self.nodes[child as usize];
                    let d = self
                        .points
                        .distance_to_row(n.center as usize, query);
                    d.saturating_sub(n.radius)
                };
                let lb_left = bound_of(left);
                let lb_right = bound_of(right);
                let order = if lb_left <= lb_right {
                    [(left, lb_left), (right, lb_right)]
                } else {
                    [(right, lb_right), (left, lb_left)]
                };
                for (child, lower_bound) in order {
                    // Strict comparison: an equal bound can still hide an
                    // equal-distance neighbor with a smaller record id.
                    if lower_bound > heap.prune_bound() {
                        continue;
                    }
                    self.search(child, query, heap, exclude, stats);
                }
            }
        }
    }
}

/// Bounded max-heap keeping the k smallest `(distance, record_id)` pairs.
struct KBest {
    heap: BinaryHeap<(u32, u64)>,
    k: usize,
}

impl KBest {
    fn new(k: usize) -> KBest {
        KBest {
            heap: BinaryHeap::with_capacity(k + 1),
            k,
        }
    }

    #[inline]
    fn offer(&mut self, distance: u32, record_id: u64) {
        if self.heap.len() < self.k {
            self.heap.push((distance, record_id));
        } else if let Some(&worst) = self.heap.peek() {
            if (distance, record_id) < worst {
                self.heap.pop();
                self.heap.push((distance, record_id));
            }
        }
    }

    /// Largest distance still worth exploring; `u32::MAX` until full.
    #[inline]
    fn prune_bound(&self) -> u32 {
        if self.heap.len() < self.k {
            u32::MAX
        } else {
            self.heap.peek().map_or(u32::MAX, |&(d, _)| d)
        }
    }

    fn into_ranked(self, requested_k: usize) -> RankedNeighbors {
        let entries = self
            .heap
            .into_sorted_vec()
            .into_iter()
            .map(|(distance, record_id)| NeighborEntry {
                record_id,
                distance,
            })
            .collect();
        RankedNeighbors {
            entries,
            requested_k,
        }
    }
}

/// Exact k nearest neighbors via the ball tree.
pub fn knn_ball_tree(
    index: &BallTreeIndex,
    query: &HashCode,
    k: usize,
) -> Result<RankedNeighbors, IndexError> {
    knn_ball_tree_filtered(index, query, k, None).map(|(r, _)| r)
}

/// Tree search with an optional id exclusion set and work counters.
pub fn knn_ball_tree_filtered(
    index: &BallTreeIndex,
    query: &HashCode,
    k: usize,
    exclude: Option<&HashSet<u64>>,
) -> Result<(RankedNeighbors, QueryStats), IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    if query.bit_len() != index.bit_len() {
        return Err(IndexError::QueryLengthMismatch {
            expected: index.bit_len(),
            actual: query.bit_len(),
        });
    }
    let mut heap = KBest::new(k);
    let mut stats = QueryStats::default();
    index.search(0, query.words(), &mut heap, exclude, &mut stats);
    Ok((heap.into_ranked(k), stats))
}

/// Exact k nearest neighbors by scanning every row.
pub fn knn_linear_scan(
    points: &PackedCodes,
    ids: &[u64],
    query: &HashCode,
    k: usize,
) -> Result<RankedNeighbors, IndexError> {
    knn_linear_scan_filtered(points, ids, query, k, None)
}

/// Linear scan with an optional id exclusion set. An empty matrix is a
/// valid input and yields an empty result.
pub fn knn_linear_scan_filtered(
    points: &PackedCodes,
    ids: &[u64],
    query: &HashCode,
    k: usize,
    exclude: Option<&HashSet<u64>>,
) -> Result<RankedNeighbors, IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    if ids.len() != points.len() {
        return Err(IndexError::IdCountMismatch {
            points: points.len(),
            ids: ids.len(),
        });
    }
    if query.bit_len() != points.bit_len() {
        return Err(IndexError::QueryLengthMismatch {
            expected: points.bit_len(),
            actual: query.bit_len(),
        });
    }
    let mut heap = KBest::new(k);
    for (row, &id) in ids.iter().enumerate() {
        if exclude.is_some_and(|ex| ex.contains(&id)) {
            continue;
        }
        heap.offer(points.distance_to_row(row, query.words()), id);
    }
    Ok(heap.into_ranked(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::sign_quantize_values;
    use crate::model::{Label, LesionRecord};
    use rand::RngCore;

    fn random_store(n: usize, bits: usize, seed: u64) -> CaseStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = CaseStore::new(bits, bits);
        for id in 0..n as u64 {
            let values: Vec<f64> = (0..bits)
                .map(|_| if rng.next_u32() & 1 == 0 { 1.0 } else { -1.0 })
                .collect();
            store
                .push(LesionRecord {
                    record_id: id,
                    polyp_id: id,
                    code: sign_quantize_values(&values).unwrap(),
                    label: Label::UNLABELED,
                })
                .unwrap();
        }
        store
    }

    fn scan_of(store: &CaseStore, query: &HashCode, k: usize) -> RankedNeighbors {
        let codes: Vec<HashCode> =
            store.records().iter().map(|r| r.code.clone()).collect();
        let points = PackedCodes::from_codes(&codes, store.hash_bits()).unwrap();
        let ids: Vec<u64> = store.records().iter().map(|r| r.record_id).collect();
        knn_linear_scan(&points, &ids, query, k).unwrap()
    }

    #[test]
    fn tree_matches_scan_on_small_random_stores() {
        for seed in 0..8u64 {
            let store = random_store(97, 64, seed);
            let index = build_ball_tree(&store, 8, seed).unwrap();
            for q in 0..20u64 {
                let query = store.records()[(q as usize * 5) % 97].code.clone();
                let from_tree = knn_ball_tree(&index, &query, 7).unwrap();
                let from_scan = scan_of(&store, &query, 7);
                assert_eq!(from_tree, from_scan);
            }
        }
    }

    #[test]
    fn identical_builds_are_identical_structures() {
        let store = random_store(200, 128, 11);
        let a = build_ball_tree(&store, 16, 42).unwrap();
        let b = build_ball_tree(&store, 16, 42).unwrap();
        assert_eq!(a, b);
        let c = build_ball_tree(&store, 16, 43).unwrap();
        assert_eq!(knn_ball_tree(&c, &store.records()[0].code, 5).unwrap(),
                   knn_ball_tree(&a, &store.records()[0].code, 5).unwrap());
    }

    #[test]
    fn k_larger_than_store_returns_everything_ranked() {
        let store = random_store(5, 64, 3);
        let index = build_ball_tree(&store, 2, 0).unwrap();
        let result = knn_ball_tree(&index, &store.records()[2].code, 50).unwrap();
        assert_eq!(result.entries.len(), 5);
        assert_eq!(result.requested_k, 50);
        for pair in result.entries.windows(2) {
            assert!(
                (pair[0].distance, pair[0].record_id)
                    < (pair[1].distance, pair[1].record_id)
            );
        }
    }

    #[test]
    fn ties_resolve_by_ascending_record_id() {
        // Three records share one code; two others are distinct.
        let mut store = CaseStore::new(8, 8);
        let same = sign_quantize_values(&[1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
            .unwrap();
        for id in [9u64, 3, 6] {
            store
                .push(LesionRecord {
                    record_id: id,
                    polyp_id: id,
                    code: same.clone(),
                    label: Label::UNLABELED,
                })
                .unwrap();
        }
        let far = sign_quantize_values(&[-1.0; 8]).unwrap();
        store
            .push(LesionRecord {
                record_id: 1,
                polyp_id: 1,
                code: far,
                label: Label::UNLABELED,
            })
            .unwrap();
        let index = build_ball_tree(&store, 2, 0).unwrap();
        let result = knn_ball_tree(&index, &same, 3).unwrap();
        let ids: Vec<u64> = result.entries.iter().map(|e| e.record_id).collect();
        assert_eq!(ids, vec![3, 6, 9]);
        assert!(result.entries.iter().all(|e| e.distance == 0));
    }

    #[test]
    fn exclusion_is_applied_identically_in_both_paths() {
        let store = random_store(60, 64, 7);
        let index = build_ball_tree(&store, 8, 1).unwrap();
        let exclude: HashSet<u64> = [0u64, 5, 17, 59].into_iter().collect();
        let query = store.records()[5].code.clone();
        let (tree, _) =
            knn_ball_tree_filtered(&index, &query, 6, Some(&exclude)).unwrap();
        let codes: Vec<HashCode> =
            store.records().iter().map(|r| r.code.clone()).collect();
        let points = PackedCodes::from_codes(&codes, 64).unwrap();
        let ids: Vec<u64> = (0..60).collect();
        let scan =
            knn_linear_scan_filtered(&points, &ids, &query, 6, Some(&exclude)).unwrap();
        assert_eq!(tree, scan);
        assert!(tree.entries.iter().all(|e| !exclude.contains(&e.record_id)));
    }

    #[test]
    fn duplicate_heavy_store_still_exact() {
        // Forces the zero-diameter fallback split.
        let mut store = CaseStore::new(16, 16);
        let code = sign_quantize_values(&[1.0; 16]).unwrap();
        for id in 0..50u64 {
            store
                .push(LesionRecord {
                    record_id: id,
                    polyp_id: id,
                    code: code.clone(),
                    label: Label::UNLABELED,
                })
                .unwrap();
        }
        let index = build_ball_tree(&store, 4, 9).unwrap();
        let result = knn_ball_tree(&index, &code, 5).unwrap();
        let ids: Vec<u64> = result.entries.iter().map(|e| e.record_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_scan_input_yields_empty_result() {
        let points = PackedCodes::from_codes(&[], 32).unwrap();
        let query = HashCode::from_bits(&[true; 32]);
        let result = knn_linear_scan(&points, &[], &query, 4).unwrap();
        assert!(result.entries.is_empty());
    }

    #[test]
    fn parameter_validation() {
        let store = random_store(10, 32, 0);
        assert_eq!(
            build_ball_tree(&CaseStore::new(32, 32), 4, 0),
            Err(IndexError::EmptyStore)
        );
        assert_eq!(
            build_ball_tree(&store, 0, 0),
            Err(IndexError::InvalidLeafSize)
        );
        let index = build_ball_tree(&store, 4, 0).unwrap();
        let query = HashCode::from_bits(&[true; 32]);
        assert_eq!(
            knn_ball_tree(&index, &query, 0),
            Err(IndexError::InvalidK)
        );
        let short = HashCode::from_bits(&[true; 16]);
        assert_eq!(
            knn_ball_tree(&index, &short, 3),
            Err(IndexError::QueryLengthMismatch {
                expected: 32,
                actual: 16
            })
        );
    }

    #[test]
    fn clustered_data_prunes_subtrees() {
        // Two tight clusters far apart; querying inside one should not
        // visit most of the other.
        let mut store = CaseStore::new(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in 0..400u64 {
            let base = if id < 200 { 1.0 } else { -1.0 };
            let values: Vec<f64> = (0..64)
                .map(|_| {
                    if rng.next_u32() % 16 == 0 {
                        -base
                    } else {
                        base
                    }
                })
                .collect();
            store
                .push(LesionRecord {
                    record_id: id,
                    polyp_id: id,
                    code: sign_quantize_values(&values).unwrap(),
                    label: Label::UNLABELED,
                })
                .unwrap();
        }
        let index = build_ball_tree(&store, 8, 0).unwrap();
        let (result, stats) = knn_ball_tree_filtered(
            &index,
            &store.records()[0].code,
            6,
            None,
        )
        .unwrap();
        assert_eq!(result.entries.len(), 6);
        assert!(
            stats.codes_scanned < 400,
            "no pruning happened: {stats:?}"
        );
    }
}
