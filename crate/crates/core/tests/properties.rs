//! Randomized invariants: metric axioms for packed codes, quantizer and
//! container layout rules, loss symmetries, ranking-metric stability
//! under monotone rescoring, fold partitioning, tree and scan
//! agreement, and snapshot round-trips.

use std::collections::HashMap;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hashscope_core::eval::{
    acc_at_1, kfold_split, micro_average_precision, recall_at_p90, roc_auc, ReidTask, ScoreTable,
};
use hashscope_core::fusion::{fuse_average, FusionConfig};
use hashscope_core::hashing::{
    hamming_distance, hamming_to_cosine, sign_quantize_bits, words_for, HashCode, PackedCodes,
};
use hashscope_core::index::{knn_ball_tree, knn_linear_scan, BallTreeIndex};
use hashscope_core::losses::{
    entropy_regularizer, infonce_exclusive, infonce_inclusive, EmbeddingBatch, EntropyOptions,
    PositivePairSet,
};
use hashscope_core::model::{
    CaseStore, IndexParams, Label, LabelSpace, LesionRecord, MultiViewScene, ViewEmbedding,
};
use hashscope_core::snapshot::{read_snapshot, write_snapshot};

fn bit_codes(count: usize) -> impl Strategy<Value = (usize, Vec<Vec<bool>>)> {
    (1usize..=96).prop_flat_map(move |bits| {
        vec(vec(any::<bool>(), bits), count)
            .prop_map(move |codes| (bits, codes))
    })
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn hamming_is_a_metric((bits, codes) in bit_codes(3)) {
        let a = HashCode::from_bits(&codes[0]);
        let b = HashCode::from_bits(&codes[1]);
        let c = HashCode::from_bits(&codes[2]);
        let ab = hamming_distance(&a, &b).unwrap();
        let ba = hamming_distance(&b, &a).unwrap();
        let ac = hamming_distance(&a, &c).unwrap();
        let cb = hamming_distance(&c, &b).unwrap();
        prop_assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        prop_assert_eq!(ab, ba);
        prop_assert!(ab as usize <= bits);
        prop_assert!(ab <= ac + cb);
        if ab == 0 {
            prop_assert_eq!(a.words(), b.words());
        }
    }

    #[test]
    fn quantizer_sets_bits_by_sign_and_zeroes_padding(
        (values, bits) in vec(-100.0f64..100.0, 1..=150).prop_flat_map(|vals| {
            let len = vals.len();
            (Just(vals), 1..=len)
        })
    ) {
        let code = sign_quantize_bits(&values, bits).unwrap();
        prop_assert_eq!(code.bit_len(), bits);
        for k in 0..bits {
            prop_assert_eq!(code.bit(k), values[k] >= 0.0);
        }
        prop_assert_eq!(code.words().len(), words_for(bits));
        if bits % 64 != 0 {
            let mask = (1u64 << (bits % 64)) - 1;
            prop_assert_eq!(code.words()[words_for(bits) - 1] & !mask, 0);
        }
    }

    #[test]
    fn packed_rows_match_loose_codes((bits, codes) in bit_codes(6)) {
        let codes: Vec<HashCode> = codes.iter().map(|c| HashCode::from_bits(c)).collect();
        let packed = PackedCodes::from_codes(&codes, bits).unwrap();
        let query = &codes[0];
        for (i, code) in codes.iter().enumerate() {
            prop_assert_eq!(&packed.unpack_row(i), code);
            let naive: u32 = (0..bits)
                .filter(|&k| code.bit(k) != query.bit(k))
                .count() as u32;
            prop_assert_eq!(packed.distance_to_row(i, query.words()), naive);
            prop_assert_eq!(hamming_distance(code, query).unwrap(), naive);
        }
    }

    #[test]
    fn sign_vector_cosine_equals_hamming_identity((bits, codes) in bit_codes(2)) {
        let a = HashCode::from_bits(&codes[0]);
        let b = HashCode::from_bits(&codes[1]);
        let sa = a.to_sign_vector();
        let sb = b.to_sign_vector();
        let dot: f64 = sa.iter().zip(&sb).map(|(x, y)| x * y).sum();
        let cosine = dot / (norm(&sa) * norm(&sb));
        let distance = hamming_distance(&a, &b).unwrap();
        let mapped = hamming_to_cosine(distance, bits).unwrap();
        prop_assert!((cosine - mapped).abs() < 1e-12);
    }

    #[test]
    fn fused_embedding_ignores_per_view_scale(
        (views, scales) in (1usize..=5, 2usize..=16).prop_flat_map(|(v, dim)| {
            (
                vec(vec(-5.0f64..5.0, dim..=dim), v..=v),
                vec(0.1f64..10.0, v..=v),
            )
        })
    ) {
        for view in &views {
            prop_assume!(norm(view) > 1e-6);
        }
        let build = |rows: Vec<Vec<f64>>| {
            let views: Vec<ViewEmbedding> = rows
                .into_iter()
                .enumerate()
                .map(|(i, vals)| ViewEmbedding::new(0, i as u32, vals).unwrap())
                .collect();
            MultiViewScene::new(0, views, Label::UNLABELED).unwrap()
        };
        let base = fuse_average(&build(views.clone()), FusionConfig::default()).unwrap();
        let scaled_rows: Vec<Vec<f64>> = views
            .iter()
            .zip(&scales)
            .map(|(row, &s)| row.iter().map(|v| v * s).collect())
            .collect();
        let scaled = fuse_average(&build(scaled_rows), FusionConfig::default()).unwrap();
        for (x, y) in base.values.iter().zip(&scaled.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

fn paired_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<usize>>)> {
    (2usize..=4, 2usize..=6).prop_flat_map(|(groups, dim)| {
        vec(vec(-3.0f64..3.0, dim..=dim), 2 * groups)
            .prop_map(|rows| {
                let groups: Vec<Vec<usize>> = (0..rows.len() / 2)
                    .map(|g| vec![2 * g, 2 * g + 1])
                    .collect();
                (rows, groups)
            })
    })
}

fn losses_of(
    rows: &[Vec<f64>],
    groups: &[Vec<usize>],
    temperature: f64,
) -> Option<(f64, f64, f64)> {
    let batch = EmbeddingBatch::new(rows.to_vec()).ok()?;
    let pairs = PositivePairSet::from_groups(groups, batch.len()).ok()?;
    let exclusive = infonce_exclusive(&batch, &pairs, temperature).ok()?;
    let inclusive = infonce_inclusive(&batch, &pairs, temperature).ok()?;
    let entropy = entropy_regularizer(&batch, &pairs, EntropyOptions::default()).ok()?;
    Some((exclusive, inclusive, entropy))
}

proptest! {
    #[test]
    fn losses_are_permutation_invariant(
        (rows, groups) in paired_batch(),
        perm_seed in any::<u64>(),
    ) {
        let base = losses_of(&rows, &groups, 0.2);
        prop_assume!(base.is_some());
        let (exclusive, inclusive, entropy) = base.unwrap();

        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        // order[new] = old; position[old] = new
        let mut position = vec![0usize; rows.len()];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        let shuffled_rows: Vec<Vec<f64>> =
            order.iter().map(|&old| rows[old].clone()).collect();
        let shuffled_groups: Vec<Vec<usize>> = groups
            .iter()
            .map(|group| group.iter().map(|&i| position[i]).collect())
            .collect();
        let (p_exclusive, p_inclusive, p_entropy) =
            losses_of(&shuffled_rows, &shuffled_groups, 0.2).unwrap();
        prop_assert!((exclusive - p_exclusive).abs() < 1e-9);
        prop_assert!((inclusive - p_inclusive).abs() < 1e-9);
        prop_assert!((entropy - p_entropy).abs() < 1e-9);
    }

    #[test]
    fn losses_ignore_positive_rescaling_of_a_row(
        (rows, groups) in paired_batch(),
        target in any::<prop::sample::Index>(),
        factor in 0.2f64..5.0,
    ) {
        let base = losses_of(&rows, &groups, 0.2);
        prop_assume!(base.is_some());
        let (exclusive, inclusive, entropy) = base.unwrap();
        let mut scaled = rows.clone();
        let i = target.index(scaled.len());
        for v in &mut scaled[i] {
            *v *= factor;
        }
        let (s_exclusive, s_inclusive, s_entropy) =
            losses_of(&scaled, &groups, 0.2).unwrap();
        prop_assert!((exclusive - s_exclusive).abs() < 1e-9);
        prop_assert!((inclusive - s_inclusive).abs() < 1e-9);
        prop_assert!((entropy - s_entropy).abs() < 1e-9);
    }

    #[test]
    fn exclusive_contrastive_loss_is_nonnegative((rows, groups) in paired_batch()) {
        let base = losses_of(&rows, &groups, 0.2);
        prop_assume!(base.is_some());
        prop_assert!(base.unwrap().0 >= -1e-12);
    }
}

/// Scores drawn from a coarse grid so ties survive affine and cubic
/// remapping exactly.
fn grid_task() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1usize..=6, 1usize..=8).prop_flat_map(|(q, r)| {
        (
            Just(q),
            Just(r),
            vec((-100i32..100).prop_map(|v| v as f64 / 8.0), q * r),
            vec(0usize..r, q),
        )
    })
}

fn task_metrics(
    q: usize,
    r: usize,
    scores: &[f64],
    truth: &[usize],
) -> (f64, f64, f64) {
    let queries: Vec<(u64, usize)> = (0..q).map(|i| (i as u64, i)).collect();
    let references: Vec<(u64, usize)> = (0..r).map(|j| (100 + j as u64, j)).collect();
    let ground_truth: HashMap<u64, u64> = truth
        .iter()
        .enumerate()
        .map(|(i, &j)| (i as u64, 100 + j as u64))
        .collect();
    let task = ReidTask::new(queries, references, ground_truth).unwrap();
    let table: ScoreTable = task.score_with(|&qi, &rj| scores[qi * r + rj]).unwrap();
    (
        micro_average_precision(&task, &table).unwrap(),
        acc_at_1(&task, &table).unwrap(),
        recall_at_p90(&task, &table).unwrap(),
    )
}

proptest! {
    #[test]
    fn ranking_metrics_survive_monotone_rescoring(
        (q, r, scores, truth) in grid_task(),
        a in 0.1f64..4.0,
        b in -5.0f64..5.0,
    ) {
        let base = task_metrics(q, r, &scores, &truth);
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(base, task_metrics(q, r, &affine, &truth));
        prop_assert_eq!(base, task_metrics(q, r, &cubic, &truth));
    }

    #[test]
    fn auc_complement_sums_to_one(
        scores in vec((-100i32..100).prop_map(|v| v as f64 / 8.0), 2..=60),
        labels in vec(any::<bool>(), 2..=60),
    ) {
        let n = scores.len().min(labels.len());
        let scores = &scores[..n];
        let labels = &labels[..n];
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let forward = roc_auc(scores, labels).unwrap();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let backward = roc_auc(&negated, labels).unwrap();
        prop_assert!((forward + backward - 1.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&forward));
    }

    #[test]
    fn folds_partition_the_polyps(
        ids in vec(0u64..50, 2..=40),
        folds_pick in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let mut unique = ids.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assume!(unique.len() >= 2);
        let folds = 2 + folds_pick.index(unique.len() - 1);
        let splits = kfold_split(&ids, folds, seed).unwrap();
        prop_assert_eq!(splits.len(), folds);

        let mut covered: Vec<u64> = Vec::new();
        let (mut min_size, mut max_size) = (usize::MAX, 0usize);
        for split in &splits {
            min_size = min_size.min(split.test.len());
            max_size = max_size.max(split.test.len());
            covered.extend(&split.test);
            let mut train_and_test = split.train.clone();
            train_and_test.extend(&split.test);
            train_and_test.sort_unstable();
            prop_assert_eq!(&train_and_test, &unique);
        }
        covered.sort_unstable();
        prop_assert_eq!(&covered, &unique);
        prop_assert!(max_size - min_size <= 1);

        let again = kfold_split(&ids, folds, seed).unwrap();
        prop_assert_eq!(&splits, &again);
    }
}

fn code_store() -> impl Strategy<Value = (usize, Vec<Vec<bool>>, usize, u64)> {
    (1usize..=96, 1usize..=60).prop_flat_map(|(bits, n)| {
        (
            Just(bits),
            vec(vec(any::<bool>(), bits), n),
            1usize..=8,
            any::<u64>(),
        )
    })
}

fn store_of(bits: usize, codes: &[Vec<bool>], leaf_size: usize, seed: u64) -> CaseStore {
    let mut store = CaseStore::new(bits, bits).with_index_params(IndexParams {
        leaf_size,
        build_seed: seed,
    });
    for (i, code) in codes.iter().enumerate() {
        store
            .push(LesionRecord {
                record_id: 3 * i as u64 + 1,
                polyp_id: i as u64 / 2,
                code: HashCode::from_bits(code),
                label: Label::UNLABELED,
            })
            .unwrap();
    }
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tree_and_scan_return_identical_rankings(
        (bits, codes, leaf_size, seed) in code_store(),
        query_bits in vec(any::<bool>(), 96),
        k_pick in any::<prop::sample::Index>(),
    ) {
        let store = store_of(bits, &codes, leaf_size, seed);
        let k = 1 + k_pick.index(codes.len() + 2);
        let query = HashCode::from_bits(&query_bits[..bits]);
        let index = BallTreeIndex::from_store(&store).unwrap();
        let from_tree = knn_ball_tree(&index, &query, k).unwrap();

        let loose: Vec<HashCode> = store.records().iter().map(|r| r.code.clone()).collect();
        let ids: Vec<u64> = store.records().iter().map(|r| r.record_id).collect();
        let packed = PackedCodes::from_codes(&loose, bits).unwrap();
        let from_scan = knn_linear_scan(&packed, &ids, &query, k).unwrap();
        prop_assert_eq!(from_tree, from_scan);
    }

    #[test]
    fn snapshots_round_trip_and_resave_identically(
        (bits, codes, leaf_size, seed) in code_store(),
        raw_labels in vec(-1i32..4, 60),
        classes in 0usize..=3,
    ) {
        let mut store = store_of(bits, &codes, leaf_size, seed);
        let space = match classes {
            0 => None,
            c => Some(LabelSpace::new(c + 1).unwrap()),
        };
        store = store.with_label_space(space);
        let relabeled: Vec<LesionRecord> = store
            .records()
            .iter()
            .zip(&raw_labels)
            .map(|(record, &raw)| LesionRecord {
                label: Label::from_raw(raw).unwrap(),
                ..record.clone()
            })
            .collect();
        let mut store = CaseStore::new(bits, bits)
            .with_index_params(IndexParams { leaf_size, build_seed: seed })
            .with_label_space(match classes {
                0 => None,
                c => Some(LabelSpace::new(c + 1).unwrap()),
            });
        for record in relabeled {
            store.push(record).unwrap();
        }

        let mut first = Vec::new();
        write_snapshot(&store, &mut first).unwrap();
        let loaded = read_snapshot(first.as_slice()).unwrap();
        prop_assert_eq!(&loaded, &store);
        let mut second = Vec::new();
        write_snapshot(&loaded, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }
}
