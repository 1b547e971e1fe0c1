//! Seeded synthetic data. Every generator is a pure function of its
//! arguments and a u64 seed, so tests and benchmarks reproduce exactly
//! across runs and machines.
//!
//! Scenes are built around per-polyp centroids on the unit sphere with
//! per-view Gaussian perturbation: averaging more views estimates the
//! centroid better, which is the geometry the retrieval benchmarks
//! lean on.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::fusion::{fuse_store, l2_normalize, FusionConfig, FusionError};
use crate::hashing::{sign_quantize_bits, HashError};
use crate::model::{
    infer_label_space, CaseStore, IndexParams, Label, LesionRecord, ModelError, MultiViewScene,
    ViewEmbedding,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("hash width {hash_bits} exceeds embedding dimension {dim}")]
    HashBitsTooWide { hash_bits: usize, dim: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    l2_normalize(&gaussian(rng, dim)).expect("gaussian draw has positive norm")
}

// `noise` is the expected norm ratio of perturbation to centroid, so
// one value means the same blur at any dimension.
fn perturbed_view(rng: &mut ChaCha8Rng, centroid: &[f64], noise: f64) -> Vec<f64> {
    let scale = noise / (centroid.len() as f64).sqrt();
    let mixed: Vec<f64> = centroid
        .iter()
        .map(|&c| c + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    l2_normalize(&mixed).expect("perturbed draw has positive norm")
}

/// Unlabeled multi-view scenes: one unit centroid per polyp, `views`
/// noisy observations of it. View ids run 0..views.
pub fn clustered_scenes(
    polyps: usize,
    views: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Vec<MultiViewScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..polyps)
        .map(|p| {
            let centroid = unit_gaussian(&mut rng, dim);
            let views = (0..views)
                .map(|v| {
                    ViewEmbedding::new(
                        p as u64,
                        v as u32,
                        perturbed_view(&mut rng, &centroid, noise),
                    )
                    .expect("synthetic view is finite and non-empty")
                })
                .collect();
            MultiViewScene::new(p as u64, views, Label::UNLABELED)
                .expect("synthetic scene is well formed")
        })
        .collect()
}

/// Binary-labeled scenes: polyp centroids drift `class_sep` along a
/// shared axis, sign chosen by class, class alternating with polyp id.
pub fn labeled_scenes(
    polyps: usize,
    views: usize,
    dim: usize,
    noise: f64,
    class_sep: f64,
    seed: u64,
) -> Vec<MultiViewScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = unit_gaussian(&mut rng, dim);
    (0..polyps)
        .map(|p| {
            let class = p % 2;
            let side = if class == 0 { 1.0 } else { -1.0 };
            let base = gaussian(&mut rng, dim);
            let centroid: Vec<f64> = base
                .iter()
                .zip(&axis)
                .map(|(b, a)| b + side * class_sep * a * (dim as f64).sqrt())
                .collect();
            let centroid = l2_normalize(&centroid).expect("shifted draw has positive norm");
            let views = (0..views)
                .map(|v| {
                    ViewEmbedding::new(
                        p as u64,
                        v as u32,
                        perturbed_view(&mut rng, &centroid, noise),
                    )
                    .expect("synthetic view is finite and non-empty")
                })
                .collect();
            MultiViewScene::new(p as u64, views, Label::class(class))
                .expect("synthetic scene is well formed")
        })
        .collect()
}

/// Unit-norm float rows for scan benchmarks. `clusters: Some(c)` draws
/// rows around c shared centroids; `None` gives an isotropic cloud
/// with uniform sign patterns.
pub fn float_rows(
    rows: usize,
    dim: usize,
    clusters: Option<usize>,
    noise: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match clusters {
        Some(c) => {
            let c = c.max(1);
            let centroids: Vec<Vec<f64>> = (0..c).map(|_| unit_gaussian(&mut rng, dim)).collect();
            (0..rows)
                .map(|i| perturbed_view(&mut rng, &centroids[i % c], noise))
                .collect()
        }
        None => (0..rows)
            .map(|_| {
                let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                l2_normalize(&raw).expect("uniform draw has positive norm")
            })
            .collect(),
    }
}

/// Fuses scenes and quantizes them into a ready-to-index store.
/// Synthetic records use the polyp id as record id. Label space is
/// inferred when any scene is labeled, otherwise left undeclared.
pub fn store_from_scenes(
    scenes: &[MultiViewScene],
    fusion: FusionConfig,
    hash_bits: Option<usize>,
    params: IndexParams,
) -> Result<CaseStore, SynthError> {
    let dim = scenes.first().map_or(0, |s| s.dimension());
    let bits = hash_bits.unwrap_or(dim);
    if bits > dim {
        return Err(SynthError::HashBitsTooWide {
            hash_bits: bits,
            dim,
        });
    }
    let labels: Vec<Label> = scenes.iter().map(|s| s.label()).collect();
    let space = infer_label_space(&labels).ok();
    let fused = fuse_store(scenes, fusion, None)?;

    let mut store = CaseStore::new(dim, bits)
        .with_label_space(space)
        .with_index_params(params);
    for (scene, embedding) in scenes.iter().zip(&fused) {
        store.push(LesionRecord {
            record_id: scene.polyp_id(),
            polyp_id: scene.polyp_id(),
            code: sign_quantize_bits(&embedding.values, bits)?,
            label: scene.label(),
        })?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_shaped() {
        let a = clustered_scenes(5, 3, 16, 0.2, 9);
        let b = clustered_scenes(5, 3, 16, 0.2, 9);
        let c = clustered_scenes(5, 3, 16, 0.2, 10);
        assert_eq!(a.len(), 5);
        assert_eq!(a[0].views().len(), 3);
        assert_eq!(a[0].dimension(), 16);
        assert_eq!(a[2].views()[1].values(), b[2].views()[1].values());
        assert_ne!(a[2].views()[1].values(), c[2].views()[1].values());
    }

    #[test]
    fn views_cluster_around_their_polyp() {
        let scenes = clustered_scenes(30, 2, 64, 0.3, 4);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        for scene in &scenes {
            let within = dot(scene.views()[0].values(), scene.views()[1].values());
            assert!(within > 0.5, "within-polyp similarity too low: {within}");
        }
        let across = dot(scenes[0].views()[0].values(), scenes[1].views()[0].values());
        assert!(across < 0.5, "cross-polyp similarity too high: {across}");
    }

    #[test]
    fn labeled_scenes_alternate_classes() {
        let scenes = labeled_scenes(6, 2, 32, 0.2, 1.0, 0);
        let classes: Vec<_> = scenes.iter().map(|s| s.label().class_index()).collect();
        assert_eq!(
            classes,
            vec![Some(0), Some(1), Some(0), Some(1), Some(0), Some(1)]
        );
    }

    #[test]
    fn float_rows_shapes_and_norms() {
        for rows in [float_rows(8, 32, Some(2), 0.1, 3), float_rows(8, 32, None, 0.0, 3)] {
            assert_eq!(rows.len(), 8);
            for row in &rows {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn store_from_scenes_assembles_and_truncates() {
        let scenes = labeled_scenes(10, 3, 32, 0.2, 1.0, 1);
        let store =
            store_from_scenes(&scenes, FusionConfig::default(), None, IndexParams::default())
                .unwrap();
        assert_eq!(store.len(), 10);
        assert_eq!(store.hash_bits(), 32);
        assert_eq!(store.label_space().unwrap().num_classes(), 2);
        assert!(store.validate().is_empty());

        let narrow =
            store_from_scenes(&scenes, FusionConfig::default(), Some(16), IndexParams::default())
                .unwrap();
        assert_eq!(narrow.hash_bits(), 16);

        assert!(matches!(
            store_from_scenes(&scenes, FusionConfig::default(), Some(64), IndexParams::default()),
            Err(SynthError::HashBitsTooWide { hash_bits: 64, dim: 32 })
        ));
    }
}
