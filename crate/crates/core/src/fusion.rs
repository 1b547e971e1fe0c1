//! Average fusion of per-view embeddings into one scene embedding.
//!
//! Views are optionally L2-normalized first so that each contributes
//! equally regardless of scale, then averaged componentwise, and the
//! mean is optionally L2-normalized again. Both switches default on.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::{MultiViewScene, SceneEmbedding, ViewEmbedding};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("degenerate fusion: views of polyp {polyp_id} average to the zero vector")]
    DegenerateFusion { polyp_id: u64 },
    #[error("view filter leaves no views for polyp {polyp_id}")]
    EmptyAfterFilter { polyp_id: u64 },
}

/// Whether to L2-normalize each view before averaging and the fused
/// mean after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub normalize_inputs: bool,
    pub normalize_output: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            normalize_inputs: true,
            normalize_output: true,
        }
    }
}

/// Scales a vector to unit L2 norm.
pub fn l2_normalize(values: &[f64]) -> Result<Vec<f64>, FusionError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite);
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(FusionError::ZeroNorm);
    }
    Ok(values.iter().map(|v| v / norm).collect())
}

fn fuse_views(
    polyp_id: u64,
    views: &[&ViewEmbedding],
    cfg: FusionConfig,
) -> Result<SceneEmbedding, FusionError> {
    debug_assert!(!views.is_empty());
    let dim = views[0].dimension();
    let mut sum = vec![0.0f64; dim];
    for view in views {
        if cfg.normalize_inputs {
            let unit = l2_normalize(view.values())?;
            for (s, v) in sum.iter_mut().zip(&unit) {
                *s += v;
            }
        } else {
            for (s, v) in sum.iter_mut().zip(view.values()) {
                *s += v;
            }
        }
    }
    let count = views.len() as f64;
    for s in &mut sum {
        *s /= count;
    }
    if cfg.normalize_output {
        sum = l2_normalize(&sum)
            .map_err(|_| FusionError::DegenerateFusion { polyp_id })?;
    }
    Ok(SceneEmbedding {
        polyp_id,
        values: sum,
    })
}

/// Fuses every view of a scene into one embedding.
pub fn fuse_average(
    scene: &MultiViewScene,
    cfg: FusionConfig,
) -> Result<SceneEmbedding, FusionError> {
    let views: Vec<&ViewEmbedding> = scene.views().iter().collect();
    fuse_views(scene.polyp_id(), &views, cfg)
}

/// Fuses each scene in turn, optionally restricted to a subset of view
/// ids. Scenes the filter empties are an error rather than silently
/// dropped, so retrieval protocols cannot lose polyps.
pub fn fuse_store(
    scenes: &[MultiViewScene],
    cfg: FusionConfig,
    view_filter: Option<&BTreeSet<u32>>,
) -> Result<Vec<SceneEmbedding>, FusionError> {
    scenes
        .iter()
        .map(|scene| {
            let views: Vec<&ViewEmbedding> = match view_filter {
                Some(keep) => scene
                    .views()
                    .iter()
                    .filter(|v| keep.contains(&v.view_id()))
                    .collect(),
                None => scene.views().iter().collect(),
            };
            if views.is_empty() {
                return Err(FusionError::EmptyAfterFilter {
                    polyp_id: scene.polyp_id(),
                });
            }
            fuse_views(scene.polyp_id(), &views, cfg)
        })
        .collect()
}
