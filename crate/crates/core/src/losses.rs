//! Forward passes and analytic gradients for the training objectives:
//! two contrastive InfoNCE variants, a hash-entropy regularizer, and a
//! masked reconstruction error.
//!
//! Embeddings are L2-normalized internally; similarities are cosines
//! scaled by `1/temperature`, and all log-sum-exp reductions are
//! max-shifted so large `1/temperature` values stay finite. Gradients
//! are taken with respect to the raw (pre-normalization) inputs, i.e.
//! they include the normalization Jacobian.
//!
//! The two InfoNCE variants differ only in the denominator. The
//! exclusive form drops an anchor's other positives from the negatives,
//! so a lone positive pair with no negatives contributes exactly zero.
//! The inclusive form ranks a positive against every other element.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("vector {index} has dimension {actual}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("vector {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("vector {index} has zero norm")]
    ZeroNormVector { index: usize },
    #[error("temperature must be a positive finite number")]
    InvalidTemperature,
    #[error("loss weights must be finite")]
    InvalidWeight,
    #[error("pair ({i}, {j}) is out of range for a batch of {len}")]
    PairOutOfRange { i: usize, j: usize, len: usize },
    #[error("element {i} cannot be its own positive")]
    SelfPair { i: usize },
    #[error("pair ({i}, {j}) appears more than once")]
    DuplicatePair { i: usize, j: usize },
    #[error("the positive pair set is empty")]
    EmptyPairSet,
    #[error("element {index} has no positives")]
    IndexWithoutPositives { index: usize },
    #[error("element {index} has no negatives")]
    NoNegatives { index: usize },
    #[error("element {index} coincides with negative {other}")]
    ZeroDistance { index: usize, other: usize },
    #[error("item {index} has an empty mask")]
    EmptyMask { index: usize },
    #[error("item {index} masks position {position} outside the image")]
    MaskOutOfRange { index: usize, position: usize },
    #[error("item {index}: original and reconstruction lengths differ")]
    ShapeMismatch { index: usize },
    #[error("originals, reconstructions, and masks must have equal counts")]
    CountMismatch,
}

/// A batch of embedding vectors with one common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl EmbeddingBatch {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self, LossError> {
        let first = vectors.first().ok_or(LossError::EmptyBatch)?;
        let dim = first.len();
        for (index, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(LossError::DimensionMismatch {
                    index,
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(LossError::NonFinite { index });
            }
        }
        Ok(EmbeddingBatch { vectors, dim })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Rows scaled to unit norm, with each row's original norm.
    fn normalized(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>), LossError> {
        let mut rows = Vec::with_capacity(self.vectors.len());
        let mut norms = Vec::with_capacity(self.vectors.len());
        for (index, v) in self.vectors.iter().enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(LossError::ZeroNormVector { index });
            }
            rows.push(v.iter().map(|x| x / norm).collect());
            norms.push(norm);
        }
        Ok((rows, norms))
    }
}

/// Directed positive-pair relation over a batch.
///
/// Pairs are ordered: `(i, j)` makes `j` a positive of anchor `i`.
/// Symmetric constructions are provided for the common cases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositivePairSet {
    len: usize,
    pairs: BTreeSet<(usize, usize)>,
    partners: Vec<Vec<usize>>,
}

impl PositivePairSet {
    pub fn new(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        batch_len: usize,
    ) -> Result<Self, LossError> {
        let mut set = BTreeSet::new();
        let mut partners = vec![Vec::new(); batch_len];
        for (i, j) in pairs {
            if i >= batch_len || j >= batch_len {
                return Err(LossError::PairOutOfRange {
                    i,
                    j,
                    len: batch_len,
                });
            }
            if i == j {
                return Err(LossError::SelfPair { i });
            }
            if !set.insert((i, j)) {
                return Err(LossError::DuplicatePair { i, j });
            }
            partners[i].push(j);
        }
        if set.is_empty() {
            return Err(LossError::EmptyPairSet);
        }
        for p in &mut partners {
            p.sort_unstable();
        }
        Ok(PositivePairSet {
            len: batch_len,
            pairs: set,
            partners,
        })
    }

    /// Both directions of every listed pair.
    pub fn from_unordered(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        batch_len: usize,
    ) -> Result<Self, LossError> {
        let mut directed = BTreeSet::new();
        for (i, j) in pairs {
            directed.insert((i, j));
            directed.insert((j, i));
        }
        Self::new(directed, batch_len)
    }

    /// Pairing for a batch laid out as `n` originals followed by their
    /// `n` augmentations: `(i, i+n)` and `(i+n, i)` for each `i`.
    pub fn augmented_views(n: usize) -> Result<Self, LossError> {
        Self::new(
            (0..n).flat_map(|i| [(i, i + n), (i + n, i)]),
            2 * n,
        )
    }

    /// All ordered pairs within each group of indices.
    pub fn from_groups(
        groups: &[Vec<usize>],
        batch_len: usize,
    ) -> Result<Self, LossError> {
        let mut pairs = Vec::new();
        for group in groups {
            for &i in group {
                for &j in group {
                    if i != j {
                        pairs.push((i, j));
                    }
                }
            }
        }
        Self::new(pairs, batch_len)
    }

    pub fn batch_len(&self) -> usize {
        self.len
    }

    /// Number of ordered pairs.
    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    /// Positives of anchor `i`, ascending.
    pub fn partners(&self, i: usize) -> &[usize] {
        &self.partners[i]
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.pairs.contains(&(i, j))
    }

    /// True when `k` is `i` itself or one of its positives.
    pub fn in_anchor_set(&self, i: usize, k: usize) -> bool {
        i == k || self.partners[i].binary_search(&k).is_ok()
    }

    fn require_all_anchored(&self) -> Result<(), LossError> {
        for (index, p) in self.partners.iter().enumerate() {
            if p.is_empty() {
                return Err(LossError::IndexWithoutPositives { index });
            }
        }
        Ok(())
    }
}

/// Weights combining the component losses into training totals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub entropy_weight: f64,
    pub reconstruction_weight: f64,
    pub scene_entropy_weight: f64,
    pub scene_reconstruction_weight: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: DEFAULT_TEMPERATURE,
            entropy_weight: 1.0,
            reconstruction_weight: 1.0,
            scene_entropy_weight: 1.0,
            scene_reconstruction_weight: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        check_temperature(self.temperature)?;
        let weights = [
            self.entropy_weight,
            self.reconstruction_weight,
            self.scene_entropy_weight,
            self.scene_reconstruction_weight,
        ];
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(LossError::InvalidWeight);
        }
        Ok(())
    }
}

fn check_temperature(temperature: f64) -> Result<(), LossError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(LossError::InvalidTemperature);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Temperature-scaled cosine similarity matrix: `s[i][j] = cos(z_i, z_j)
/// / temperature`.
pub fn pairwise_similarity(
    batch: &EmbeddingBatch,
    temperature: f64,
) -> Result<Vec<Vec<f64>>, LossError> {
    check_temperature(temperature)?;
    let (rows, _) = batch.normalized()?;
    let m = rows.len();
    let mut sims = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let s = dot(&rows[i], &rows[j]) / temperature;
            sims[i][j] = s;
            sims[j][i] = s;
        }
    }
    Ok(sims)
}

/// Max-shifted `log(sum(exp(terms)))`.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Contrastive loss whose denominator excludes the anchor's other
/// positives: each positive competes only against true negatives.
///
/// Per anchor `i` and positive `j`:
/// `-log( exp(s_ij) / (exp(s_ij) + sum_{k not in P_i, k != i} exp(s_ik)) )`,
/// averaged first over an anchor's positives, then over anchors. Every
/// element must appear as an anchor of at least one pair. With a single
/// positive pair and no negatives the ratio is 1 and the loss exactly 0.
pub fn infonce_exclusive(
    batch: &EmbeddingBatch,
    pairs: &PositivePairSet,
    temperature: f64,
) -> Result<f64, LossError> {
    check_pair_batch(batch, pairs)?;
    pairs.require_all_anchored()?;
    let sims = pairwise_similarity(batch, temperature)?;
    let m = batch.len();
    let mut total = 0.0;
    for i in 0..m {
        let negatives: Vec<usize> =
            (0..m).filter(|&k| !pairs.in_anchor_set(i, k)).collect();
        let mut per_anchor = 0.0;
        for &j in pairs.partners(i) {
            let mut terms = Vec::with_capacity(negatives.len() + 1);
            terms.push(sims[i][j]);
            terms.extend(negatives.iter().map(|&k| sims[i][k]));
            per_anchor += log_sum_exp(&terms) - sims[i][j];
        }
        total += per_anchor / pairs.partners(i).len() as f64;
    }
    Ok(total / m as f64)
}

/// Contrastive loss whose denominator ranges over every other element,
/// other positives included.
///
/// Per ordered pair `(i, j)`:
/// `-log( exp(s_ij) / sum_{k != i} exp(s_ik) )`, averaged over pairs.
pub fn infonce_inclusive(
    batch: &EmbeddingBatch,
    pairs: &PositivePairSet,
    temperature: f64,
) -> Result<f64, LossError> {
    check_pair_batch(batch, pairs)?;
    let sims = pairwise_similarity(batch, temperature)?;
    let m = batch.len();
    if m < 2 {
        return Err(LossError::NoNegatives { index: 0 });
    }
    let mut total = 0.0;
    for i in 0..m {
        if pairs.partners(i).is_empty() {
            continue;
        }
        let terms: Vec<f64> = (0..m).filter(|&k| k != i).map(|k| sims[i][k]).collect();
        let lse = log_sum_exp(&terms);
        for &j in pairs.partners(i) {
            total += lse - sims[i][j];
        }
    }
    Ok(total / pairs.pair_count() as f64)
}

/// Distance handling for [`entropy_regularizer`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntropyOptions {
    /// Measure distances between raw vectors instead of normalized ones.
    pub raw_distances: bool,
}

fn nearest_negative(
    rows: &[Vec<f64>],
    pairs: &PositivePairSet,
    i: usize,
) -> Result<(usize, f64), LossError> {
    let mut best: Option<(usize, f64)> = None;
    for (k, row) in rows.iter().enumerate() {
        if pairs.in_anchor_set(i, k) {
            continue;
        }
        let dist = rows[i]
            .iter()
            .zip(row)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if best.is_none_or(|(_, d)| dist < d) {
            best = Some((k, dist));
        }
    }
    let (k, d) = best.ok_or(LossError::NoNegatives { index: i })?;
    if d <= 0.0 {
        return Err(LossError::ZeroDistance { index: i, other: k });
    }
    Ok((k, d))
}

/// Pushes codes apart: the negated mean log distance from each element
/// to its nearest non-positive.
///
/// `-mean_i log( min_{k not in P_i, k != i} ||z_i - z_k|| )`, over
/// normalized vectors unless `raw_distances` is set. Every element needs
/// at least one negative at a strictly positive distance.
pub fn entropy_regularizer(
    batch: &EmbeddingBatch,
    pairs: &PositivePairSet,
    opts: EntropyOptions,
) -> Result<f64, LossError> {
    check_pair_batch(batch, pairs)?;
    let rows: Vec<Vec<f64>> = if opts.raw_distances {
        batch.vectors().to_vec()
    } else {
        batch.normalized()?.0
    };
    let m = rows.len();
    let mut total = 0.0;
    for i in 0..m {
        let (_, d) = nearest_negative(&rows, pairs, i)?;
        total += d.ln();
    }
    Ok(-total / m as f64)
}

/// Per-image reconstructions scored only at masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImageBatch {
    originals: Vec<Vec<f64>>,
    reconstructions: Vec<Vec<f64>>,
    masks: Vec<Vec<usize>>,
}

impl MaskedImageBatch {
    pub fn new(
        originals: Vec<Vec<f64>>,
        reconstructions: Vec<Vec<f64>>,
        masks: Vec<Vec<usize>>,
    ) -> Result<Self, LossError> {
        if originals.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        if originals.len() != reconstructions.len() || originals.len() != masks.len() {
            return Err(LossError::CountMismatch);
        }
        for (index, ((orig, rec), mask)) in originals
            .iter()
            .zip(&reconstructions)
            .zip(&masks)
            .enumerate()
        {
            if orig.len() != rec.len() {
                return Err(LossError::ShapeMismatch { index });
            }
            if orig.iter().chain(rec.iter()).any(|x| !x.is_finite()) {
                return Err(LossError::NonFinite { index });
            }
            if mask.is_empty() {
                return Err(LossError::EmptyMask { index });
            }
            if let Some(&position) = mask.iter().find(|&&p| p >= orig.len()) {
                return Err(LossError::MaskOutOfRange { index, position });
            }
        }
        Ok(MaskedImageBatch {
            originals,
            reconstructions,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }
}

/// Mean squared error over masked positions only, averaged per image
/// and then over the batch.
pub fn masked_mse(batch: &MaskedImageBatch) -> Result<f64, LossError> {
    let mut total = 0.0;
    for ((orig, rec), mask) in batch
        .originals
        .iter()
        .zip(&batch.reconstructions)
        .zip(&batch.masks)
    {
        let sum: f64 = mask
            .iter()
            .map(|&p| {
                let e = rec[p] - orig[p];
                e * e
            })
            .sum();
        total += sum / mask.len() as f64;
    }
    Ok(total / batch.originals.len() as f64)
}

/// Component values to be combined into a weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub infonce: f64,
    pub entropy: f64,
    pub reconstruction: f64,
}

/// Image-level total: contrastive + weighted entropy + weighted
/// reconstruction.
pub fn total_image_loss(parts: &LossParts, cfg: &ContrastiveConfig) -> f64 {
    parts.infonce
        + cfg.entropy_weight * parts.entropy
        + cfg.reconstruction_weight * parts.reconstruction
}

/// Scene-level total, with its own weight pair.
pub fn total_scene_loss(parts: &LossParts, cfg: &ContrastiveConfig) -> f64 {
    parts.infonce
        + cfg.scene_entropy_weight * parts.entropy
        + cfg.scene_reconstruction_weight * parts.reconstruction
}

fn check_pair_batch(
    batch: &EmbeddingBatch,
    pairs: &PositivePairSet,
) -> Result<(), LossError> {
    if pairs.batch_len() != batch.len() {
        return Err(LossError::PairOutOfRange {
            i: pairs.batch_len(),
            j: 0,
            len: batch.len(),
        });
    }
    Ok(())
}

/// Chains a gradient with respect to the normalized vector back through
/// normalization: `dL/dz = (g - (g . zhat) zhat) / ||z||`.
fn through_normalization(
    grad_normalized: &[Vec<f64>],
    rows: &[Vec<f64>],
    norms: &[f64],
) -> Vec<Vec<f64>> {
    grad_normalized
        .iter()
        .zip(rows)
        .zip(norms)
        .map(|((g, zhat), &norm)| {
            let radial = dot(g, zhat);
            g.iter()
                .zip(zhat)
                .map(|(gi, zi)| (gi - radial * zi) / norm)
                .collect()
        })
        .collect()
}

/// Spreads similarity-matrix coefficients onto normalized-row gradients:
/// `dL/dzhat_i = (1/tau) * sum_j (C_ij + C_ji) zhat_j`.
fn similarity_grad_to_rows(
    coeff: &[Vec<f64>],
    rows: &[Vec<f64>],
    temperature: f64,
) -> Vec<Vec<f64>> {
    let m = rows.len();
    let dim = rows[0].len();
    let mut grad = vec![vec![0.0; dim]; m];
    for i in 0..m {
        for j in 0..m {
            let w = (coeff[i][j] + coeff[j][i]) / temperature;
            if w == 0.0 {
                continue;
            }
            for d in 0..dim {
                grad[i][d] += w * rows[j][d];
            }
        }
    }
    grad
}

/// Softmax over `terms` shifted by the running max.
fn stable_softmax(terms: &[f64]) -> Vec<f64> {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// [`infonce_exclusive`] with its gradient with respect to the raw
/// batch.
pub fn infonce_exclusive_grad(
    batch: &EmbeddingBatch,
    pairs: &PositivePairSet,
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    check_pair_batch(batch, pairs)?;
    pairs.require_all_anchored()?;
    check_temperature(temperature)?;
    let (rows, norms) = batch.normalized()?;
    let m = batch.len();
    let sims = pairwise_similarity(batch, temperature)?;

    let mut coeff = vec![vec![0.0; m]; m];
    let mut loss = 0.0;
    for i in 0..m {
        let negatives: Vec<usize> =
            (0..m).filter(|&k| !pairs.in_anchor_set(i, k)).collect();
        let anchor_weight = 1.0 / (m as f64 * pairs.partners(i).len() as f64);
        for &j in pairs.partners(i) {
            let mut terms = Vec::with_capacity(negatives.len() + 1);
            terms.push(sims[i][j]);
            terms.extend(negatives.iter().map(|&k| sims[i][k]));
            loss += anchor_weight * (log_sum_exp(&terms) - sims[i][j]);
            let probs = stable_softmax(&terms);
            coeff[i][j] += anchor_weight * (probs[0] - 1.0);
            for (t, &k) in negatives.iter().enumerate() {
                coeff[i][k] += anchor_weight * probs[t + 1];
            }
        }
    }
    let grad_rows = similarity_grad_to_rows(&coeff, &rows, temperature);
    Ok((loss, through_normalization(&grad_rows, &rows, &norms)))
}

/// [`infonce_inclusive`] with its gradient with respect to the raw
/// batch.
pub fn infonce_inclusive_grad(
    batch: &EmbeddingBatch,
    pairs: &PositivePairSet,
    temperature: f64,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    check_pair_batch(batch, pairs)?;
    check_temperature(temperature)?;
    let (rows, norms) = batch.normalized()?;
    let m = batch.len();
    if m < 2 {
        return Err(LossError::NoNegatives { index: 0 });
    }
    let sims = pairwise_similarity(batch, temperature)?;

    let pair_weight = 1.0 / pairs.pair_count() as f64;
    let mut coeff = vec![vec![0.0; m]; m];
    let mut loss = 0.0;
    for i in 0..m {
        let anchored = pairs.partners(i);
        if anchored.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..m).filter(|&k| k != i).collect();
        let terms: Vec<f64> = others.iter().map(|&k| sims[i][k]).collect();
        let lse = log_sum_exp(&terms);
        let probs = stable_softmax(&terms);
        let fan_out = anchored.len() as f64;
        for &j in anchored {
            loss += pair_weight * (lse - sims[i][j]);
            coeff[i][j] -= pair_weight;
        }
        for (t, &k) in others.iter().enumerate() {
            coeff[i][k] += pair_weight * fan_out * probs[t];
        }
    }
    let grad_rows = similarity_grad_to_rows(&coeff, &rows, temperature);
    Ok((loss, through_normalization(&grad_rows, &rows, &norms)))
}

/// [`entropy_regularizer`] with its gradient with respect to the raw
/// batch. Ties in the nearest-negative choice resolve to the lowest
/// index, matching the forward pass.
pub fn entropy_regularizer_grad(
    batch: &EmbeddingBatch,
    pairs: &PositivePairSet,
    opts: EntropyOptions,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    check_pair_batch(batch, pairs)?;
    let m = batch.len();
    let dim = batch.dim();
    let (rows, norms) = if opts.raw_distances {
        (batch.vectors().to_vec(), Vec::new())
    } else {
        let (rows, norms) = batch.normalized()?;
        (rows, norms)
    };

    let mut loss = 0.0;
    let mut grad_rows = vec![vec![0.0; dim]; m];
    for i in 0..m {
        let (k, d) = nearest_negative(&rows, pairs, i)?;
        loss -= d.ln() / m as f64;
        let scale = -1.0 / (m as f64 * d * d);
        for t in 0..dim {
            let diff = rows[i][t] - rows[k][t];
            grad_rows[i][t] += scale * diff;
            grad_rows[k][t] -= scale * diff;
        }
    }
    if opts.raw_distances {
        Ok((loss, grad_rows))
    } else {
        Ok((loss, through_normalization(&grad_rows, &rows, &norms)))
    }
}

/// [`masked_mse`] with its gradient with respect to the reconstructions.
pub fn masked_mse_grad(
    batch: &MaskedImageBatch,
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let m = batch.originals.len();
    let mut grad: Vec<Vec<f64>> = batch
        .reconstructions
        .iter()
        .map(|r| vec![0.0; r.len()])
        .collect();
    let mut loss = 0.0;
    for (index, ((orig, rec), mask)) in batch
        .originals
        .iter()
        .zip(&batch.reconstructions)
        .zip(&batch.masks)
        .enumerate()
    {
        let weight = 1.0 / (m as f64 * mask.len() as f64);
        for &p in mask {
            let e = rec[p] - orig[p];
            loss += weight * e * e;
            grad[index][p] += 2.0 * weight * e;
        }
    }
    Ok((loss, grad))
}
