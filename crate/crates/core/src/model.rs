//! Domain types shared by every stage of the pipeline.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::HashCode;
use crate::index::DEFAULT_LEAF_SIZE;

/// Errors raised while constructing or validating domain values.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("embedding for polyp {polyp_id} view {view_id} contains a non-finite value")]
    NonFiniteValue { polyp_id: u64, view_id: u32 },
    #[error("embedding for polyp {polyp_id} view {view_id} is empty")]
    EmptyEmbedding { polyp_id: u64, view_id: u32 },
    #[error("scene for polyp {polyp_id} has no views")]
    EmptyScene { polyp_id: u64 },
    #[error("scene for polyp {polyp_id} mixes views of polyp {other}")]
    MixedPolypIds { polyp_id: u64, other: u64 },
    #[error("scene for polyp {polyp_id} repeats view id {view_id}")]
    DuplicateViewId { polyp_id: u64, view_id: u32 },
    #[error(
        "view {view_id} of polyp {polyp_id} has dimension {actual}, expected {expected}"
    )]
    ViewDimensionMismatch {
        polyp_id: u64,
        view_id: u32,
        expected: usize,
        actual: usize,
    },
    #[error("unknown label value {0}; expected -1 or a class index >= 0")]
    InvalidLabel(i32),
    #[error("label space must contain at least one class")]
    EmptyLabelSpace,
    #[error("expected {expected} class names, got {actual}")]
    ClassNameCountMismatch { expected: usize, actual: usize },
    #[error("record {record_id} has a {actual}-bit code, store expects {expected} bits")]
    CodeLengthMismatch {
        record_id: u64,
        expected: usize,
        actual: usize,
    },
    #[error("no labels present")]
    NoLabelsPresent,
}

/// Class assignment of a stored case: a dense class index, or unlabeled.
///
/// The raw wire value is an `i32`: `-1` means unlabeled, any value `>= 0`
/// is a class index. Values below `-1` are rejected at construction.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(i32);

impl Label {
    pub const UNLABELED: Label = Label(-1);

    /// Wraps a class index.
    pub fn class(index: usize) -> Label {
        Label(i32::try_from(index).expect("class index fits in i32"))
    }

    /// Parses the raw wire value, rejecting anything below `-1`.
    pub fn from_raw(raw: i32) -> Result<Label, ModelError> {
        if raw < -1 {
            return Err(ModelError::InvalidLabel(raw));
        }
        Ok(Label(raw))
    }

    pub fn raw(self) -> i32 {
        self.0
    }

    pub fn is_labeled(self) -> bool {
        self.0 >= 0
    }

    /// Class index, or `None` for the unlabeled sentinel.
    pub fn class_index(self) -> Option<usize> {
        if self.0 >= 0 {
            Some(self.0 as usize)
        } else {
            None
        }
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 0 {
            write!(f, "Label(unlabeled)")
        } else {
            write!(f, "Label({})", self.0)
        }
    }
}

/// One endoscopic view of a polyp, as a dense embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbedding {
    polyp_id: u64,
    view_id: u32,
    values: Vec<f64>,
}

impl ViewEmbedding {
    /// Validates that the vector is non-empty and fully finite.
    pub fn new(polyp_id: u64, view_id: u32, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptyEmbedding { polyp_id, view_id });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteValue { polyp_id, view_id });
        }
        Ok(ViewEmbedding {
            polyp_id,
            view_id,
            values,
        })
    }

    pub fn polyp_id(&self) -> u64 {
        self.polyp_id
    }

    pub fn view_id(&self) -> u32 {
        self.view_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// All captured views of one polyp, plus its (possibly absent) label.
///
/// Invariants enforced at construction: at least one view, all views
/// belong to the named polyp, view ids are unique, and all views share
/// one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewScene {
    polyp_id: u64,
    views: Vec<ViewEmbedding>,
    label: Label,
}

impl MultiViewScene {
    pub fn new(
        polyp_id: u64,
        views: Vec<ViewEmbedding>,
        label: Label,
    ) -> Result<Self, ModelError> {
        let first = views.first().ok_or(ModelError::EmptyScene { polyp_id })?;
        let dim = first.dimension();
        let mut seen = HashSet::with_capacity(views.len());
        for view in &views {
            if view.polyp_id != polyp_id {
                return Err(ModelError::MixedPolypIds {
                    polyp_id,
                    other: view.polyp_id,
                });
            }
            if view.dimension() != dim {
                return Err(ModelError::ViewDimensionMismatch {
                    polyp_id,
                    view_id: view.view_id,
                    expected: dim,
                    actual: view.dimension(),
                });
            }
            if !seen.insert(view.view_id) {
                return Err(ModelError::DuplicateViewId {
                    polyp_id,
                    view_id: view.view_id,
                });
            }
        }
        Ok(MultiViewScene {
            polyp_id,
            views,
            label,
        })
    }

    pub fn polyp_id(&self) -> u64 {
        self.polyp_id
    }

    pub fn views(&self) -> &[ViewEmbedding] {
        &self.views
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn dimension(&self) -> usize {
        self.views[0].dimension()
    }
}

/// Fused whole-scene embedding for one polyp.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEmbedding {
    pub polyp_id: u64,
    pub values: Vec<f64>,
}

impl SceneEmbedding {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// The set of class indices `0..num_classes` valid for a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(num_classes: usize) -> Result<Self, ModelError> {
        if num_classes == 0 {
            return Err(ModelError::EmptyLabelSpace);
        }
        Ok(LabelSpace {
            num_classes,
            class_names: None,
        })
    }

    pub fn with_names(num_classes: usize, names: Vec<String>) -> Result<Self, ModelError> {
        if names.len() != num_classes {
            return Err(ModelError::ClassNameCountMismatch {
                expected: num_classes,
                actual: names.len(),
            });
        }
        let mut space = LabelSpace::new(num_classes)?;
        space.class_names = Some(names);
        Ok(space)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_name(&self, index: usize) -> Option<&str> {
        self.class_names.as_ref()?.get(index).map(String::as_str)
    }

    /// True for the unlabeled sentinel and for in-range class indices.
    pub fn contains(&self, label: Label) -> bool {
        match label.class_index() {
            None => true,
            Some(c) => c < self.num_classes,
        }
    }
}

/// Smallest label space covering every labeled record: `0..=max` class.
///
/// Errors if no record carries a label.
pub fn infer_label_space(labels: &[Label]) -> Result<LabelSpace, ModelError> {
    let max = labels
        .iter()
        .filter_map(|l| l.class_index())
        .max()
        .ok_or(ModelError::NoLabelsPresent)?;
    LabelSpace::new(max + 1)
}

/// One stored case: a hashed scene with its identity and label.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionRecord {
    pub record_id: u64,
    pub polyp_id: u64,
    pub code: HashCode,
    pub label: Label,
}

/// Index construction parameters carried with a store so that the ball
/// tree can be rebuilt identically after a round trip through disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexParams {
    pub leaf_size: usize,
    pub build_seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            leaf_size: DEFAULT_LEAF_SIZE,
            build_seed: 0,
        }
    }
}

/// A single store invariant violation found by [`CaseStore::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreViolation {
    DuplicateRecordId {
        record_id: u64,
    },
    CodeLengthMismatch {
        record_id: u64,
        expected: usize,
        actual: usize,
    },
    LabelOutOfRange {
        record_id: u64,
        label: i32,
        num_classes: usize,
    },
}

impl StoreViolation {
    pub fn record_id(&self) -> u64 {
        match *self {
            StoreViolation::DuplicateRecordId { record_id }
            | StoreViolation::CodeLengthMismatch { record_id, .. }
            | StoreViolation::LabelOutOfRange { record_id, .. } => record_id,
        }
    }
}

impl fmt::Display for StoreViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StoreViolation::DuplicateRecordId { record_id } => {
                write!(f, "record {record_id}: duplicate record id")
            }
            StoreViolation::CodeLengthMismatch {
                record_id,
                expected,
                actual,
            } => write!(
                f,
                "record {record_id}: code is {actual} bits, store expects {expected}"
            ),
            StoreViolation::LabelOutOfRange {
                record_id,
                label,
                num_classes,
            } => write!(
                f,
                "record {record_id}: label {label} outside 0..{num_classes}"
            ),
        }
    }
}

/// In-memory database of hashed cases.
///
/// `dimension` is the embedding width queries are expected to arrive in;
/// `hash_bits` is the code length `K`. For stores built directly from
/// embeddings the two coincide unless the code was truncated at ingest.
/// Stores reloaded from a snapshot only know `K`, so `dimension == K`
/// there.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStore {
    dimension: usize,
    hash_bits: usize,
    label_space: Option<LabelSpace>,
    index_params: IndexParams,
    records: Vec<LesionRecord>,
}

impl CaseStore {
    pub fn new(dimension: usize, hash_bits: usize) -> Self {
        CaseStore {
            dimension,
            hash_bits,
            label_space: None,
            index_params: IndexParams::default(),
            records: Vec::new(),
        }
    }

    pub fn with_label_space(mut self, space: Option<LabelSpace>) -> Self {
        self.label_space = space;
        self
    }

    pub fn with_index_params(mut self, params: IndexParams) -> Self {
        self.index_params = params;
        self
    }

    /// Appends a record, checking only its code length; id uniqueness is
    /// left to [`CaseStore::validate`] so that bulk loads stay linear.
    pub fn push(&mut self, record: LesionRecord) -> Result<(), ModelError> {
        if record.code.bit_len() != self.hash_bits {
            return Err(ModelError::CodeLengthMismatch {
                record_id: record.record_id,
                expected: self.hash_bits,
                actual: record.code.bit_len(),
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn hash_bits(&self) -> usize {
        self.hash_bits
    }

    pub fn label_space(&self) -> Option<&LabelSpace> {
        self.label_space.as_ref()
    }

    pub fn index_params(&self) -> IndexParams {
        self.index_params
    }

    pub fn records(&self) -> &[LesionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels of all records, in record order.
    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Reports every invariant violation; an empty list means the store
    /// is well formed. Codes with stray bits beyond `hash_bits` cannot be
    /// represented by [`HashCode`], so only id uniqueness, code length,
    /// and label range need checking here.
    pub fn validate(&self) -> Vec<StoreViolation> {
        let mut violations = Vec::new();
        let mut seen = HashSet::with_capacity(self.records.len());
        for record in &self.records {
            if !seen.insert(record.record_id) {
                violations.push(StoreViolation::DuplicateRecordId {
                    record_id: record.record_id,
                });
            }
            if record.code.bit_len() != self.hash_bits {
                violations.push(StoreViolation::CodeLengthMismatch {
                    record_id: record.record_id,
                    expected: self.hash_bits,
                    actual: record.code.bit_len(),
                });
            }
            if let Some(space) = &self.label_space {
                if !space.contains(record.label) {
                    violations.push(StoreViolation::LabelOutOfRange {
                        record_id: record.record_id,
                        label: record.label.raw(),
                        num_classes: space.num_classes(),
                    });
                }
            }
        }
        violations
    }
}
