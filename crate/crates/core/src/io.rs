//! On-disk interchange: the little-endian embedding container, the
//! label and pair sidecars, and the ingest path that groups view rows
//! into scenes and assembles an indexable store.
//!
//! Container layout, all little-endian: magic "EFEM", u32 version = 1,
//! u32 dimension, u64 row count; then per row u64 record_id,
//! u64 polyp_id, u32 view_id, i32 label, dimension x f32. Parse errors
//! carry the byte offset they were detected at.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Deserialize;
use thiserror::Error;

use crate::fusion::{fuse_store, FusionConfig, FusionError};
use crate::hashing::{sign_quantize_bits, HashError};
use crate::model::{
    CaseStore, IndexParams, Label, LabelSpace, LesionRecord, ModelError, MultiViewScene,
    ViewEmbedding,
};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"EFEM";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("not an embedding container (bad magic at byte 0)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed container at byte {offset}: {reason}")]
    Malformed { offset: u64, reason: String },
    #[error("trailing bytes after the declared rows at byte {offset}")]
    TrailingData { offset: u64 },
    #[error("label sidecar line {line}: {reason}")]
    BadSidecarLine { line: usize, reason: String },
    #[error("pair sidecar: {0}")]
    BadPairFile(String),
    #[error("no records in embedding input")]
    NoRecords,
    #[error("duplicate record id {0}")]
    DuplicateRecordId(u64),
    #[error("duplicate view {view_id} for polyp {polyp_id}")]
    DuplicateView { polyp_id: u64, view_id: u32 },
    #[error("views of polyp {polyp_id} disagree on label ({first} vs {second})")]
    LabelConflict { polyp_id: u64, first: i32, second: i32 },
    #[error("row for record {record_id} has {actual} values, container declares {expected}")]
    DimensionMismatch {
        record_id: u64,
        expected: usize,
        actual: usize,
    },
    #[error("row for record {record_id} holds a non-finite value")]
    NonFiniteValue { record_id: u64 },
    #[error("hash width {hash_bits} exceeds embedding dimension {dim}")]
    HashBitsTooWide { hash_bits: usize, dim: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// One view row as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub record_id: u64,
    pub polyp_id: u64,
    pub view_id: u32,
    pub label: i32,
    pub values: Vec<f32>,
}

/// A parsed container: declared dimension plus rows in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn truncated(offset: u64, what: &str, err: io::Error) -> IoError {
    if err.kind() == io::ErrorKind::UnexpectedEof {
        IoError::Malformed {
            offset,
            reason: format!("unexpected end of file while reading {what}"),
        }
    } else {
        IoError::Io(err)
    }
}

/// Serializes rows; every row must match `dim` and be finite.
pub fn write_embeddings<W: Write>(
    dim: usize,
    rows: &[EmbeddingRow],
    writer: &mut W,
) -> Result<(), IoError> {
    for row in rows {
        if row.values.len() != dim {
            return Err(IoError::DimensionMismatch {
                record_id: row.record_id,
                expected: dim,
                actual: row.values.len(),
            });
        }
        if row.values.iter().any(|v| !v.is_finite()) {
            return Err(IoError::NonFiniteValue {
                record_id: row.record_id,
            });
        }
    }
    writer.write_all(&EMBEDDING_MAGIC)?;
    writer.write_u32::<LittleEndian>(EMBEDDING_VERSION)?;
    writer.write_u32::<LittleEndian>(dim as u32)?;
    writer.write_u64::<LittleEndian>(rows.len() as u64)?;
    for row in rows {
        writer.write_u64::<LittleEndian>(row.record_id)?;
        writer.write_u64::<LittleEndian>(row.polyp_id)?;
        writer.write_u32::<LittleEndian>(row.view_id)?;
        writer.write_i32::<LittleEndian>(row.label)?;
        for &v in &row.values {
            writer.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Parses a container, validating the header, per-row finiteness, and
/// that the payload ends exactly where the declared count says.
pub fn read_embeddings<R: Read>(reader: R) -> Result<EmbeddingFile, IoError> {
    let mut r = CountingReader {
        inner: reader,
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| truncated(0, "magic", e))?;
    if magic != EMBEDDING_MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| truncated(4, "version", e))?;
    if version != EMBEDDING_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|e| truncated(8, "dimension", e))? as usize;
    if dim == 0 {
        return Err(IoError::Malformed {
            offset: 8,
            reason: "dimension must be positive".to_string(),
        });
    }
    let count = r
        .read_u64::<LittleEndian>()
        .map_err(|e| truncated(12, "row count", e))?;

    let mut rows = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let at = r.offset;
        let record_id = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(at, "record id", e))?;
        let polyp_id = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(r.offset, "polyp id", e))?;
        let view_id = r
            .read_u32::<LittleEndian>()
            .map_err(|e| truncated(r.offset, "view id", e))?;
        let label = r
            .read_i32::<LittleEndian>()
            .map_err(|e| truncated(r.offset, "label", e))?;
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = r.offset;
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(|e| truncated(at, "embedding value", e))?;
            if !v.is_finite() {
                return Err(IoError::Malformed {
                    offset: at,
                    reason: format!("non-finite value in row {i} (record {record_id})"),
                });
            }
            values.push(v);
        }
        rows.push(EmbeddingRow {
            record_id,
            polyp_id,
            view_id,
            label,
            values,
        });
    }
    let mut probe = [0u8; 1];
    let at = r.offset;
    if r.read(&mut probe)? != 0 {
        return Err(IoError::TrailingData { offset: at });
    }
    Ok(EmbeddingFile { dim, rows })
}

pub fn save_embeddings(dim: usize, rows: &[EmbeddingRow], path: &Path) -> Result<(), IoError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_embeddings(dim, rows, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile, IoError> {
    read_embeddings(BufReader::new(File::open(path)?))
}

/// Flattens scenes into container rows with sequential record ids.
pub fn rows_from_scenes(scenes: &[MultiViewScene]) -> Vec<EmbeddingRow> {
    let mut rows = Vec::new();
    for scene in scenes {
        for view in scene.views() {
            rows.push(EmbeddingRow {
                record_id: rows.len() as u64,
                polyp_id: scene.polyp_id(),
                view_id: view.view_id(),
                label: scene.label().raw(),
                values: view.values().iter().map(|&v| v as f32).collect(),
            });
        }
    }
    rows
}

#[derive(Deserialize)]
struct LabelLine {
    polyp_id: u64,
    label: i32,
}

/// Reads the JSONL label sidecar, one `{polyp_id, label}` object per
/// line, blank lines skipped. A repeated polyp keeps the last value
/// and adds a warning.
pub fn read_label_sidecar<R: Read>(
    reader: R,
) -> Result<(BTreeMap<u64, i32>, Vec<String>), IoError> {
    let mut labels = BTreeMap::new();
    let mut warnings = Vec::new();
    for (index, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabelLine =
            serde_json::from_str(&line).map_err(|e| IoError::BadSidecarLine {
                line: index + 1,
                reason: e.to_string(),
            })?;
        if labels.insert(parsed.polyp_id, parsed.label).is_some() {
            warnings.push(format!(
                "label sidecar repeats polyp {}, keeping the last value",
                parsed.polyp_id
            ));
        }
    }
    Ok((labels, warnings))
}

pub fn load_label_sidecar(path: &Path) -> Result<(BTreeMap<u64, i32>, Vec<String>), IoError> {
    read_label_sidecar(File::open(path)?)
}

#[derive(Deserialize)]
struct PairFile {
    pairs: Vec<(usize, usize)>,
}

/// Reads the JSON pair sidecar `{"pairs": [[i, j], ...]}` of unordered
/// row-index pairs.
pub fn read_pair_sidecar<R: Read>(reader: R) -> Result<Vec<(usize, usize)>, IoError> {
    let parsed: PairFile =
        serde_json::from_reader(reader).map_err(|e| IoError::BadPairFile(e.to_string()))?;
    Ok(parsed.pairs)
}

pub fn load_pair_sidecar(path: &Path) -> Result<Vec<(usize, usize)>, IoError> {
    read_pair_sidecar(File::open(path)?)
}

struct PolypGroup {
    polyp_id: u64,
    min_record_id: u64,
    label: i32,
    views: Vec<ViewEmbedding>,
}

fn group(file: &EmbeddingFile) -> Result<Vec<PolypGroup>, IoError> {
    let mut record_ids = std::collections::HashSet::new();
    let mut groups: BTreeMap<u64, PolypGroup> = BTreeMap::new();
    for row in &file.rows {
        if row.values.len() != file.dim {
            return Err(IoError::DimensionMismatch {
                record_id: row.record_id,
                expected: file.dim,
                actual: row.values.len(),
            });
        }
        if !record_ids.insert(row.record_id) {
            return Err(IoError::DuplicateRecordId(row.record_id));
        }
        let view = ViewEmbedding::new(
            row.polyp_id,
            row.view_id,
            row.values.iter().map(|&v| f64::from(v)).collect(),
        )?;
        match groups.get_mut(&row.polyp_id) {
            None => {
                groups.insert(
                    row.polyp_id,
                    PolypGroup {
                        polyp_id: row.polyp_id,
                        min_record_id: row.record_id,
                        label: row.label,
                        views: vec![view],
                    },
                );
            }
            Some(existing) => {
                if existing.views.iter().any(|v| v.view_id() == row.view_id) {
                    return Err(IoError::DuplicateView {
                        polyp_id: row.polyp_id,
                        view_id: row.view_id,
                    });
                }
                if existing.label != row.label {
                    return Err(IoError::LabelConflict {
                        polyp_id: row.polyp_id,
                        first: existing.label,
                        second: row.label,
                    });
                }
                existing.min_record_id = existing.min_record_id.min(row.record_id);
                existing.views.push(view);
            }
        }
    }
    let mut out: Vec<PolypGroup> = groups.into_values().collect();
    for g in &mut out {
        g.views.sort_by_key(|v| v.view_id());
    }
    Ok(out)
}

/// Groups container rows into validated scenes, embedded labels as-is.
pub fn group_scenes(file: &EmbeddingFile) -> Result<Vec<MultiViewScene>, IoError> {
    group(file)?
        .into_iter()
        .map(|g| {
            let label = Label::from_raw(g.label)?;
            Ok(MultiViewScene::new(g.polyp_id, g.views, label)?)
        })
        .collect()
}

/// Store assembly plus any non-fatal notes collected on the way.
#[derive(Debug)]
pub struct IngestOutcome {
    pub store: CaseStore,
    pub warnings: Vec<String>,
}

/// Full ingest: group by polyp, merge sidecar labels (sidecar wins on
/// conflict, with a warning), fuse, quantize, assemble. The fused
/// record keeps the smallest record id among its views. A store with
/// any labeled polyp declares at least two classes so a later vote has
/// a complete score vector.
pub fn build_store(
    file: &EmbeddingFile,
    sidecar: Option<&BTreeMap<u64, i32>>,
    fusion: FusionConfig,
    hash_bits: Option<usize>,
    params: IndexParams,
) -> Result<IngestOutcome, IoError> {
    if file.rows.is_empty() {
        return Err(IoError::NoRecords);
    }
    let bits = hash_bits.unwrap_or(file.dim);
    if bits > file.dim {
        return Err(IoError::HashBitsTooWide {
            hash_bits: bits,
            dim: file.dim,
        });
    }

    let mut warnings = Vec::new();
    let mut groups = group(file)?;
    if let Some(sidecar) = sidecar {
        let known: std::collections::HashSet<u64> =
            groups.iter().map(|g| g.polyp_id).collect();
        for &polyp_id in sidecar.keys() {
            if !known.contains(&polyp_id) {
                warnings.push(format!("label sidecar mentions unknown polyp {polyp_id}"));
            }
        }
        for g in &mut groups {
            if let Some(&label) = sidecar.get(&g.polyp_id) {
                if label != g.label && g.label != Label::UNLABELED.raw() {
                    warnings.push(format!(
                        "sidecar overrides label for polyp {}: {} -> {}",
                        g.polyp_id, g.label, label
                    ));
                }
                g.label = label;
            }
        }
    }

    let mut scenes = Vec::with_capacity(groups.len());
    let mut min_record_ids = Vec::with_capacity(groups.len());
    for g in groups {
        let label = Label::from_raw(g.label)?;
        min_record_ids.push(g.min_record_id);
        scenes.push(MultiViewScene::new(g.polyp_id, g.views, label)?);
    }

    let labels: Vec<Label> = scenes.iter().map(|s| s.label()).collect();
    let space = match crate::model::infer_label_space(&labels) {
        Ok(space) => Some(LabelSpace::new(space.num_classes().max(2))?),
        Err(ModelError::NoLabelsPresent) => None,
        Err(e) => return Err(e.into()),
    };

    let fused = fuse_store(&scenes, fusion, None)?;
    let mut store = CaseStore::new(file.dim, bits)
        .with_label_space(space)
        .with_index_params(params);
    for ((scene, embedding), record_id) in scenes.iter().zip(&fused).zip(&min_record_ids) {
        store.push(LesionRecord {
            record_id: *record_id,
            polyp_id: scene.polyp_id(),
            code: sign_quantize_bits(&embedding.values, bits)?,
            label: scene.label(),
        })?;
    }
    Ok(IngestOutcome { store, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::clustered_scenes;

    fn sample_rows() -> Vec<EmbeddingRow> {
        // Three polyps, two views each; polyp 2 unlabeled.
        (0..6u64)
            .map(|i| EmbeddingRow {
                record_id: 10 + i,
                polyp_id: i / 2,
                view_id: (i % 2) as u32,
                label: if i / 2 == 2 { -1 } else { (i / 2 % 2) as i32 },
                values: vec![1.0 - i as f32, 0.5, -0.25, i as f32],
            })
            .collect()
    }

    fn sample_bytes() -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings(4, &sample_rows(), &mut buf).unwrap();
        buf
    }

    #[test]
    fn container_roundtrip() {
        let file = read_embeddings(sample_bytes().as_slice()).unwrap();
        assert_eq!(file.dim, 4);
        assert_eq!(file.rows, sample_rows());
    }

    #[test]
    fn write_rejects_bad_rows() {
        let mut rows = sample_rows();
        rows[1].values.pop();
        let mut buf = Vec::new();
        assert!(matches!(
            write_embeddings(4, &rows, &mut buf),
            Err(IoError::DimensionMismatch { record_id: 11, expected: 4, actual: 3 })
        ));

        let mut rows = sample_rows();
        rows[0].values[2] = f32::NAN;
        assert!(matches!(
            write_embeddings(4, &rows, &mut Vec::new()),
            Err(IoError::NonFiniteValue { record_id: 10 })
        ));
    }

    #[test]
    fn header_validation() {
        let mut bytes = sample_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            read_embeddings(bytes.as_slice()),
            Err(IoError::BadMagic)
        ));

        let mut bytes = sample_bytes();
        bytes[4] = 9;
        assert!(matches!(
            read_embeddings(bytes.as_slice()),
            Err(IoError::UnsupportedVersion(9))
        ));

        let mut bytes = sample_bytes();
        bytes[8] = 0;
        assert!(matches!(
            read_embeddings(bytes.as_slice()),
            Err(IoError::Malformed { offset: 8, .. })
        ));
    }

    #[test]
    fn truncation_reports_the_failing_offset() {
        let bytes = sample_bytes();
        for cut in [2, 10, 18, 30, 45, bytes.len() - 1] {
            match read_embeddings(&bytes[..cut]) {
                Err(IoError::Malformed { offset, reason }) => {
                    assert!(offset <= cut as u64, "offset {offset} past cut {cut}");
                    assert!(reason.contains("unexpected end"), "{reason}");
                }
                other => panic!("cut at {cut}: expected truncation error, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample_bytes();
        let at = bytes.len() as u64;
        bytes.push(0);
        assert!(matches!(
            read_embeddings(bytes.as_slice()),
            Err(IoError::TrailingData { offset }) if offset == at
        ));
    }

    #[test]
    fn non_finite_payload_rejected_at_read() {
        let mut bytes = sample_bytes();
        // First f32 of the first row sits after the 20-byte header and
        // the 24-byte row prelude.
        let at = 20 + 24;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_embeddings(bytes.as_slice()),
            Err(IoError::Malformed { offset, .. }) if offset == at as u64
        ));
    }

    #[test]
    fn label_sidecar_parsing() {
        let text = "{\"polyp_id\": 1, \"label\": 0}\n\n{\"polyp_id\": 2, \"label\": 1}\n\
                    {\"polyp_id\": 1, \"label\": 1}\n";
        let (labels, warnings) = read_label_sidecar(text.as_bytes()).unwrap();
        assert_eq!(labels.get(&1), Some(&1));
        assert_eq!(labels.get(&2), Some(&1));
        assert_eq!(warnings.len(), 1);

        let err = read_label_sidecar("{\"polyp_id\": 1}".as_bytes());
        assert!(matches!(err, Err(IoError::BadSidecarLine { line: 1, .. })));
    }

    #[test]
    fn pair_sidecar_parsing() {
        let pairs = read_pair_sidecar("{\"pairs\": [[0, 3], [1, 2]]}".as_bytes()).unwrap();
        assert_eq!(pairs, vec![(0, 3), (1, 2)]);
        assert!(matches!(
            read_pair_sidecar("{\"pairs\": [[0]]}".as_bytes()),
            Err(IoError::BadPairFile(_))
        ));
    }

    #[test]
    fn grouping_rules() {
        let file = EmbeddingFile {
            dim: 4,
            rows: sample_rows(),
        };
        let scenes = group_scenes(&file).unwrap();
        assert_eq!(scenes.len(), 3);
        assert_eq!(scenes[0].views().len(), 2);
        assert!(!scenes[2].label().is_labeled());

        let mut dup_record = sample_rows();
        dup_record[3].record_id = dup_record[0].record_id;
        let err = group_scenes(&EmbeddingFile { dim: 4, rows: dup_record });
        assert!(matches!(err, Err(IoError::DuplicateRecordId(10))));

        let mut dup_view = sample_rows();
        dup_view[1].view_id = 0;
        let err = group_scenes(&EmbeddingFile { dim: 4, rows: dup_view });
        assert!(matches!(
            err,
            Err(IoError::DuplicateView { polyp_id: 0, view_id: 0 })
        ));

        let mut conflict = sample_rows();
        conflict[1].label = 1;
        let err = group_scenes(&EmbeddingFile { dim: 4, rows: conflict });
        assert!(matches!(
            err,
            Err(IoError::LabelConflict { polyp_id: 0, first: 0, second: 1 })
        ));

        let mut bad_label = sample_rows();
        bad_label[4].label = -7;
        bad_label[5].label = -7;
        let err = group_scenes(&EmbeddingFile { dim: 4, rows: bad_label });
        assert!(matches!(err, Err(IoError::Model(ModelError::InvalidLabel(-7)))));
    }

    #[test]
    fn build_store_fuses_one_record_per_polyp() {
        let file = EmbeddingFile {
            dim: 4,
            rows: sample_rows(),
        };
        let outcome = build_store(
            &file,
            None,
            FusionConfig::default(),
            None,
            IndexParams::default(),
        )
        .unwrap();
        assert_eq!(outcome.store.len(), 3);
        assert!(outcome.warnings.is_empty());
        let ids: Vec<u64> = outcome
            .store
            .records()
            .iter()
            .map(|r| r.record_id)
            .collect();
        assert_eq!(ids, vec![10, 12, 14], "smallest record id per polyp");
        assert_eq!(outcome.store.label_space().unwrap().num_classes(), 2);

        let empty = EmbeddingFile { dim: 4, rows: vec![] };
        assert!(matches!(
            build_store(&empty, None, FusionConfig::default(), None, IndexParams::default()),
            Err(IoError::NoRecords)
        ));
    }

    #[test]
    fn sidecar_wins_with_warning() {
        let file = EmbeddingFile {
            dim: 4,
            rows: sample_rows(),
        };
        let sidecar = BTreeMap::from([(0u64, 1i32), (2, 0), (9, 1)]);
        let outcome = build_store(
            &file,
            Some(&sidecar),
            FusionConfig::default(),
            None,
            IndexParams::default(),
        )
        .unwrap();
        let by_polyp: BTreeMap<u64, i32> = outcome
            .store
            .records()
            .iter()
            .map(|r| (r.polyp_id, r.label.raw()))
            .collect();
        // Polyp 0 overridden 0 -> 1, polyp 2 filled in from unlabeled.
        assert_eq!(by_polyp, BTreeMap::from([(0, 1), (1, 1), (2, 0)]));
        let overrides: Vec<_> = outcome
            .warnings
            .iter()
            .filter(|w| w.contains("overrides"))
            .collect();
        assert_eq!(overrides.len(), 1, "{:?}", outcome.warnings);
        assert!(outcome.warnings.iter().any(|w| w.contains("unknown polyp 9")));
    }

    #[test]
    fn hash_bits_truncate_or_reject() {
        let file = EmbeddingFile {
            dim: 4,
            rows: sample_rows(),
        };
        let narrow = build_store(
            &file,
            None,
            FusionConfig::default(),
            Some(2),
            IndexParams::default(),
        )
        .unwrap();
        assert_eq!(narrow.store.hash_bits(), 2);
        assert!(matches!(
            build_store(&file, None, FusionConfig::default(), Some(8), IndexParams::default()),
            Err(IoError::HashBitsTooWide { hash_bits: 8, dim: 4 })
        ));
    }

    #[test]
    fn ingest_is_deterministic() {
        use crate::snapshot::write_snapshot;

        let scenes = clustered_scenes(8, 3, 16, 0.2, 21);
        let rows = rows_from_scenes(&scenes);
        let file = EmbeddingFile { dim: 16, rows };
        let build = || {
            build_store(
                &file,
                None,
                FusionConfig::default(),
                None,
                IndexParams::default(),
            )
            .unwrap()
            .store
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_snapshot(&build(), &mut a).unwrap();
        write_snapshot(&build(), &mut b).unwrap();
        assert_eq!(a, b, "same input must produce a byte-identical snapshot");
    }

    #[test]
    fn scene_row_flattening_roundtrips() {
        let scenes = clustered_scenes(3, 2, 8, 0.1, 5);
        let rows = rows_from_scenes(&scenes);
        assert_eq!(rows.len(), 6);
        let file = EmbeddingFile { dim: 8, rows };
        let regrouped = group_scenes(&file).unwrap();
        assert_eq!(regrouped.len(), 3);
        for (orig, back) in scenes.iter().zip(&regrouped) {
            assert_eq!(orig.polyp_id(), back.polyp_id());
            assert_eq!(orig.views().len(), back.views().len());
            // f32 casting wiggles values; identity of structure is what
            // survives the trip.
            for (ov, bv) in orig.views().iter().zip(back.views()) {
                assert_eq!(ov.view_id(), bv.view_id());
                for (a, b) in ov.values().iter().zip(bv.values()) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
