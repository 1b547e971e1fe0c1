//! Binary snapshot of a [`CaseStore`]: codes and metadata only.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "EFIX"
//! version u32      currently 1
//! K       u32      code length in bits
//! leaf    u32      ball-tree leaf size
//! seed    u64      ball-tree build seed
//! C       u32      number of classes, 0 when the store has no label space
//! N       u64      record count
//! then N records:
//!   record_id u64, polyp_id u64, label i32, ceil(K/64) code words u64
//! ```
//!
//! The tree is not serialized; loading rebuilds it from the stored seed
//! and leaf size, which reproduces the structure exactly. Records are
//! written in store order, so `write(read(write(s))) == write(s)` byte
//! for byte.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::hashing::{words_for, HashCode};
use crate::model::{CaseStore, IndexParams, Label, LabelSpace, LesionRecord};

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"EFIX";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file: bad magic")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("snapshot ends before the declared contents")]
    UnexpectedEof,
    #[error("trailing bytes after the declared contents")]
    TrailingData,
    #[error("invalid snapshot header: {0}")]
    InvalidHeader(&'static str),
    #[error("record {index}: {reason}")]
    CorruptRecord { index: u64, reason: String },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for SnapshotError {
    fn from(err: io::Error) -> Self {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            SnapshotError::UnexpectedEof
        } else {
            SnapshotError::Io(err)
        }
    }
}

/// Serialized size in bytes for a store of `n` records with `bits`-bit
/// codes.
pub fn snapshot_size(n: usize, bits: usize) -> u64 {
    let record = 8 + 8 + 4 + 8 * words_for(bits) as u64;
    36 + n as u64 * record
}

/// Writes a snapshot and returns the number of bytes produced.
pub fn write_snapshot<W: Write>(store: &CaseStore, mut w: W) -> Result<u64, SnapshotError> {
    w.write_all(&SNAPSHOT_MAGIC)?;
    w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
    w.write_u32::<LittleEndian>(store.hash_bits() as u32)?;
    let params = store.index_params();
    w.write_u32::<LittleEndian>(params.leaf_size as u32)?;
    w.write_u64::<LittleEndian>(params.build_seed)?;
    let classes = store.label_space().map_or(0, |s| s.num_classes() as u32);
    w.write_u32::<LittleEndian>(classes)?;
    w.write_u64::<LittleEndian>(store.len() as u64)?;
    for record in store.records() {
        w.write_u64::<LittleEndian>(record.record_id)?;
        w.write_u64::<LittleEndian>(record.polyp_id)?;
        w.write_i32::<LittleEndian>(record.label.raw())?;
        for &word in record.code.words() {
            w.write_u64::<LittleEndian>(word)?;
        }
    }
    Ok(snapshot_size(store.len(), store.hash_bits()))
}

/// Reads a snapshot, rejecting malformed headers, truncation, and
/// trailing bytes. The returned store reports `dimension == hash_bits`,
/// since the original embedding width is not persisted.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<CaseStore, SnapshotError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != SNAPSHOT_MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SNAPSHOT_VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let bits = r.read_u32::<LittleEndian>()? as usize;
    if bits == 0 {
        return Err(SnapshotError::InvalidHeader("hash length is zero"));
    }
    let leaf_size = r.read_u32::<LittleEndian>()? as usize;
    if leaf_size == 0 {
        return Err(SnapshotError::InvalidHeader("leaf size is zero"));
    }
    let build_seed = r.read_u64::<LittleEndian>()?;
    let classes = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()?;

    let label_space = if classes == 0 {
        None
    } else {
        Some(LabelSpace::new(classes).expect("classes > 0"))
    };
    let mut store = CaseStore::new(bits, bits)
        .with_label_space(label_space)
        .with_index_params(IndexParams {
            leaf_size,
            build_seed,
        });

    let words = words_for(bits);
    for index in 0..count {
        let record_id = r.read_u64::<LittleEndian>()?;
        let polyp_id = r.read_u64::<LittleEndian>()?;
        let raw_label = r.read_i32::<LittleEndian>()?;
        let label = Label::from_raw(raw_label).map_err(|e| SnapshotError::CorruptRecord {
            index,
            reason: e.to_string(),
        })?;
        let mut code_words = vec![0u64; words];
        for word in code_words.iter_mut() {
            *word = r.read_u64::<LittleEndian>()?;
        }
        let code =
            HashCode::from_words(bits, code_words).map_err(|e| SnapshotError::CorruptRecord {
                index,
                reason: e.to_string(),
            })?;
        store
            .push(LesionRecord {
                record_id,
                polyp_id,
                code,
                label,
            })
            .expect("code length fixed by reader");
    }

    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(store),
        _ => Err(SnapshotError::TrailingData),
    }
}

/// Writes a snapshot to a file, returning the byte count.
pub fn save_snapshot(store: &CaseStore, path: &Path) -> Result<u64, SnapshotError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let bytes = write_snapshot(store, &mut w)?;
    w.flush()?;
    Ok(bytes)
}

/// Reads a snapshot from a file.
pub fn load_snapshot(path: &Path) -> Result<CaseStore, SnapshotError> {
    let file = File::open(path)?;
    read_snapshot(BufReader::new(file))
}
