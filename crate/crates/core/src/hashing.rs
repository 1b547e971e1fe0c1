//! Sign quantization of scene embeddings into packed binary codes, and
//! Hamming-space primitives over them.
//!
//! A code is a point in `{-1,+1}^K` stored packed: bit `k` lives in word
//! `k / 64` at bit position `k % 64`, with set bit meaning `+1`. Pad
//! bits past `K` in the last word are always zero; every constructor
//! enforces that, so Hamming distances can be taken over whole words
//! without masking.

use thiserror::Error;

use crate::model::SceneEmbedding;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HashError {
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("a hash code must have at least one bit")]
    EmptyCode,
    #[error("hash length mismatch: {left} vs {right} bits")]
    LengthMismatch { left: usize, right: usize },
    #[error("expected {expected} words for the declared bit length, got {actual}")]
    WordCountMismatch { expected: usize, actual: usize },
    #[error("pad bits past the declared bit length must be zero")]
    PaddingNotZero,
    #[error("hamming distance {distance} exceeds code length {bits}")]
    DistanceOutOfRange { distance: u32, bits: usize },
    #[error("cannot keep {bits} bits of a {dimension}-dimensional embedding")]
    BitsOutOfRange { bits: usize, dimension: usize },
}

/// Number of 64-bit words needed for `bits` code bits.
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// A binary hash code in `{-1,+1}^K`, packed into little-endian words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    bits: usize,
    words: Vec<u64>,
}

impl HashCode {
    /// Packs explicit bits; `true` encodes `+1`.
    ///
    /// # Panics
    ///
    /// Panics on an empty slice; codes are at least one bit long.
    pub fn from_bits(bits: &[bool]) -> HashCode {
        assert!(!bits.is_empty(), "a hash code must have at least one bit");
        let mut words = vec![0u64; words_for(bits.len())];
        for (k, &b) in bits.iter().enumerate() {
            if b {
                words[k / 64] |= 1u64 << (k % 64);
            }
        }
        HashCode {
            bits: bits.len(),
            words,
        }
    }

    /// Adopts already-packed words, validating the word count and that
    /// all pad bits are zero.
    pub fn from_words(bits: usize, words: Vec<u64>) -> Result<HashCode, HashError> {
        if bits == 0 {
            return Err(HashError::EmptyCode);
        }
        let expected = words_for(bits);
        if words.len() != expected {
            return Err(HashError::WordCountMismatch {
                expected,
                actual: words.len(),
            });
        }
        let tail = bits % 64;
        if tail != 0 && words[expected - 1] >> tail != 0 {
            return Err(HashError::PaddingNotZero);
        }
        Ok(HashCode { bits, words })
    }

    pub fn bit_len(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Bit `k`; `true` encodes `+1`.
    pub fn bit(&self, k: usize) -> bool {
        assert!(k < self.bits);
        self.words[k / 64] >> (k % 64) & 1 == 1
    }

    /// The code as a dense `±1.0` vector.
    pub fn to_sign_vector(&self) -> Vec<f64> {
        (0..self.bits)
            .map(|k| if self.bit(k) { 1.0 } else { -1.0 })
            .collect()
    }
}

/// Quantizes the leading `bits` components: non-negative becomes `+1`
/// (so an exact `0.0` maps to `+1`), negative becomes `-1`.
pub fn sign_quantize_bits(values: &[f64], bits: usize) -> Result<HashCode, HashError> {
    if bits == 0 {
        return Err(HashError::EmptyCode);
    }
    if bits > values.len() {
        return Err(HashError::BitsOutOfRange {
            bits,
            dimension: values.len(),
        });
    }
    let head = &values[..bits];
    if head.iter().any(|v| !v.is_finite()) {
        return Err(HashError::NonFinite);
    }
    let mut words = vec![0u64; words_for(bits)];
    for (k, &v) in head.iter().enumerate() {
        if v >= 0.0 {
            words[k / 64] |= 1u64 << (k % 64);
        }
    }
    Ok(HashCode { bits, words })
}

/// Quantizes a full float vector, one bit per component.
pub fn sign_quantize_values(values: &[f64]) -> Result<HashCode, HashError> {
    sign_quantize_bits(values, values.len())
}

/// Quantizes a fused scene embedding, one bit per component.
pub fn sign_quantize(scene: &SceneEmbedding) -> Result<HashCode, HashError> {
    sign_quantize_values(&scene.values)
}

/// Popcount of the XOR over aligned packed rows.
#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// Exact Hamming distance between two codes of equal length.
pub fn hamming_distance(a: &HashCode, b: &HashCode) -> Result<u32, HashError> {
    if a.bits != b.bits {
        return Err(HashError::LengthMismatch {
            left: a.bits,
            right: b.bits,
        });
    }
    Ok(hamming_words(&a.words, &b.words))
}

/// Cosine similarity of the underlying `±1` vectors: `1 - 2h/K`.
pub fn hamming_to_cosine(distance: u32, bits: usize) -> Result<f64, HashError> {
    if bits == 0 {
        return Err(HashError::EmptyCode);
    }
    if distance as usize > bits {
        return Err(HashError::DistanceOutOfRange { distance, bits });
    }
    Ok(1.0 - 2.0 * distance as f64 / bits as f64)
}

/// A dense row-major matrix of equal-length packed codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: usize,
    words_per_code: usize,
    data: Vec<u64>,
}

impl PackedCodes {
    /// Packs codes into one contiguous matrix. `bits` fixes the code
    /// length so that an empty input still records it.
    pub fn from_codes(codes: &[HashCode], bits: usize) -> Result<PackedCodes, HashError> {
        if bits == 0 {
            return Err(HashError::EmptyCode);
        }
        let words_per_code = words_for(bits);
        let mut data = Vec::with_capacity(words_per_code * codes.len());
        for code in codes {
            if code.bits != bits {
                return Err(HashError::LengthMismatch {
                    left: bits,
                    right: code.bits,
                });
            }
            data.extend_from_slice(&code.words);
        }
        Ok(PackedCodes {
            bits,
            words_per_code,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.words_per_code
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bit_len(&self) -> usize {
        self.bits
    }

    pub fn words_per_code(&self) -> usize {
        self.words_per_code
    }

    pub fn row(&self, i: usize) -> &[u64] {
        let start = i * self.words_per_code;
        &self.data[start..start + self.words_per_code]
    }

    pub fn unpack_row(&self, i: usize) -> HashCode {
        HashCode {
            bits: self.bits,
            words: self.row(i).to_vec(),
        }
    }

    /// Hamming distance from packed query words to row `i`.
    #[inline]
    pub fn distance_to_row(&self, i: usize, query: &[u64]) -> u32 {
        hamming_words(self.row(i), query)
    }
}

/// Packs a slice of codes, taking the length from the first code.
pub fn pack_codes(codes: &[HashCode]) -> Result<PackedCodes, HashError> {
    let bits = codes.first().map_or(1, |c| c.bits);
    PackedCodes::from_codes(codes, bits)
}
