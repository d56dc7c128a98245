//! Packed ±1 binary codes and Hamming distance.
//!
//! Bit convention: a set bit means +1, a cleared bit means -1. Bits are
//! packed little-endian into 64-bit words (bit `j` of a code lives in word
//! `j / 64` at position `j % 64`), and unused tail bits of the last word are
//! always zero so that word-wise popcount is exact.

use ndarray::ArrayView1;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("code lengths differ: {a} vs {b} bits")]
    LengthMismatch { a: usize, b: usize },
    #[error("inner product {ip} is impossible for {bits}-bit codes")]
    ParityViolation { ip: i64, bits: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    words: Vec<u64>,
    bits: usize,
}

pub(crate) fn words_per_code(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Mask selecting the valid bits of the last word.
pub(crate) fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BinaryCode {
    /// Sign-quantizes a real embedding: bit `j` is set iff `r[j] >= 0`
    /// (so sign(0) = +1, matching the center binarization rule).
    pub fn from_embedding(r: ArrayView1<'_, f64>) -> Self {
        Self::from_signs(r.iter().map(|&v| v >= 0.0))
    }

    /// Builds a code from per-bit signs (`true` = +1).
    pub fn from_signs(signs: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut bits = 0;
        for (j, s) in signs.into_iter().enumerate() {
            if j % 64 == 0 {
                words.push(0u64);
            }
            if s {
                *words.last_mut().unwrap() |= 1u64 << (j % 64);
            }
            bits = j + 1;
        }
        BinaryCode { words, bits }
    }

    pub(crate) fn from_words(words: Vec<u64>, bits: usize) -> Self {
        debug_assert_eq!(words.len(), words_per_code(bits));
        debug_assert!(bits == 0 || words.last().unwrap() & !tail_mask(bits) == 0);
        BinaryCode { words, bits }
    }

    pub fn len_bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, j: usize) -> bool {
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    /// Unpacks to a ±1 vector.
    pub fn to_signs(&self) -> Vec<f64> {
        (0..self.bits)
            .map(|j| if self.bit(j) { 1.0 } else { -1.0 })
            .collect()
    }

    /// Inner product of the two codes viewed as ±1 vectors.
    pub fn inner_product(&self, other: &BinaryCode) -> Result<i64, CodecError> {
        let d = hamming(self, other)? as i64;
        Ok(self.bits as i64 - 2 * d)
    }
}

/// Number of differing bit positions, via word-wise XOR + popcount.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32, CodecError> {
    if a.bits != b.bits {
        return Err(CodecError::LengthMismatch {
            a: a.bits,
            b: b.bits,
        });
    }
    Ok(hamming_words(&a.words, &b.words))
}

pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

/// Recovers the Hamming distance from the ±1 inner product: d = (L - ip) / 2.
pub fn hamming_from_inner(ip: i64, bits: usize) -> Result<u32, CodecError> {
    let diff = bits as i64 - ip;
    if diff % 2 != 0 || diff < 0 || diff / 2 > bits as i64 {
        return Err(CodecError::ParityViolation { ip, bits });
    }
    Ok((diff / 2) as u32)
}
