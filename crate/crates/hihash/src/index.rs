//! Exact Hamming nearest-neighbor search over a packed code database.
//!
//! The database is a flat array of packed code words plus parallel label
//! paths and item ids. Search is a full linear scan with word-parallel
//! popcount; at the database sizes this crate targets an exact scan is both
//! simple and fast, and the ranking metrics need full orderings anyway.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::binio;
use crate::codec::{hamming_words, tail_mask, words_per_code, BinaryCode};
use crate::hierarchy::LabelPath;

const MAGIC: &[u8; 4] = b"HIDB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("code has {got} bits, database stores {expected}-bit codes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("database is empty")]
    EmptyDatabase,
    #[error("label path has {got} levels, database stores {expected}")]
    PathMismatch { expected: usize, got: usize },
    #[error("code database file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Packed ±1 codes with their label paths and item ids. Immutable once built;
/// queries never mutate it.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDatabase {
    bits: usize,
    levels: usize,
    words: Vec<u64>,
    paths: Vec<LabelPath>,
    ids: Vec<u64>,
}

impl CodeDatabase {
    pub fn new(bits: usize, levels: usize) -> Self {
        CodeDatabase {
            bits,
            levels,
            words: Vec::new(),
            paths: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn push(&mut self, code: &BinaryCode, path: LabelPath, id: u64) -> Result<(), IndexError> {
        if code.len_bits() != self.bits {
            return Err(IndexError::LengthMismatch {
                expected: self.bits,
                got: code.len_bits(),
            });
        }
        if path.levels() != self.levels {
            return Err(IndexError::PathMismatch {
                expected: self.levels,
                got: path.levels(),
            });
        }
        self.words.extend_from_slice(code.words());
        self.paths.push(path);
        self.ids.push(id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn paths(&self) -> &[LabelPath] {
        &self.paths
    }

    pub fn path(&self, pos: usize) -> &LabelPath {
        &self.paths[pos]
    }

    pub fn id(&self, pos: usize) -> u64 {
        self.ids[pos]
    }

    fn code_words(&self, pos: usize) -> &[u64] {
        let w = words_per_code(self.bits);
        &self.words[pos * w..(pos + 1) * w]
    }

    pub fn code(&self, pos: usize) -> BinaryCode {
        BinaryCode::from_words(self.code_words(pos).to_vec(), self.bits)
    }

    pub fn position_of_id(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    /// Distance from `query` to every database item, in storage order.
    pub fn scan(&self, query: &BinaryCode) -> Result<Vec<u32>, IndexError> {
        if query.len_bits() != self.bits {
            return Err(IndexError::LengthMismatch {
                expected: self.bits,
                got: query.len_bits(),
            });
        }
        let w = words_per_code(self.bits);
        if w == 0 {
            // zero-width codes are all identical
            return Ok(vec![0; self.len()]);
        }
        Ok(self
            .words
            .chunks_exact(w)
            .map(|row| hamming_words(row, query.words()))
            .collect())
    }

    /// The `k` nearest items as `(id, distance)` pairs, distances
    /// nondecreasing and ties broken by ascending item id. `k` larger than
    /// the database returns the full ranking.
    pub fn knn(&self, query: &BinaryCode, k: usize) -> Result<Vec<(u64, u32)>, IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyDatabase);
        }
        let dists = self.scan(query)?;
        let mut ranked: Vec<(u64, u32)> = self.ids.iter().copied().zip(dists).collect();
        ranked.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        ranked.truncate(k.min(ranked.len()));
        Ok(ranked)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), IndexError> {
        w.write_all(MAGIC)?;
        binio::write_u32(w, VERSION)?;
        binio::write_u32(w, self.bits as u32)?;
        binio::write_u32(w, self.levels as u32)?;
        binio::write_u64(w, self.len() as u64)?;
        for word in &self.words {
            binio::write_u64(w, *word)?;
        }
        for path in &self.paths {
            for &class in path.as_slice() {
                binio::write_u32(w, class as u32)?;
            }
        }
        for &id in &self.ids {
            binio::write_u64(w, id)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IndexError> {
        let magic = binio::read_magic(r)?;
        if &magic != MAGIC {
            return Err(IndexError::Format(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = binio::read_u32(r)?;
        if version != VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let bits = binio::read_u32(r)? as usize;
        let levels = binio::read_u32(r)? as usize;
        let count = binio::read_u64(r)? as usize;
        let wpc = words_per_code(bits);
        let mut words = Vec::with_capacity(count * wpc);
        for _ in 0..count * wpc {
            words.push(binio::read_u64(r)?);
        }
        if bits > 0 {
            let mask = !tail_mask(bits);
            for row in words.chunks_exact(wpc.max(1)) {
                if row.last().is_some_and(|&last| last & mask != 0) {
                    return Err(IndexError::Format("nonzero tail bits".into()));
                }
            }
        }
        let mut paths = Vec::with_capacity(count);
        for _ in 0..count {
            let mut path = Vec::with_capacity(levels);
            for _ in 0..levels {
                path.push(binio::read_u32(r)? as usize);
            }
            paths.push(LabelPath::new(path));
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(binio::read_u64(r)?);
        }
        Ok(CodeDatabase {
            bits,
            levels,
            words,
            paths,
            ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}
