//! Class-center hierarchy.
//!
//! Fine-level centers are per-class means of the training embeddings; every
//! upper level is the unweighted mean of its children's centers, computed
//! bottom-up. The unweighted recursion makes upper centers independent of
//! class sizes, so imbalanced data cannot tilt a parent toward its largest
//! child. Centers stay real-valued during training; sign codes are an
//! export-time view.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::hierarchy::{LabelPath, LabelTaxonomy};

#[derive(Debug, Error)]
pub enum CenterError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("class {class} at level {level} has no children to average")]
    OrphanClass { level: usize, class: usize },
    #[error("leaf class {0} out of range")]
    UnknownClass(usize),
    #[error("center snapshot file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Real-valued class centers for every level, plus bookkeeping from the last
/// fine-level update.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    /// `levels[k]` is C_k × L.
    levels: Vec<Array2<f64>>,
    fine_counts: Vec<usize>,
    seen: Vec<bool>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    levels: usize,
    class_counts: Vec<usize>,
    dim: usize,
    fine_counts: Vec<usize>,
    seen: Vec<bool>,
}

impl CenterSet {
    /// All-zero centers for a taxonomy and embedding width.
    pub fn new(tax: &LabelTaxonomy, dim: usize) -> Self {
        let levels = tax
            .class_counts()
            .iter()
            .map(|&c| Array2::zeros((c, dim)))
            .collect();
        CenterSet {
            levels,
            fine_counts: vec![0; tax.class_count(0)],
            seen: vec![false; tax.class_count(0)],
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.nrows()).collect()
    }

    pub fn level(&self, k: usize) -> ArrayView2<'_, f64> {
        self.levels[k].view()
    }

    pub fn center(&self, level: usize, class: usize) -> ArrayView1<'_, f64> {
        self.levels[level].row(class)
    }

    pub fn fine_counts(&self) -> &[usize] {
        &self.fine_counts
    }

    /// Replaces each fine center that has samples in `embeddings` with the
    /// arithmetic mean of those samples; fine classes absent from the batch
    /// keep their previous center. Accumulation runs in sample order, so the
    /// result is deterministic and independent of any parallel schedule.
    pub fn update_fine_centers(
        &mut self,
        embeddings: ArrayView2<'_, f64>,
        paths: &[LabelPath],
    ) -> Result<(), CenterError> {
        if embeddings.ncols() != self.dim {
            return Err(CenterError::DimensionMismatch {
                what: "embedding width",
                expected: self.dim,
                got: embeddings.ncols(),
            });
        }
        if embeddings.nrows() != paths.len() {
            return Err(CenterError::DimensionMismatch {
                what: "paths vs embeddings",
                expected: embeddings.nrows(),
                got: paths.len(),
            });
        }
        let fine_classes = self.levels[0].nrows();
        let mut sums = Array2::<f64>::zeros((fine_classes, self.dim));
        let mut counts = vec![0usize; fine_classes];
        for (row, path) in embeddings.outer_iter().zip(paths) {
            let leaf = path.leaf();
            if leaf >= fine_classes {
                return Err(CenterError::UnknownClass(leaf));
            }
            let mut acc = sums.row_mut(leaf);
            acc += &row;
            counts[leaf] += 1;
        }
        for class in 0..fine_classes {
            if counts[class] > 0 {
                let mean = sums.row(class).mapv(|v| v / counts[class] as f64);
                self.levels[0].row_mut(class).assign(&mean);
                self.fine_counts[class] = counts[class];
                self.seen[class] = true;
            } else if !self.seen[class] {
                log::warn!(
                    "fine class {class} has never received samples; its center stays at init"
                );
            }
        }
        Ok(())
    }

    /// Recomputes every upper level bottom-up as the unweighted mean of its
    /// children's centers.
    pub fn propagate_upper_centers(&mut self, tax: &LabelTaxonomy) -> Result<(), CenterError> {
        for level in 1..self.levels.len() {
            for class in 0..self.levels[level].nrows() {
                let children = tax.children(level, class);
                if children.is_empty() {
                    return Err(CenterError::OrphanClass { level, class });
                }
                let mut sum = Array1::<f64>::zeros(self.dim);
                for &child in children {
                    sum += &self.levels[level - 1].row(child);
                }
                sum /= children.len() as f64;
                self.levels[level].row_mut(class).assign(&sum);
            }
        }
        Ok(())
    }

    /// Elementwise sign codes per level, with sign(0) = +1.
    pub fn binarize(&self) -> Vec<Array2<f64>> {
        self.levels
            .iter()
            .map(|l| l.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 }))
            .collect()
    }

    /// Largest L2 movement of any center relative to `previous`.
    pub fn max_drift(&self, previous: &CenterSet) -> f64 {
        let mut max = 0.0f64;
        for (now, before) in self.levels.iter().zip(&previous.levels) {
            for (a, b) in now.outer_iter().zip(before.outer_iter()) {
                let d = (&a - &b).mapv(|v| v * v).sum().sqrt();
                max = max.max(d);
            }
        }
        max
    }

    /// FNV-1a over the exact bit patterns; used to assert centers stay
    /// frozen across an inner optimization run.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |bits: u64| {
            for byte in bits.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for level in &self.levels {
            for &v in level.iter() {
                eat(v.to_bits());
            }
        }
        hash
    }

    /// True when every upper center equals the mean of its children within
    /// `tol` in every coordinate.
    pub fn recursively_consistent(&self, tax: &LabelTaxonomy, tol: f64) -> bool {
        for level in 1..self.levels.len() {
            for class in 0..self.levels[level].nrows() {
                let children = tax.children(level, class);
                if children.is_empty() {
                    return false;
                }
                let mut mean = Array1::<f64>::zeros(self.dim);
                for &child in children {
                    mean += &self.levels[level - 1].row(child);
                }
                mean /= children.len() as f64;
                let diff = &mean - &self.levels[level].row(class);
                if diff.iter().any(|v| v.abs() > tol) {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_finite(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.iter().all(|v| v.is_finite()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), CenterError> {
        let header = SnapshotHeader {
            levels: self.levels.len(),
            class_counts: self.class_counts(),
            dim: self.dim,
            fine_counts: self.fine_counts.clone(),
            seen: self.seen.clone(),
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for level in &self.levels {
            for &v in level.iter() {
                binio::write_f64(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self, CenterError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: SnapshotHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| CenterError::Format(e.to_string()))?;
        if header.class_counts.len() != header.levels {
            return Err(CenterError::Format("class count / level mismatch".into()));
        }
        let mut levels = Vec::with_capacity(header.levels);
        for &c in &header.class_counts {
            let mut arr = Array2::zeros((c, header.dim));
            for v in arr.iter_mut() {
                *v = binio::read_f64(r)?;
            }
            levels.push(arr);
        }
        let fine = header.class_counts.first().copied().unwrap_or(0);
        if header.fine_counts.len() != fine || header.seen.len() != fine {
            return Err(CenterError::Format("fine bookkeeping length mismatch".into()));
        }
        Ok(CenterSet {
            levels,
            fine_counts: header.fine_counts,
            seen: header.seen,
            dim: header.dim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CenterError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CenterError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Raw bytes of the snapshot; handy for embedding in larger files.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("in-memory write");
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CenterError> {
        let mut r = BufReader::new(bytes);
        let set = Self::read_from(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CenterError::Format("trailing bytes".into()));
        }
        Ok(set)
    }
}
