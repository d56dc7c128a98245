//! The K-level semantic label tree.
//!
//! Level 0 is the finest (leaf) level, level `K-1` the coarsest. Every class
//! below the top level has exactly one parent, so an item's label is fully
//! determined by its leaf class. The taxonomy also owns the per-level
//! variance schedule used by the training loss; the schedule must grow
//! strictly with the level so that coarser classes get wider gaps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("sigma2 must increase strictly with level: sigma2[{level}]={lo} vs sigma2[{next}]={hi}", next = level + 1)]
    NonMonotoneSigma { level: usize, lo: f64, hi: f64 },
    #[error("sigma2[{level}] = {value} is not positive")]
    NonPositiveSigma { level: usize, value: f64 },
    #[error("class {class} at level {level} maps to parent {parent}, but level {parent_level} has only {parent_count} classes", parent_level = level + 1)]
    OrphanClass {
        level: usize,
        class: usize,
        parent: usize,
        parent_count: usize,
    },
    #[error("bad cardinality: {0}")]
    BadCardinality(String),
    #[error("unknown class {class} at level {level} (level has {count} classes)")]
    UnknownClass {
        level: usize,
        class: usize,
        count: usize,
    },
    #[error("invalid label path: {0}")]
    InvalidPath(String),
    #[error("taxonomy file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-level class ids for one item, finest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelPath(Vec<usize>);

impl LabelPath {
    pub fn new(classes: Vec<usize>) -> Self {
        LabelPath(classes)
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    /// Class id at level `k` (0 = finest).
    pub fn class_at(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn leaf(&self) -> usize {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of levels at which the two paths agree.
    pub fn shared_with(&self, other: &LabelPath) -> usize {
        self.0
            .iter()
            .zip(other.0.iter())
            .filter(|(a, b)| a == b)
            .count()
    }
}

/// The class tree: per-level class counts, parent edges, and the variance
/// schedule. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTaxonomy {
    class_counts: Vec<usize>,
    /// `parent_map[k][i]` = parent at level `k+1` of class `i` at level `k`;
    /// one entry per level below the top.
    parent_map: Vec<Vec<usize>>,
    /// `child_map[k-1][i]` = children at level `k-1` of class `i` at level `k`.
    child_map: Vec<Vec<Vec<usize>>>,
    sigma2: Vec<f64>,
    class_names: Vec<Vec<String>>,
}

/// On-disk JSON layout. Class ids are positional (file order); `sigma2` is
/// optional so that a run config can supply the schedule instead.
#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    levels: usize,
    classes: Vec<Vec<String>>,
    parents: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma2: Option<Vec<f64>>,
}

impl LabelTaxonomy {
    /// Builds and validates a taxonomy with default class names.
    pub fn new(
        class_counts: Vec<usize>,
        parent_map: Vec<Vec<usize>>,
        sigma2: Vec<f64>,
    ) -> Result<Self, HierarchyError> {
        let names = class_counts
            .iter()
            .enumerate()
            .map(|(k, &c)| (0..c).map(|i| format!("l{k}_c{i}")).collect())
            .collect();
        Self::with_names(class_counts, parent_map, sigma2, names)
    }

    pub fn with_names(
        class_counts: Vec<usize>,
        parent_map: Vec<Vec<usize>>,
        sigma2: Vec<f64>,
        class_names: Vec<Vec<String>>,
    ) -> Result<Self, HierarchyError> {
        let mut tax = LabelTaxonomy {
            class_counts,
            parent_map,
            child_map: Vec::new(),
            sigma2,
            class_names,
        };
        tax.validate()?;
        tax.rebuild_child_map();
        Ok(tax)
    }

    /// Checks every structural invariant; the constructor calls this, and it
    /// can be re-run after deserialization.
    pub fn validate(&self) -> Result<(), HierarchyError> {
        let k = self.class_counts.len();
        if k == 0 {
            return Err(HierarchyError::BadCardinality(
                "taxonomy needs at least one level".into(),
            ));
        }
        for (level, &c) in self.class_counts.iter().enumerate() {
            if c == 0 {
                return Err(HierarchyError::BadCardinality(format!(
                    "level {level} has zero classes"
                )));
            }
        }
        for level in 0..k.saturating_sub(1) {
            if self.class_counts[level + 1] > self.class_counts[level] {
                return Err(HierarchyError::BadCardinality(format!(
                    "level {} has more classes ({}) than level {} ({})",
                    level + 1,
                    self.class_counts[level + 1],
                    level,
                    self.class_counts[level]
                )));
            }
        }
        if self.parent_map.len() != k - 1 {
            return Err(HierarchyError::BadCardinality(format!(
                "expected {} parent arrays, got {}",
                k - 1,
                self.parent_map.len()
            )));
        }
        for (level, parents) in self.parent_map.iter().enumerate() {
            if parents.len() != self.class_counts[level] {
                return Err(HierarchyError::BadCardinality(format!(
                    "level {level} has {} classes but {} parent entries",
                    self.class_counts[level],
                    parents.len()
                )));
            }
            let parent_count = self.class_counts[level + 1];
            for (class, &parent) in parents.iter().enumerate() {
                if parent >= parent_count {
                    return Err(HierarchyError::OrphanClass {
                        level,
                        class,
                        parent,
                        parent_count,
                    });
                }
            }
        }
        if self.sigma2.len() != k {
            return Err(HierarchyError::BadCardinality(format!(
                "expected {} sigma2 entries, got {}",
                k,
                self.sigma2.len()
            )));
        }
        for (level, &s) in self.sigma2.iter().enumerate() {
            if !(s > 0.0) {
                return Err(HierarchyError::NonPositiveSigma { level, value: s });
            }
        }
        for level in 0..k - 1 {
            if self.sigma2[level] >= self.sigma2[level + 1] {
                return Err(HierarchyError::NonMonotoneSigma {
                    level,
                    lo: self.sigma2[level],
                    hi: self.sigma2[level + 1],
                });
            }
        }
        if self.class_names.len() != k
            || self
                .class_names
                .iter()
                .zip(&self.class_counts)
                .any(|(names, &c)| names.len() != c)
        {
            return Err(HierarchyError::BadCardinality(
                "class name arrays do not match class counts".into(),
            ));
        }
        if k >= 1 && self.class_counts[k - 1] == 1 && k > 1 {
            log::warn!(
                "top level has a single class; a degenerate root carries no information \
                 and should usually be stripped"
            );
        }
        Ok(())
    }

    fn rebuild_child_map(&mut self) {
        let k = self.levels();
        let mut child_map = Vec::with_capacity(k.saturating_sub(1));
        for level in 0..k.saturating_sub(1) {
            let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.class_counts[level + 1]];
            for (class, &parent) in self.parent_map[level].iter().enumerate() {
                children[parent].push(class);
            }
            child_map.push(children);
        }
        self.child_map = child_map;
    }

    pub fn levels(&self) -> usize {
        self.class_counts.len()
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn class_count(&self, level: usize) -> usize {
        self.class_counts[level]
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    /// Replaces the variance schedule (e.g. with a config override) and
    /// revalidates.
    pub fn with_sigma2(mut self, sigma2: Vec<f64>) -> Result<Self, HierarchyError> {
        self.sigma2 = sigma2;
        self.validate()?;
        Ok(self)
    }

    pub fn class_name(&self, level: usize, class: usize) -> &str {
        &self.class_names[level][class]
    }

    /// Leaf class id for a level-0 class name.
    pub fn leaf_by_name(&self, name: &str) -> Option<usize> {
        self.class_names[0].iter().position(|n| n == name)
    }

    pub fn parent(&self, level: usize, class: usize) -> usize {
        self.parent_map[level][class]
    }

    /// Children at `level - 1` of `class` at `level` (level must be >= 1).
    pub fn children(&self, level: usize, class: usize) -> &[usize] {
        &self.child_map[level - 1][class]
    }

    /// Full path from a leaf class, following the parent edges upwards.
    pub fn expand_label(&self, leaf: usize) -> Result<LabelPath, HierarchyError> {
        let c0 = self.class_counts[0];
        if leaf >= c0 {
            return Err(HierarchyError::UnknownClass {
                level: 0,
                class: leaf,
                count: c0,
            });
        }
        let mut path = Vec::with_capacity(self.levels());
        path.push(leaf);
        for level in 0..self.levels() - 1 {
            let next = self.parent_map[level][path[level]];
            path.push(next);
        }
        Ok(LabelPath(path))
    }

    /// Checks that a path has one in-range entry per level and is consistent
    /// with the parent edges.
    pub fn validate_path(&self, path: &LabelPath) -> Result<(), HierarchyError> {
        if path.levels() != self.levels() {
            return Err(HierarchyError::InvalidPath(format!(
                "path has {} levels, taxonomy has {}",
                path.levels(),
                self.levels()
            )));
        }
        for (level, &class) in path.as_slice().iter().enumerate() {
            if class >= self.class_counts[level] {
                return Err(HierarchyError::UnknownClass {
                    level,
                    class,
                    count: self.class_counts[level],
                });
            }
        }
        for level in 0..self.levels() - 1 {
            let expected = self.parent_map[level][path.class_at(level)];
            if path.class_at(level + 1) != expected {
                return Err(HierarchyError::InvalidPath(format!(
                    "level {} class {} has parent {}, path says {}",
                    level,
                    path.class_at(level),
                    expected,
                    path.class_at(level + 1)
                )));
            }
        }
        Ok(())
    }

    /// Count of levels at which the two paths name the same class. For paths
    /// consistent with the tree the agreeing levels always form a coarse
    /// suffix, so this is the usual tree similarity score.
    pub fn shared_levels(&self, a: &LabelPath, b: &LabelPath) -> usize {
        debug_assert_eq!(a.levels(), self.levels());
        debug_assert_eq!(b.levels(), self.levels());
        a.shared_with(b)
    }

    pub fn to_json(&self) -> String {
        let file = TaxonomyFile {
            levels: self.levels(),
            classes: self.class_names.clone(),
            parents: self.parent_map.clone(),
            sigma2: Some(self.sigma2.clone()),
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), HierarchyError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(json: &str, sigma2_override: Option<&[f64]>) -> Result<Self, HierarchyError> {
        let file: TaxonomyFile =
            serde_json::from_str(json).map_err(|e| HierarchyError::Format(e.to_string()))?;
        if file.classes.len() != file.levels {
            return Err(HierarchyError::Format(format!(
                "levels = {} but {} class arrays",
                file.levels,
                file.classes.len()
            )));
        }
        let sigma2 = match sigma2_override {
            Some(s) => s.to_vec(),
            None => file.sigma2.ok_or_else(|| {
                HierarchyError::Format(
                    "taxonomy file has no sigma2 and no override was given".into(),
                )
            })?,
        };
        let class_counts = file.classes.iter().map(Vec::len).collect();
        Self::with_names(class_counts, file.parents, sigma2, file.classes)
    }

    pub fn load(path: &Path, sigma2_override: Option<&[f64]>) -> Result<Self, HierarchyError> {
        let json = fs::read_to_string(path)?;
        Self::from_json(&json, sigma2_override)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// K=2, four fine classes under two coarse ones.
    fn two_level() -> LabelTaxonomy {
        LabelTaxonomy::new(vec![4, 2], vec![vec![0, 0, 1, 1]], vec![1.0, 4.0]).unwrap()
    }

    #[test]
    fn valid_two_level_taxonomy() {
        let tax = two_level();
        assert_eq!(tax.levels(), 2);
        assert!(tax.validate().is_ok());
    }

    #[test]
    fn decreasing_sigma_rejected() {
        let err = LabelTaxonomy::new(vec![4, 2], vec![vec![0, 0, 1, 1]], vec![4.0, 1.0]);
        assert!(matches!(err, Err(HierarchyError::NonMonotoneSigma { .. })));
    }

    #[test]
    fn single_level_taxonomy_ok() {
        let tax = LabelTaxonomy::new(vec![10], vec![], vec![1.0]).unwrap();
        assert_eq!(tax.levels(), 1);
        assert_eq!(tax.expand_label(9).unwrap(), LabelPath::new(vec![9]));
    }

    #[test]
    fn orphan_and_cardinality_rejected() {
        // parent id out of range
        let err = LabelTaxonomy::new(vec![4, 2], vec![vec![0, 0, 1, 2]], vec![1.0, 4.0]);
        assert!(matches!(err, Err(HierarchyError::OrphanClass { .. })));
        // coarser level larger than finer level
        let err = LabelTaxonomy::new(vec![2, 4], vec![vec![0, 1]], vec![1.0, 4.0]);
        assert!(matches!(err, Err(HierarchyError::BadCardinality(_))));
        // nonpositive sigma
        let err = LabelTaxonomy::new(vec![4, 2], vec![vec![0, 0, 1, 1]], vec![0.0, 4.0]);
        assert!(matches!(err, Err(HierarchyError::NonPositiveSigma { .. })));
    }

    #[test]
    fn expand_label_follows_parents() {
        let tax = two_level();
        assert_eq!(tax.expand_label(2).unwrap(), LabelPath::new(vec![2, 1]));
        assert_eq!(tax.expand_label(0).unwrap(), LabelPath::new(vec![0, 0]));
        assert!(matches!(
            tax.expand_label(7),
            Err(HierarchyError::UnknownClass { class: 7, .. })
        ));
    }

    #[test]
    fn shared_levels_examples() {
        let tax = two_level();
        let a = tax.expand_label(0).unwrap();
        assert_eq!(tax.shared_levels(&a, &a), 2);
        let b = tax.expand_label(1).unwrap(); // (1, 0): same coarse
        assert_eq!(tax.shared_levels(&a, &b), 1);
        let c = tax.expand_label(2).unwrap(); // (2, 1): disjoint
        assert_eq!(tax.shared_levels(&a, &c), 0);
    }

    #[test]
    fn path_validation() {
        let tax = two_level();
        assert!(tax.validate_path(&LabelPath::new(vec![2, 1])).is_ok());
        assert!(tax.validate_path(&LabelPath::new(vec![2, 0])).is_err());
        assert!(tax.validate_path(&LabelPath::new(vec![2])).is_err());
        assert!(tax.validate_path(&LabelPath::new(vec![9, 0])).is_err());
    }

    #[test]
    fn every_leaf_expands_on_valid_taxonomy() {
        let tax = two_level();
        for leaf in 0..tax.class_count(0) {
            let path = tax.expand_label(leaf).unwrap();
            tax.validate_path(&path).unwrap();
        }
    }

    #[test]
    fn json_round_trip() {
        let tax = two_level();
        let json = tax.to_json();
        let back = LabelTaxonomy::from_json(&json, None).unwrap();
        assert_eq!(tax, back);
        // override wins over the stored schedule
        let over = LabelTaxonomy::from_json(&json, Some(&[2.0, 8.0])).unwrap();
        assert_eq!(over.sigma2(), &[2.0, 8.0]);
    }

    #[test]
    fn json_without_sigma2_needs_override() {
        let json = r#"{"levels":1,"classes":[["a","b"]],"parents":[]}"#;
        assert!(LabelTaxonomy::from_json(json, None).is_err());
        let tax = LabelTaxonomy::from_json(json, Some(&[1.0])).unwrap();
        assert_eq!(tax.leaf_by_name("b"), Some(1));
    }

    /// A 3-level taxonomy with fan-out 2 at each level: 8 -> 4 -> 2.
    fn three_level() -> LabelTaxonomy {
        LabelTaxonomy::new(
            vec![8, 4, 2],
            vec![vec![0, 0, 1, 1, 2, 2, 3, 3], vec![0, 0, 1, 1]],
            vec![1.0, 2.0, 4.0],
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn shared_levels_symmetric_bounded(a in 0usize..8, b in 0usize..8) {
            let tax = three_level();
            let pa = tax.expand_label(a).unwrap();
            let pb = tax.expand_label(b).unwrap();
            let s = tax.shared_levels(&pa, &pb);
            prop_assert_eq!(s, tax.shared_levels(&pb, &pa));
            prop_assert!(s <= tax.levels());
            prop_assert_eq!(tax.shared_levels(&pa, &pa), tax.levels());
        }

        /// Consistent paths agree on a coarse suffix: once two paths match at
        /// level k they match at every level above it.
        #[test]
        fn matches_form_suffix(a in 0usize..8, b in 0usize..8) {
            let tax = three_level();
            let pa = tax.expand_label(a).unwrap();
            let pb = tax.expand_label(b).unwrap();
            for k in 0..tax.levels() {
                if pa.class_at(k) == pb.class_at(k) {
                    for j in k..tax.levels() {
                        prop_assert_eq!(pa.class_at(j), pb.class_at(j));
                    }
                }
            }
        }
    }
}
