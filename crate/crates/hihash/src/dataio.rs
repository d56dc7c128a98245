//! Dataset ingestion and seeded synthetic data generation.
//!
//! Users bring precomputed feature vectors (from any external backbone)
//! plus leaf-class labels; paths are expanded through the taxonomy. There
//! is no image handling anywhere. Features load from CSV or from the raw
//! `HIFT` binary format (f32 on disk, f64 in memory); labels are one leaf
//! class name or id per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::hierarchy::{HierarchyError, LabelPath, LabelTaxonomy};

const FEATURE_MAGIC: &[u8; 4] = b"HIFT";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid label: {0}")]
    InvalidPath(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Database,
    Query,
}

/// Feature matrix plus one validated label path per row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub paths: Vec<LabelPath>,
    pub split: SplitTag,
    pub taxonomy: Arc<LabelTaxonomy>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        paths: Vec<LabelPath>,
        split: SplitTag,
        taxonomy: Arc<LabelTaxonomy>,
    ) -> Result<Self, DataError> {
        if features.nrows() == 0 {
            return Err(DataError::Parse("dataset is empty".into()));
        }
        if features.nrows() != paths.len() {
            return Err(DataError::DimensionMismatch {
                what: "rows vs labels",
                expected: features.nrows(),
                got: paths.len(),
            });
        }
        for path in &paths {
            taxonomy
                .validate_path(path)
                .map_err(|e| DataError::InvalidPath(e.to_string()))?;
        }
        Ok(Dataset {
            features,
            paths,
            split,
            taxonomy,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Writes features (binary `HIFT` unless the path ends in `.csv`) and
    /// leaf-class names, one per line.
    pub fn save(&self, features_path: &Path, labels_path: &Path) -> Result<(), DataError> {
        if features_path.extension().is_some_and(|e| e == "csv") {
            let mut w = BufWriter::new(File::create(features_path)?);
            for row in self.features.outer_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{}", line.join(","))?;
            }
            w.flush()?;
        } else {
            let mut w = BufWriter::new(File::create(features_path)?);
            w.write_all(FEATURE_MAGIC)?;
            binio::write_u64(&mut w, self.len() as u64)?;
            binio::write_u32(&mut w, self.dim() as u32)?;
            for &v in self.features.iter() {
                binio::write_f32(&mut w, v as f32)?;
            }
            w.flush()?;
        }
        let mut w = BufWriter::new(File::create(labels_path)?);
        for path in &self.paths {
            writeln!(w, "{}", self.taxonomy.class_name(0, path.leaf()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads features + labels and validates them against a taxonomy file.
pub fn load_dataset(
    features_path: &Path,
    labels_path: &Path,
    taxonomy_path: &Path,
    sigma2_override: Option<&[f64]>,
    split: SplitTag,
) -> Result<Dataset, DataError> {
    let taxonomy = Arc::new(LabelTaxonomy::load(taxonomy_path, sigma2_override)?);
    let features = load_features(features_path)?;
    let leaves = load_leaf_labels(labels_path, &taxonomy)?;
    if leaves.len() != features.nrows() {
        return Err(DataError::DimensionMismatch {
            what: "label rows vs feature rows",
            expected: features.nrows(),
            got: leaves.len(),
        });
    }
    let paths = leaves
        .into_iter()
        .map(|leaf| taxonomy.expand_label(leaf))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DataError::InvalidPath(e.to_string()))?;
    Dataset::new(features, paths, split, taxonomy)
}

/// Reads a feature matrix, sniffing the `HIFT` magic to choose between the
/// binary layout and CSV.
pub fn load_features(path: &Path) -> Result<Array2<f64>, DataError> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    let is_binary = match f.read_exact(&mut magic) {
        Ok(()) => &magic == FEATURE_MAGIC,
        Err(_) => false,
    };
    if is_binary {
        let mut r = BufReader::new(f);
        let n = binio::read_u64(&mut r)? as usize;
        let d = binio::read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(binio::read_f32(&mut r)? as f64);
        }
        Array2::from_shape_vec((n, d), data)
            .map_err(|e| DataError::Parse(format!("feature file shape: {e}")))
    } else {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| DataError::Parse(e.to_string()))?;
        let mut rows: Vec<f64> = Vec::new();
        let mut dim: Option<usize> = None;
        let mut count = 0usize;
        for record in reader.records() {
            let record = record.map_err(|e| DataError::Parse(e.to_string()))?;
            if record.len() == 1 && record[0].is_empty() {
                continue;
            }
            match dim {
                None => dim = Some(record.len()),
                Some(d) if d != record.len() => {
                    return Err(DataError::DimensionMismatch {
                        what: "feature row width",
                        expected: d,
                        got: record.len(),
                    });
                }
                _ => {}
            }
            for field in record.iter() {
                rows.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| DataError::Parse(format!("bad float {field:?}: {e}")))?,
                );
            }
            count += 1;
        }
        let d = dim.unwrap_or(0);
        Array2::from_shape_vec((count, d), rows)
            .map_err(|e| DataError::Parse(format!("feature csv shape: {e}")))
    }
}

/// One leaf class per line, as a class name or a numeric id.
fn load_leaf_labels(path: &Path, taxonomy: &LabelTaxonomy) -> Result<Vec<usize>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut leaves = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let leaf = if let Ok(id) = token.parse::<usize>() {
            id
        } else {
            taxonomy.leaf_by_name(token).ok_or_else(|| {
                DataError::InvalidPath(format!("line {}: unknown class {token:?}", lineno + 1))
            })?
        };
        if leaf >= taxonomy.class_count(0) {
            return Err(DataError::InvalidPath(format!(
                "line {}: leaf id {leaf} out of range",
                lineno + 1
            )));
        }
        leaves.push(leaf);
    }
    Ok(leaves)
}

/// Spec for a seeded synthetic hierarchical dataset. Coarse class centers
/// are drawn uniformly in a ball of radius `coarse_spread`; each child
/// center perturbs its parent in a ball of radius `child_spread` (halved
/// per extra depth level); samples add isotropic Gaussian noise whose
/// expected norm is `noise`. All three scales are vector norms, so the
/// decreasing-spread invariant compares like units and the geometry
/// genuinely carries the hierarchy at any input dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Per-level class counts, finest first.
    pub class_counts: Vec<usize>,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub coarse_spread: f64,
    pub child_spread: f64,
    pub noise: f64,
    pub seed: u64,
    /// Variance schedule for the generated taxonomy; defaults to 4^k.
    pub sigma2: Option<Vec<f64>>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_counts.is_empty() {
            return Err(DataError::BadSpec("no levels".into()));
        }
        if self.class_counts.contains(&0) {
            return Err(DataError::BadSpec("zero classes at some level".into()));
        }
        if self.input_dim == 0 || self.samples_per_class == 0 {
            return Err(DataError::BadSpec("zero input dim or samples".into()));
        }
        let k = self.class_counts.len();
        if k > 1 && !(self.coarse_spread > self.child_spread) {
            return Err(DataError::BadSpec(format!(
                "coarse spread {} must exceed child spread {}",
                self.coarse_spread, self.child_spread
            )));
        }
        let innermost = if k > 1 { self.child_spread } else { self.coarse_spread };
        if !(innermost > self.noise) || !(self.noise >= 0.0) {
            return Err(DataError::BadSpec(format!(
                "noise {} must be nonnegative and below the innermost spread {}",
                self.noise, innermost
            )));
        }
        Ok(())
    }

    fn taxonomy(&self) -> Result<LabelTaxonomy, DataError> {
        let k = self.class_counts.len();
        let mut parents = Vec::with_capacity(k.saturating_sub(1));
        for level in 0..k - 1 {
            let (c, cp) = (self.class_counts[level], self.class_counts[level + 1]);
            // contiguous grouping: class i maps to parent i*cp/c
            parents.push((0..c).map(|i| i * cp / c).collect());
        }
        let sigma2 = self
            .sigma2
            .clone()
            .unwrap_or_else(|| (0..k).map(|level| 4f64.powi(level as i32)).collect());
        LabelTaxonomy::new(self.class_counts.clone(), parents, sigma2)
            .map_err(|e| DataError::BadSpec(e.to_string()))
    }
}

/// Uniform draw from the D-ball of the given radius.
fn ball_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Array1<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dir: Array1<f64> = Array1::from_shape_fn(dim, |_| normal.sample(rng));
    let norm = dir.mapv(|v| v * v).sum().sqrt();
    if norm > 0.0 {
        dir /= norm;
    }
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir * r
}

/// Deterministic synthetic dataset; see [`SynthSpec`] for the generative
/// process.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let taxonomy = Arc::new(spec.taxonomy()?);
    let k = taxonomy.levels();
    let dim = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // class centers top-down: coarsest in a ball, children perturb parents
    // at a scale that halves with each extra depth level
    let mut level_centers: Vec<Vec<Array1<f64>>> = vec![Vec::new(); k];
    let top = k - 1;
    for _ in 0..taxonomy.class_count(top) {
        level_centers[top].push(ball_point(&mut rng, dim, spec.coarse_spread));
    }
    for level in (0..top).rev() {
        let scale = spec.child_spread * 0.5f64.powi((top - 1 - level) as i32);
        for class in 0..taxonomy.class_count(level) {
            let parent = taxonomy.parent(level, class);
            let center = &level_centers[level + 1][parent] + &ball_point(&mut rng, dim, scale);
            level_centers[level].push(center);
        }
    }

    // per-coordinate sigma chosen so the noise vector norm is ~`noise`
    let normal = Normal::new(0.0, spec.noise / (dim as f64).sqrt())
        .map_err(|e| DataError::BadSpec(e.to_string()))?;
    let n = taxonomy.class_count(0) * spec.samples_per_class;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut paths = Vec::with_capacity(n);
    let mut row = 0;
    for leaf in 0..taxonomy.class_count(0) {
        let path = taxonomy.expand_label(leaf)?;
        for _ in 0..spec.samples_per_class {
            for d in 0..dim {
                features[[row, d]] = level_centers[0][leaf][d] + normal.sample(&mut rng);
            }
            paths.push(path.clone());
            row += 1;
        }
    }
    Dataset::new(features, paths, SplitTag::Train, taxonomy)
}

/// Stratified split by fine class into (database, queries). Every class with
/// at least two samples contributes to both sides; singleton classes go to
/// the database with a warning.
pub fn split_dataset(
    dataset: &Dataset,
    query_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(DataError::BadSpec(format!(
            "query fraction must be in (0, 1), got {query_fraction}"
        )));
    }
    let fine = dataset.taxonomy.class_count(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); fine];
    for (i, path) in dataset.paths.iter().enumerate() {
        by_class[path.leaf()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db_rows = Vec::new();
    let mut query_rows = Vec::new();
    for (class, mut rows) in by_class.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() == 1 {
            log::warn!("class {class} has a single sample; keeping it in the database");
            db_rows.push(rows[0]);
            continue;
        }
        rows.shuffle(&mut rng);
        let ideal = (query_fraction * rows.len() as f64).round() as usize;
        let q = ideal.clamp(1, rows.len() - 1);
        query_rows.extend_from_slice(&rows[..q]);
        db_rows.extend_from_slice(&rows[q..]);
    }
    db_rows.sort_unstable();
    query_rows.sort_unstable();
    if db_rows.is_empty() || query_rows.is_empty() {
        return Err(DataError::BadSpec(
            "split produced an empty side; need more samples".into(),
        ));
    }
    let take = |rows: &[usize], split: SplitTag| -> Dataset {
        let feats = Array2::from_shape_fn((rows.len(), dataset.dim()), |(i, j)| {
            dataset.features[[rows[i], j]]
        });
        let paths = rows.iter().map(|&i| dataset.paths[i].clone()).collect();
        Dataset {
            features: feats,
            paths,
            split,
            taxonomy: Arc::clone(&dataset.taxonomy),
        }
    };
    Ok((
        take(&db_rows, SplitTag::Database),
        take(&query_rows, SplitTag::Query),
    ))
}

/// Mean Euclidean distance between feature rows selected by a pair filter.
pub fn mean_pair_distance(
    features: &Array2<f64>,
    paths: &[LabelPath],
    mut pair_filter: impl FnMut(&LabelPath, &LabelPath) -> bool,
) -> f64 {
    let n = features.nrows();
    let mut acc = 0.0;
    let mut count = 0u64;
    let dist = |a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>| -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    for i in 0..n {
        for j in i + 1..n {
            if pair_filter(&paths[i], &paths[j]) {
                acc += dist(features.row(i), features.row(j));
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        acc / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            class_counts: vec![4, 2],
            input_dim: 6,
            samples_per_class: 10,
            coarse_spread: 10.0,
            child_spread: 2.0,
            noise: 0.5,
            seed: 42,
            sigma2: None,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.paths, b.paths);
        let mut spec = small_spec();
        spec.seed = 43;
        let c = generate_synthetic(&spec).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn zero_noise_collapses_leaf_samples() {
        let mut spec = small_spec();
        spec.noise = 0.0;
        let ds = generate_synthetic(&spec).unwrap();
        for leaf in 0..4 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.paths[i].leaf() == leaf).collect();
            for w in rows.windows(2) {
                assert_eq!(ds.features.row(w[0]), ds.features.row(w[1]));
            }
        }
    }

    #[test]
    fn spread_ordering_shows_in_distances() {
        // 4 coarse x 4 fine children each, spreads (10, 2, 0.5)
        let spec = SynthSpec {
            class_counts: vec![16, 4],
            input_dim: 8,
            samples_per_class: 12,
            coarse_spread: 10.0,
            child_spread: 2.0,
            noise: 0.5,
            seed: 7,
            sigma2: None,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let within_fine = mean_pair_distance(&ds.features, &ds.paths, |a, b| a.leaf() == b.leaf());
        let within_coarse = mean_pair_distance(&ds.features, &ds.paths, |a, b| {
            a.leaf() != b.leaf() && a.class_at(1) == b.class_at(1)
        });
        let across = mean_pair_distance(&ds.features, &ds.paths, |a, b| a.class_at(1) != b.class_at(1));
        assert!(
            within_fine < within_coarse && within_coarse < across,
            "expected {within_fine} < {within_coarse} < {across}"
        );
    }

    #[test]
    fn nearest_center_classifier_is_accurate() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        // leaf centers = per-class means of the generated samples
        let fine = ds.taxonomy.class_count(0);
        let mut centers = Array2::<f64>::zeros((fine, ds.dim()));
        let mut counts = vec![0usize; fine];
        for (i, path) in ds.paths.iter().enumerate() {
            let mut row = centers.row_mut(path.leaf());
            row += &ds.features.row(i);
            counts[path.leaf()] += 1;
        }
        for c in 0..fine {
            let mut row = centers.row_mut(c);
            row /= counts[c] as f64;
        }
        let mut correct = 0;
        for (i, path) in ds.paths.iter().enumerate() {
            let x = ds.features.row(i);
            let best = (0..fine)
                .min_by(|&a, &b| {
                    let da: f64 = (&x - &centers.row(a)).mapv(|v| v * v).sum();
                    let db: f64 = (&x - &centers.row(b)).mapv(|v| v * v).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == path.leaf() {
                correct += 1;
            }
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn bad_specs_rejected() {
        let mut spec = small_spec();
        spec.child_spread = 20.0; // child above coarse
        assert!(matches!(generate_synthetic(&spec), Err(DataError::BadSpec(_))));
        let mut spec = small_spec();
        spec.noise = 5.0; // noise above child spread
        assert!(matches!(generate_synthetic(&spec), Err(DataError::BadSpec(_))));
        let mut spec = small_spec();
        spec.class_counts = vec![];
        assert!(matches!(generate_synthetic(&spec), Err(DataError::BadSpec(_))));
    }

    #[test]
    fn save_load_round_trip_binary() {
        let dir = TempDir::new().unwrap();
        let ds = generate_synthetic(&small_spec()).unwrap();
        let fpath = dir.path().join("features.bin");
        let lpath = dir.path().join("labels.csv");
        let tpath = dir.path().join("tax.json");
        ds.save(&fpath, &lpath).unwrap();
        ds.taxonomy.save(&tpath).unwrap();

        let loaded = load_dataset(&fpath, &lpath, &tpath, None, SplitTag::Train).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.paths, ds.paths);
        // values went through f32; a second save/load round-trips bit-exactly
        let fpath2 = dir.path().join("features2.bin");
        let lpath2 = dir.path().join("labels2.csv");
        loaded.save(&fpath2, &lpath2).unwrap();
        let again = load_dataset(&fpath2, &lpath2, &tpath, None, SplitTag::Train).unwrap();
        assert_eq!(loaded.features, again.features);
        assert_eq!(loaded.paths, again.paths);
        assert_eq!(
            std::fs::read(&fpath).unwrap(),
            std::fs::read(&fpath2).unwrap()
        );
    }

    #[test]
    fn csv_features_round_trip() {
        let dir = TempDir::new().unwrap();
        let ds = generate_synthetic(&small_spec()).unwrap();
        let fpath = dir.path().join("features.csv");
        let lpath = dir.path().join("labels.csv");
        let tpath = dir.path().join("tax.json");
        ds.save(&fpath, &lpath).unwrap();
        ds.taxonomy.save(&tpath).unwrap();
        let loaded = load_dataset(&fpath, &lpath, &tpath, None, SplitTag::Train).unwrap();
        // f64 Display output round-trips exactly
        assert_eq!(loaded.features, ds.features);
    }

    #[test]
    fn loader_rejects_bad_inputs() {
        let dir = TempDir::new().unwrap();
        let tax = LabelTaxonomy::new(vec![2], vec![], vec![1.0]).unwrap();
        let tpath = dir.path().join("tax.json");
        tax.save(&tpath).unwrap();

        // 2-row feature file + matching labels loads fine
        let fpath = dir.path().join("f.csv");
        std::fs::write(&fpath, "1.0,2.0\n3.0,4.0\n").unwrap();
        let lpath = dir.path().join("l.csv");
        std::fs::write(&lpath, "l0_c0\nl0_c1\n").unwrap();
        let ds = load_dataset(&fpath, &lpath, &tpath, None, SplitTag::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);

        // unknown class name
        std::fs::write(&lpath, "l0_c0\nnope\n").unwrap();
        assert!(matches!(
            load_dataset(&fpath, &lpath, &tpath, None, SplitTag::Train),
            Err(DataError::InvalidPath(_))
        ));

        // ragged feature row
        std::fs::write(&fpath, "1.0,2.0\n3.0\n").unwrap();
        std::fs::write(&lpath, "0\n1\n").unwrap();
        assert!(matches!(
            load_dataset(&fpath, &lpath, &tpath, None, SplitTag::Train),
            Err(DataError::DimensionMismatch { .. })
        ));

        // unparsable float
        std::fs::write(&fpath, "1.0,zap\n").unwrap();
        std::fs::write(&lpath, "0\n").unwrap();
        assert!(matches!(
            load_dataset(&fpath, &lpath, &tpath, None, SplitTag::Train),
            Err(DataError::Parse(_))
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = TempDir::new().unwrap();
        let tax = LabelTaxonomy::new(vec![2], vec![], vec![1.0]).unwrap();
        let tpath = dir.path().join("tax.json");
        tax.save(&tpath).unwrap();
        let fpath = dir.path().join("f.csv");
        let lpath = dir.path().join("l.csv");
        std::fs::write(&fpath, "").unwrap();
        std::fs::write(&lpath, "").unwrap();
        assert!(matches!(
            load_dataset(&fpath, &lpath, &tpath, None, SplitTag::Train),
            Err(DataError::Parse(_))
        ));
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let ds = generate_synthetic(&small_spec()).unwrap(); // 10 per class
        let (db, q) = split_dataset(&ds, 0.5, 99).unwrap();
        assert_eq!(db.len() + q.len(), ds.len());
        for leaf in 0..4 {
            let qc = q.paths.iter().filter(|p| p.leaf() == leaf).count();
            let dc = db.paths.iter().filter(|p| p.leaf() == leaf).count();
            assert_eq!(qc, 5);
            assert_eq!(dc, 5);
        }
        let (db2, q2) = split_dataset(&ds, 0.5, 99).unwrap();
        assert_eq!(db.features, db2.features);
        assert_eq!(q.features, q2.features);
        assert_eq!(db.split, SplitTag::Database);
        assert_eq!(q.split, SplitTag::Query);
    }

    #[test]
    fn singleton_class_goes_to_database() {
        let tax = Arc::new(LabelTaxonomy::new(vec![2], vec![], vec![1.0]).unwrap());
        let feats = ndarray::array![[0.0], [1.0], [2.0], [3.0]];
        let paths = vec![
            tax.expand_label(0).unwrap(),
            tax.expand_label(0).unwrap(),
            tax.expand_label(0).unwrap(),
            tax.expand_label(1).unwrap(), // singleton
        ];
        let ds = Dataset::new(feats, paths, SplitTag::Train, tax).unwrap();
        let (db, q) = split_dataset(&ds, 0.5, 1).unwrap();
        assert!(q.paths.iter().all(|p| p.leaf() == 0));
        assert!(db.paths.iter().any(|p| p.leaf() == 1));
    }
}
