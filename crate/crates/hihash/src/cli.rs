//! Command-line pipeline: gen-data, train, encode, eval, search.
//!
//! All commands read one `RunConfig`, assembled from an optional TOML file
//! (flat key-value with dotted sections) plus `key=value` overrides from
//! the command line. Every piece of randomness flows from the single
//! top-level seed. Exit codes are stable for scripting: 0 success,
//! 1 usage/config error, 2 runtime failure.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::BinaryCode;
use crate::dataio::{self, Dataset, SplitTag, SynthSpec};
use crate::encoder::{Activation, EncoderState, InitScheme};
use crate::hierarchy::LabelTaxonomy;
use crate::index::CodeDatabase;
use crate::loss::{DistanceForm, LossConfig};
use crate::metrics::{
    compute_metrics, shared_level_sim, GainForm, MetricParams, MetricReport,
};
use crate::trainer::{
    train, Checkpoint, DecaySchedule, TrainConfig, TrainError, TrainHook, TrainRecord,
};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad usage, bad config, or unreadable/inconsistent input files.
    #[error("{0}")]
    Config(String),
    /// Failure while executing an otherwise well-formed command.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn config_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{context}: {e}"))
}

fn runtime_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; drives generation, init, and shuffling.
    pub seed: u64,
    /// Output directory; created on demand.
    pub out: PathBuf,
    /// Accepted for interface stability; execution is single-threaded and
    /// always deterministic.
    pub deterministic: bool,
    pub data: DataSection,
    pub synth: SynthSection,
    pub encoder: EncoderSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub encode: EncodeSection,
    pub search: SearchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("out"),
            deterministic: true,
            data: DataSection::default(),
            synth: SynthSection::default(),
            encoder: EncoderSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            encode: EncodeSection::default(),
            search: SearchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Feature file (CSV or HIFT binary). Defaults to
    /// `<out>/train_features.bin`.
    pub features: Option<PathBuf>,
    /// Leaf labels, one per line. Defaults to `<out>/train_labels.csv`.
    pub labels: Option<PathBuf>,
    /// Taxonomy JSON. Defaults to `<out>/taxonomy.json`.
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Per-level class counts, finest first.
    pub class_counts: Vec<usize>,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub coarse_spread: f64,
    pub child_spread: f64,
    pub noise: f64,
    /// Fraction of each class held out as queries by gen-data.
    pub query_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            class_counts: vec![16, 4],
            input_dim: 32,
            samples_per_class: 50,
            coarse_spread: 10.0,
            child_spread: 2.0,
            noise: 0.5,
            query_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: Vec<usize>,
    /// Code length L.
    pub bits: usize,
    pub activation: Activation,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            hidden: vec![64],
            bits: 32,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub eta1: f64,
    pub distance: DistanceForm,
    /// Per-level variance schedule. Overrides the taxonomy file's own
    /// `sigma2` when set; required if the file has none.
    pub sigma2: Option<Vec<f64>>,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            alpha: 1.1,
            eta1: 1.0,
            distance: DistanceForm::Squared,
            sigma2: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub inner_iters: Option<usize>,
    pub max_outer: usize,
    pub convergence_tol: f64,
    pub stage2_eta1_multiplier: f64,
    pub stage2_fraction: f64,
    pub lr_schedule: DecaySchedule,
    pub halt_after: Option<usize>,
    /// Continue from this training checkpoint.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr_start: d.lr_start,
            lr_end: d.lr_end,
            momentum: d.momentum,
            batch_size: d.batch_size,
            inner_iters: d.inner_iters,
            max_outer: d.max_outer,
            convergence_tol: d.convergence_tol,
            stage2_eta1_multiplier: d.stage2_eta1_multiplier,
            stage2_fraction: d.stage2_fraction,
            lr_schedule: d.lr_schedule,
            halt_after: None,
            resume: None,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            momentum: self.momentum,
            batch_size: self.batch_size,
            inner_iters: self.inner_iters,
            max_outer: self.max_outer,
            convergence_tol: self.convergence_tol,
            stage2_eta1_multiplier: self.stage2_eta1_multiplier,
            stage2_fraction: self.stage2_fraction,
            lr_schedule: self.lr_schedule,
            seed,
            halt_after: self.halt_after,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Query code database (HIDB).
    pub queries: Option<PathBuf>,
    /// Database code database (HIDB).
    pub database: Option<PathBuf>,
    pub mahp_k: usize,
    pub ndcg_k: usize,
    /// Drop each query's own id from the database side (for self-query
    /// protocols where ids align).
    pub exclude_self: bool,
    pub gain: GainForm,
    pub per_query_csv: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            queries: None,
            database: None,
            mahp_k: 100,
            ndcg_k: 100,
            exclude_self: false,
            gain: GainForm::Exponential,
            per_query_csv: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSection {
    /// Encoder checkpoint; defaults to `<out>/encoder.bin`.
    pub checkpoint: Option<PathBuf>,
    /// Features/labels to encode; default to the `data` section paths.
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Output code database; defaults to `<out>/codes.hidb`.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    /// Code database to search; defaults to `<out>/codes.hidb`.
    pub database: Option<PathBuf>,
    pub k: usize,
    /// Query by database item id...
    pub id: Option<u64>,
    /// ...or by raw feature vector (encoded through the checkpoint).
    pub feature: Option<Vec<f64>>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            database: None,
            k: 10,
            id: None,
            feature: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Loads the TOML file (if any) and applies dotted-key overrides in
    /// order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| config_err(&format!("config {}", p.display()), e))?;
                text.parse()
                    .map_err(|e| config_err(&format!("config {}", p.display()), e))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            apply_override(&mut table, key, raw)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_err("config", e))
    }

    fn features_path(&self) -> PathBuf {
        self.data
            .features
            .clone()
            .unwrap_or_else(|| self.out.join("train_features.bin"))
    }

    fn labels_path(&self) -> PathBuf {
        self.data
            .labels
            .clone()
            .unwrap_or_else(|| self.out.join("train_labels.csv"))
    }

    fn taxonomy_path(&self) -> PathBuf {
        self.data
            .taxonomy
            .clone()
            .unwrap_or_else(|| self.out.join("taxonomy.json"))
    }

    fn encoder_checkpoint_path(&self) -> PathBuf {
        self.out.join("encoder.bin")
    }
}

/// Sets `table[a][b]... = value` for a dotted key, parsing the value as
/// TOML when possible and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, dotted: &str, raw: &str) -> Result<(), CliError> {
    let value: toml::Value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {dotted:?}")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!("override {dotted:?} crosses a non-table key"))
            })?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| runtime_err("create output dir", e))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Debug, Serialize)]
pub struct GenDataSummary {
    pub samples: usize,
    pub input_dim: usize,
    pub levels: usize,
    pub class_counts: Vec<usize>,
    pub database_rows: usize,
    pub query_rows: usize,
    pub taxonomy: PathBuf,
    pub database_features: PathBuf,
    pub query_features: PathBuf,
}

impl GenDataSummary {
    pub fn human(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "generated {} samples (D = {}, K = {}, classes {:?})",
            self.samples, self.input_dim, self.levels, self.class_counts
        );
        let _ = writeln!(
            s,
            "database: {} rows -> {}",
            self.database_rows,
            self.database_features.display()
        );
        let _ = write!(
            s,
            "queries:  {} rows -> {}",
            self.query_rows,
            self.query_features.display()
        );
        s
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataSummary, CliError> {
    let spec = SynthSpec {
        class_counts: cfg.synth.class_counts.clone(),
        input_dim: cfg.synth.input_dim,
        samples_per_class: cfg.synth.samples_per_class,
        coarse_spread: cfg.synth.coarse_spread,
        child_spread: cfg.synth.child_spread,
        noise: cfg.synth.noise,
        seed: cfg.seed,
        sigma2: cfg.loss.sigma2.clone(),
    };
    let dataset = dataio::generate_synthetic(&spec).map_err(|e| config_err("gen-data", e))?;
    let (db, queries) = dataio::split_dataset(&dataset, cfg.synth.query_fraction, cfg.seed)
        .map_err(|e| config_err("gen-data split", e))?;
    ensure_out_dir(cfg)?;
    let tax_path = cfg.out.join("taxonomy.json");
    dataset
        .taxonomy
        .save(&tax_path)
        .map_err(|e| runtime_err("write taxonomy", e))?;
    let db_features = cfg.out.join("train_features.bin");
    let db_labels = cfg.out.join("train_labels.csv");
    db.save(&db_features, &db_labels)
        .map_err(|e| runtime_err("write database split", e))?;
    let q_features = cfg.out.join("query_features.bin");
    let q_labels = cfg.out.join("query_labels.csv");
    queries
        .save(&q_features, &q_labels)
        .map_err(|e| runtime_err("write query split", e))?;
    Ok(GenDataSummary {
        samples: dataset.len(),
        input_dim: dataset.dim(),
        levels: dataset.taxonomy.levels(),
        class_counts: dataset.taxonomy.class_counts().to_vec(),
        database_rows: db.len(),
        query_rows: queries.len(),
        taxonomy: tax_path,
        database_features: db_features,
        query_features: q_features,
    })
}

// ---------------------------------------------------------------------------
// train

struct StreamingHook {
    log: BufWriter<File>,
    checkpoint_path: PathBuf,
    checkpoint_tmp: PathBuf,
}

impl StreamingHook {
    fn new(out_dir: &Path, append: bool) -> Result<Self, CliError> {
        let log_path = out_dir.join("log.jsonl");
        let file = if append {
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
        } else {
            File::create(&log_path)
        }
        .map_err(|e| runtime_err("open train log", e))?;
        Ok(StreamingHook {
            log: BufWriter::new(file),
            checkpoint_path: out_dir.join("checkpoint.bin"),
            checkpoint_tmp: out_dir.join("checkpoint.bin.tmp"),
        })
    }
}

impl TrainHook for StreamingHook {
    fn on_record(&mut self, record: &TrainRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record)
            .map_err(|e| TrainError::Format(e.to_string()))?;
        writeln!(self.log, "{line}")?;
        self.log.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<(), TrainError> {
        checkpoint.save(&self.checkpoint_tmp)?;
        fs::rename(&self.checkpoint_tmp, &self.checkpoint_path)?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub outer_iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub halted: bool,
    pub wall_ms: u64,
    pub encoder: PathBuf,
    pub centers: PathBuf,
    pub log: PathBuf,
}

impl TrainSummary {
    pub fn human(&self) -> String {
        let status = if self.halted {
            "halted"
        } else if self.converged {
            "converged"
        } else {
            "budget exhausted"
        };
        format!(
            "trained {} outer iterations ({status}), final mean loss {:.6}\nencoder -> {}\ncenters -> {}\nlog     -> {}",
            self.outer_iterations,
            self.final_loss,
            self.encoder.display(),
            self.centers.display(),
            self.log.display()
        )
    }
}

fn load_training_inputs(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let features = cfg.features_path();
    let labels = cfg.labels_path();
    let taxonomy = cfg.taxonomy_path();
    require_file(&taxonomy, "taxonomy file")?;
    require_file(&features, "feature file")?;
    require_file(&labels, "label file")?;
    dataio::load_dataset(
        &features,
        &labels,
        &taxonomy,
        cfg.loss.sigma2.as_deref(),
        SplitTag::Train,
    )
    .map_err(|e| config_err("load dataset", e))
}

fn build_loss_config(cfg: &RunConfig, tax: &LabelTaxonomy) -> Result<LossConfig, CliError> {
    LossConfig::new(cfg.loss.alpha, cfg.loss.eta1, tax.sigma2().to_vec())
        .map(|c| c.with_distance(cfg.loss.distance))
        .map_err(|e| config_err("loss config", e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let started = Instant::now();
    let dataset = load_training_inputs(cfg)?;
    let loss_cfg = build_loss_config(cfg, &dataset.taxonomy)?;
    let train_cfg = cfg.train.to_train_config(cfg.seed);

    let resume = match &cfg.train.resume {
        Some(path) => {
            require_file(path, "resume checkpoint")?;
            Some(Checkpoint::load(path).map_err(|e| config_err("resume checkpoint", e))?)
        }
        None => None,
    };
    let mut dims = vec![dataset.dim()];
    dims.extend_from_slice(&cfg.encoder.hidden);
    dims.push(cfg.encoder.bits);
    let encoder_init =
        EncoderState::init(&dims, cfg.encoder.activation, cfg.seed, InitScheme::Xavier)
            .map_err(|e| config_err("encoder init", e))?;

    ensure_out_dir(cfg)?;
    let mut hook = StreamingHook::new(&cfg.out, resume.is_some())?;
    let outcome = train(&dataset, encoder_init, &loss_cfg, &train_cfg, resume, &mut hook)
        .map_err(|e| runtime_err("train", e))?;

    let encoder_path = cfg.encoder_checkpoint_path();
    outcome
        .encoder
        .save(&encoder_path)
        .map_err(|e| runtime_err("write encoder", e))?;
    let centers_path = cfg.out.join("centers.bin");
    outcome
        .centers
        .save(&centers_path)
        .map_err(|e| runtime_err("write centers", e))?;
    // a completed run ends with a measurement-only record at index
    // max_outer; a halted run stops right after its last SGD pass
    let completed = outcome
        .log
        .records
        .last()
        .map_or(0, |r| r.outer + usize::from(outcome.halted));
    Ok(TrainSummary {
        outer_iterations: completed,
        final_loss: outcome.log.records.last().map_or(f64::NAN, |r| r.mean_loss),
        converged: outcome.converged,
        halted: outcome.halted,
        wall_ms: started.elapsed().as_millis() as u64,
        encoder: encoder_path,
        centers: centers_path,
        log: cfg.out.join("log.jsonl"),
    })
}

// ---------------------------------------------------------------------------
// encode

#[derive(Debug, Serialize)]
pub struct EncodeSummary {
    pub bits: usize,
    pub count: usize,
    pub output: PathBuf,
}

impl EncodeSummary {
    pub fn human(&self) -> String {
        format!(
            "encoded {} items at {} bits -> {}",
            self.count,
            self.bits,
            self.output.display()
        )
    }
}

pub fn cmd_encode(cfg: &RunConfig) -> Result<EncodeSummary, CliError> {
    let checkpoint = cfg
        .encode
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.encoder_checkpoint_path());
    require_file(&checkpoint, "encoder checkpoint")?;
    let encoder = EncoderState::load(&checkpoint).map_err(|e| config_err("encoder", e))?;

    let features = cfg.encode.features.clone().unwrap_or_else(|| cfg.features_path());
    let labels = cfg.encode.labels.clone().unwrap_or_else(|| cfg.labels_path());
    let taxonomy = cfg.taxonomy_path();
    require_file(&features, "feature file")?;
    require_file(&labels, "label file")?;
    require_file(&taxonomy, "taxonomy file")?;
    let dataset = dataio::load_dataset(
        &features,
        &labels,
        &taxonomy,
        cfg.loss.sigma2.as_deref(),
        SplitTag::Database,
    )
    .map_err(|e| config_err("load dataset", e))?;
    if dataset.dim() != encoder.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {}-dim features, dataset has {}",
            encoder.input_dim(),
            dataset.dim()
        )));
    }

    let embeddings = encoder
        .forward_batch(dataset.features.view())
        .map_err(|e| runtime_err("encode", e))?;
    let mut db = CodeDatabase::new(encoder.output_dim(), dataset.taxonomy.levels());
    for (row, (emb, path)) in embeddings.outer_iter().zip(&dataset.paths).enumerate() {
        let code = BinaryCode::from_embedding(emb);
        db.push(&code, path.clone(), row as u64)
            .map_err(|e| runtime_err("build code database", e))?;
    }
    ensure_out_dir(cfg)?;
    let output = cfg
        .encode
        .output
        .clone()
        .unwrap_or_else(|| cfg.out.join("codes.hidb"));
    db.save(&output).map_err(|e| runtime_err("write code database", e))?;
    Ok(EncodeSummary {
        bits: db.bits(),
        count: db.len(),
        output,
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    #[serde(flatten)]
    pub report: MetricReport,
}

impl EvalSummary {
    pub fn human(&self) -> String {
        format!(
            "queries: {} against {} database items\nmAP@all   {:.6}\nmAHP@{}  {:.6}\nnDCG@{}  {:.6}",
            self.report.query_count,
            self.report.db_count,
            self.report.map,
            self.report.mahp_k,
            self.report.mahp,
            self.report.ndcg_k,
            self.report.ndcg
        )
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary, CliError> {
    let queries_path = cfg
        .eval
        .queries
        .clone()
        .ok_or_else(|| CliError::Config("eval.queries is not set".into()))?;
    let database_path = cfg
        .eval
        .database
        .clone()
        .ok_or_else(|| CliError::Config("eval.database is not set".into()))?;
    require_file(&queries_path, "query codes")?;
    require_file(&database_path, "database codes")?;
    let queries = CodeDatabase::load(&queries_path).map_err(|e| config_err("query codes", e))?;
    let db = CodeDatabase::load(&database_path).map_err(|e| config_err("database codes", e))?;
    if queries.bits() != db.bits() {
        return Err(CliError::Config(format!(
            "code length mismatch: queries {} bits, database {} bits",
            queries.bits(),
            db.bits()
        )));
    }
    if queries.levels() != db.levels() {
        return Err(CliError::Config(format!(
            "label depth mismatch: queries {} levels, database {}",
            queries.levels(),
            db.levels()
        )));
    }
    if db.is_empty() || queries.is_empty() {
        return Err(CliError::Config("empty code database".into()));
    }

    let mut rankings = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        let hits = db
            .knn(&queries.code(q), db.len())
            .map_err(|e| runtime_err("rank", e))?;
        rankings.push(hits.into_iter().map(|(id, _)| id).collect());
    }
    let mut run = crate::metrics::RetrievalRun::new(
        rankings,
        queries.paths().to_vec(),
        db.ids().to_vec(),
        db.paths().to_vec(),
    )
    .map_err(|e| runtime_err("build retrieval run", e))?;
    if cfg.eval.exclude_self {
        run = run
            .with_self_exclusion(queries.ids())
            .map_err(|e| runtime_err("self exclusion", e))?;
    }

    let max_n = (0..queries.len())
        .map(|q| run.effective_db_len(q))
        .min()
        .unwrap_or(0);
    let mut params = MetricParams {
        mahp_k: cfg.eval.mahp_k,
        ndcg_k: cfg.eval.ndcg_k,
        gain: cfg.eval.gain,
    };
    if params.mahp_k > max_n {
        log::warn!("mahp_k {} exceeds database size; clamping to {max_n}", params.mahp_k);
        params.mahp_k = max_n;
    }
    if params.ndcg_k > max_n {
        log::warn!("ndcg_k {} exceeds database size; clamping to {max_n}", params.ndcg_k);
        params.ndcg_k = max_n;
    }

    let report = compute_metrics(&run, &params, &shared_level_sim)
        .map_err(|e| runtime_err("metrics", e))?;
    if let Some(csv_path) = &cfg.eval.per_query_csv {
        if let Some(parent) = csv_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| runtime_err("create csv dir", e))?;
            }
        }
        let file = File::create(csv_path).map_err(|e| runtime_err("per-query csv", e))?;
        report
            .write_per_query_csv(file)
            .map_err(|e| runtime_err("per-query csv", e))?;
    }
    Ok(EvalSummary { report })
}

// ---------------------------------------------------------------------------
// search

#[derive(Debug, Serialize)]
pub struct SearchHit {
    pub rank: usize,
    pub id: u64,
    pub distance: u32,
    pub path: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Serialize)]
pub struct SearchSummary {
    pub hits: Vec<SearchHit>,
}

impl SearchSummary {
    pub fn human(&self) -> String {
        let mut s = String::new();
        for hit in &self.hits {
            let label = match &hit.labels {
                Some(names) => names.join(" / "),
                None => format!("{:?}", hit.path),
            };
            let _ = writeln!(s, "{:>4}  id {:>6}  d {:>4}  {label}", hit.rank, hit.id, hit.distance);
        }
        s.pop();
        s
    }
}

pub fn cmd_search(cfg: &RunConfig) -> Result<SearchSummary, CliError> {
    let db_path = cfg
        .search
        .database
        .clone()
        .unwrap_or_else(|| cfg.out.join("codes.hidb"));
    require_file(&db_path, "code database")?;
    let db = CodeDatabase::load(&db_path).map_err(|e| config_err("code database", e))?;

    let query = match (&cfg.search.id, &cfg.search.feature) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "give either search.id or search.feature, not both".into(),
            ));
        }
        (Some(id), None) => {
            let pos = db.position_of_id(*id).ok_or_else(|| {
                CliError::Config(format!("unknown id {id} in {}", db_path.display()))
            })?;
            db.code(pos)
        }
        (None, Some(feature)) => {
            let ckpt = cfg
                .search
                .checkpoint
                .clone()
                .unwrap_or_else(|| cfg.encoder_checkpoint_path());
            require_file(&ckpt, "encoder checkpoint")?;
            let encoder = EncoderState::load(&ckpt).map_err(|e| config_err("encoder", e))?;
            if feature.len() != encoder.input_dim() {
                return Err(CliError::Config(format!(
                    "feature has {} entries, encoder expects {}",
                    feature.len(),
                    encoder.input_dim()
                )));
            }
            let x = Array1::from_vec(feature.clone());
            let emb = encoder
                .forward(x.view())
                .map_err(|e| runtime_err("embed query", e))?;
            BinaryCode::from_embedding(emb.view())
        }
        (None, None) => {
            return Err(CliError::Config(
                "set search.id or search.feature to pick a query".into(),
            ));
        }
    };

    // taxonomy (if present) turns class ids into names
    let tax = {
        let path = cfg.taxonomy_path();
        if path.is_file() {
            LabelTaxonomy::load(&path, cfg.loss.sigma2.as_deref()).ok()
        } else {
            None
        }
    };
    let hits = db
        .knn(&query, cfg.search.k)
        .map_err(|e| runtime_err("search", e))?;
    let hits = hits
        .into_iter()
        .enumerate()
        .map(|(i, (id, distance))| {
            let pos = db.position_of_id(id).expect("id from knn");
            let path = db.path(pos).as_slice().to_vec();
            let labels = tax.as_ref().map(|t| {
                path.iter()
                    .enumerate()
                    .map(|(level, &class)| t.class_name(level, class).to_string())
                    .collect()
            });
            SearchHit {
                rank: i + 1,
                id,
                distance,
                path,
                labels,
            }
        })
        .collect();
    Ok(SearchSummary { hits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn base_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out = dir.to_path_buf();
        cfg.seed = 11;
        cfg.synth = SynthSection {
            class_counts: vec![8, 2],
            input_dim: 12,
            samples_per_class: 20,
            coarse_spread: 10.0,
            child_spread: 2.0,
            noise: 0.4,
            query_fraction: 0.25,
        };
        cfg.encoder.hidden = vec![24];
        cfg.encoder.bits = 16;
        cfg.loss.sigma2 = Some(vec![1.0, 4.0]);
        cfg.train.lr_start = 0.05;
        cfg.train.lr_end = 0.01;
        cfg.train.max_outer = 10;
        cfg.train.batch_size = 32;
        cfg.train.convergence_tol = 0.0;
        cfg
    }

    #[test]
    fn overrides_layer_over_file() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\nencoder.bits = 64\ntrain.lr_start = 0.5\nloss.sigma2 = [1.0, 2.0]\n",
        )
        .unwrap();
        let cfg = RunConfig::load(
            Some(&path),
            &[
                ("encoder.bits".to_string(), "128".to_string()),
                ("out".to_string(), "\"elsewhere\"".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.encoder.bits, 128);
        assert_eq!(cfg.train.lr_start, 0.5);
        assert_eq!(cfg.loss.sigma2, Some(vec![1.0, 2.0]));
        assert_eq!(cfg.out, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "trian.lr_start = 0.5\n").unwrap();
        assert!(matches!(
            RunConfig::load(Some(&path), &[]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn bare_string_override_works() {
        let cfg = RunConfig::load(
            None,
            &[("out".to_string(), "plainpath".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.out, PathBuf::from("plainpath"));
    }

    #[test]
    fn gen_data_is_reproducible_on_disk() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let a = cmd_gen_data(&base_config(dir_a.path())).unwrap();
        let b = cmd_gen_data(&base_config(dir_b.path())).unwrap();
        assert_eq!(a.samples, b.samples);
        for name in ["train_features.bin", "query_features.bin", "taxonomy.json"] {
            let ba = std::fs::read(dir_a.path().join(name)).unwrap();
            let bb = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(ba, bb, "{name} differs between identical runs");
        }
    }

    #[test]
    fn gen_data_rejects_bad_spread_order() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.synth.noise = 50.0;
        let err = cmd_gen_data(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn full_pipeline_runs_in_process() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(dir.path());
        cmd_gen_data(&cfg).unwrap();
        let summary = cmd_train(&cfg).unwrap();
        assert!(summary.final_loss.is_finite());
        assert!(dir.path().join("encoder.bin").is_file());
        assert!(dir.path().join("checkpoint.bin").is_file());

        // encode the database split, then the queries
        let enc_db = cmd_encode(&cfg).unwrap();
        assert_eq!(enc_db.bits, 16);
        cfg.encode.features = Some(dir.path().join("query_features.bin"));
        cfg.encode.labels = Some(dir.path().join("query_labels.csv"));
        cfg.encode.output = Some(dir.path().join("queries.hidb"));
        let enc_q = cmd_encode(&cfg).unwrap();
        assert!(enc_q.count > 0);

        // spot-check: stored codes equal binarize(forward(x))
        let db = CodeDatabase::load(&dir.path().join("codes.hidb")).unwrap();
        let encoder = EncoderState::load(&dir.path().join("encoder.bin")).unwrap();
        let ds = dataio::load_dataset(
            &dir.path().join("train_features.bin"),
            &dir.path().join("train_labels.csv"),
            &dir.path().join("taxonomy.json"),
            None,
            SplitTag::Database,
        )
        .unwrap();
        for row in [0usize, 7, ds.len() - 1] {
            let emb = encoder.forward(ds.features.row(row)).unwrap();
            assert_eq!(db.code(row), BinaryCode::from_embedding(emb.view()));
        }

        cfg.eval.queries = Some(dir.path().join("queries.hidb"));
        cfg.eval.database = Some(dir.path().join("codes.hidb"));
        cfg.eval.mahp_k = 40;
        cfg.eval.ndcg_k = 40;
        cfg.eval.per_query_csv = Some(dir.path().join("per_query.csv"));
        let eval = cmd_eval(&cfg).unwrap();
        assert!(eval.report.map > 0.3, "mAP {}", eval.report.map);
        assert!(dir.path().join("per_query.csv").is_file());

        // search by id: the item itself comes back at distance 0
        cfg.search.database = Some(dir.path().join("codes.hidb"));
        cfg.search.id = Some(3);
        cfg.search.k = 3;
        let found = cmd_search(&cfg).unwrap();
        assert_eq!(found.hits[0].distance, 0);
        assert!(found.hits[0].labels.is_some());

        // unknown id is a usage error
        cfg.search.id = Some(999_999);
        let err = cmd_search(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn encode_rejects_feature_width_mismatch() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(dir.path());
        cmd_gen_data(&cfg).unwrap();
        cmd_train(&cfg).unwrap();

        // rewrite the features at a different width
        let feats = dir.path().join("narrow.csv");
        std::fs::write(&feats, "1.0,2.0\n3.0,4.0\n").unwrap();
        let labels = dir.path().join("narrow_labels.csv");
        std::fs::write(&labels, "l0_c0\nl0_c1\n").unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.encode.features = Some(feats);
        cfg2.encode.labels = Some(labels);
        let err = cmd_encode(&cfg2).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("-dim"), "{err}");
    }

    /// A 4-item database with forced distances, evaluated through real
    /// HIDB files; expected values derived by hand from the HP/AP/nDCG
    /// formulas.
    #[test]
    fn crafted_eval_matches_hand_derived_values() {
        use crate::hierarchy::LabelPath;
        use crate::index::CodeDatabase;
        let dir = TempDir::new().unwrap();

        // query 1111; items at Hamming distances 0, 1, 2, 3, so the
        // ranking is (0, 1, 2, 3) with sims (2, 1, 0, 2) for query (0,0)
        let bits = |s: &[u8]| BinaryCode::from_signs(s.iter().map(|&b| b == 1));
        let mut db = CodeDatabase::new(4, 2);
        db.push(&bits(&[1, 1, 1, 1]), LabelPath::new(vec![0, 0]), 0).unwrap();
        db.push(&bits(&[1, 1, 1, 0]), LabelPath::new(vec![1, 0]), 1).unwrap();
        db.push(&bits(&[1, 1, 0, 0]), LabelPath::new(vec![2, 1]), 2).unwrap();
        db.push(&bits(&[1, 0, 0, 0]), LabelPath::new(vec![0, 0]), 3).unwrap();
        let db_path = dir.path().join("db.hidb");
        db.save(&db_path).unwrap();

        let mut queries = CodeDatabase::new(4, 2);
        queries
            .push(&bits(&[1, 1, 1, 1]), LabelPath::new(vec![0, 0]), 0)
            .unwrap();
        let q_path = dir.path().join("q.hidb");
        queries.save(&q_path).unwrap();

        let mut cfg = RunConfig::default();
        cfg.out = dir.path().to_path_buf();
        cfg.eval.queries = Some(q_path);
        cfg.eval.database = Some(db_path);
        cfg.eval.mahp_k = 4;
        cfg.eval.ndcg_k = 4;
        let report = cmd_eval(&cfg).unwrap().report;

        // relevant at ranks 1 and 4, R = 2: AP = (1 + 2/4) / 2
        assert!((report.map - 0.75).abs() < 1e-12);
        // achieved prefix sums (2,3,3,5) over ideal (2,4,5,5):
        // HP = 1, 3/4, 3/5, 1 -> AHP@4 = 0.8375
        assert!((report.mahp - 0.8375).abs() < 1e-12);
        // DCG = 3 + 1/log2(3) + 0 + 3/log2(5);
        // IDCG = 3 + 3/log2(3) + 1/log2(4)
        let dcg = 3.0 + 1.0 / 3f64.log2() + 3.0 / 5f64.log2();
        let idcg = 3.0 + 3.0 / 3f64.log2() + 0.5;
        assert!((report.ndcg - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn self_eval_of_perfect_codes_is_perfect() {
        use crate::hierarchy::LabelPath;
        use crate::index::CodeDatabase;
        // one unique code per class, members identical -> every ranking
        // puts all same-class items first
        let dir = TempDir::new().unwrap();
        let mut db = CodeDatabase::new(8, 1);
        for item in 0..12u64 {
            let class = (item % 3) as usize;
            let code = BinaryCode::from_signs((0..8).map(|b| (class >> b) & 1 == 1));
            db.push(&code, LabelPath::new(vec![class]), item).unwrap();
        }
        let path = dir.path().join("codes.hidb");
        db.save(&path).unwrap();

        let mut cfg = RunConfig::default();
        cfg.out = dir.path().to_path_buf();
        cfg.eval.queries = Some(path.clone());
        cfg.eval.database = Some(path);
        cfg.eval.mahp_k = 12;
        cfg.eval.ndcg_k = 12;
        cfg.eval.exclude_self = false;
        let summary = cmd_eval(&cfg).unwrap();
        assert_eq!(summary.report.map, 1.0);
    }

    #[test]
    fn eval_rejects_bit_mismatch() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(dir.path());
        cmd_gen_data(&cfg).unwrap();
        cmd_train(&cfg).unwrap();
        cmd_encode(&cfg).unwrap();

        // second database at a different width
        let mut cfg2 = cfg.clone();
        cfg2.encoder.bits = 8;
        cfg2.out = dir.path().join("other");
        cfg2.data.features = Some(dir.path().join("train_features.bin"));
        cfg2.data.labels = Some(dir.path().join("train_labels.csv"));
        cfg2.data.taxonomy = Some(dir.path().join("taxonomy.json"));
        cmd_train(&cfg2).unwrap();
        cmd_encode(&cfg2).unwrap();

        cfg.eval.queries = Some(dir.path().join("other/codes.hidb"));
        cfg.eval.database = Some(dir.path().join("codes.hidb"));
        let err = cmd_eval(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn missing_taxonomy_is_a_config_error() {
        let dir = TempDir::new().unwrap();
        let cfg = base_config(dir.path());
        let err = cmd_train(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn train_determinism_on_disk() {
        let dir = TempDir::new().unwrap();
        let mut cfg = base_config(dir.path());
        cfg.train.max_outer = 4;
        cmd_gen_data(&cfg).unwrap();
        cmd_train(&cfg).unwrap();
        let enc_a = std::fs::read(dir.path().join("encoder.bin")).unwrap();
        let cen_a = std::fs::read(dir.path().join("centers.bin")).unwrap();
        let ckpt_a = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();
        cmd_train(&cfg).unwrap();
        assert_eq!(enc_a, std::fs::read(dir.path().join("encoder.bin")).unwrap());
        assert_eq!(cen_a, std::fs::read(dir.path().join("centers.bin")).unwrap());
        assert_eq!(ckpt_a, std::fs::read(dir.path().join("checkpoint.bin")).unwrap());
    }
}
