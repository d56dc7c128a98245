//! Training loop: alternating center estimation and SGD on the encoder.
//!
//! One outer iteration is a full forward pass over the training set, a
//! fine-center update plus upward propagation, a full-set loss measurement,
//! and then N mini-batch SGD-with-momentum steps against the frozen
//! centers. Iterations repeat until the measured mean loss stops moving or
//! the budget runs out.
//!
//! Training runs in two stages. Stage one uses the configured penalty
//! weight as-is; stage two multiplies it, pressing embedding coordinates
//! toward the box boundary so the final sign quantization loses less. The
//! stage-two budget is a configured fraction of the total outer budget.
//!
//! Everything is single-threaded and seeded: two runs with the same config
//! and seed produce bit-identical parameter trajectories. A checkpoint is
//! emitted after every outer iteration and a run can resume from it,
//! continuing the exact trajectory of an uninterrupted run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio;
use crate::centers::{CenterError, CenterSet};
use crate::dataio::Dataset;
use crate::encoder::{EncoderError, EncoderState, ParamGrads};
use crate::hierarchy::HierarchyError;
use crate::loss::{batch_loss, hierarchy_loss, LossConfig, LossError};

const CKPT_MAGIC: &[u8; 4] = b"HICK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at outer iteration {outer} (non-finite loss)")]
    Diverged { outer: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Centers(#[from] CenterError),
    #[error("checkpoint file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySchedule {
    /// Geometric interpolation from `lr_start` to `lr_end`.
    Geometric,
    /// `lr_start` for the first half of the outer budget, `lr_end` after.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// SGD steps per outer iteration; `None` means one epoch's worth.
    pub inner_iters: Option<usize>,
    pub max_outer: usize,
    /// Relative full-set mean-loss change below which a stage stops.
    pub convergence_tol: f64,
    pub stage2_eta1_multiplier: f64,
    /// Fraction of `max_outer` reserved for stage two.
    pub stage2_fraction: f64,
    pub lr_schedule: DecaySchedule,
    pub seed: u64,
    /// Stop (with a checkpoint) once this many outer iterations have
    /// completed; for budgeted runs that resume later.
    pub halt_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-4,
            lr_end: 1e-5,
            momentum: 0.9,
            batch_size: 64,
            inner_iters: None,
            max_outer: 30,
            convergence_tol: 1e-4,
            stage2_eta1_multiplier: 10.0,
            stage2_fraction: 0.25,
            lr_schedule: DecaySchedule::Geometric,
            seed: 42,
            halt_after: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.stage2_eta1_multiplier >= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "stage2_eta1_multiplier must be >= 1, got {}",
                self.stage2_eta1_multiplier
            )));
        }
        if !(0.0..=1.0).contains(&self.stage2_fraction) {
            return Err(TrainError::BadConfig(format!(
                "stage2_fraction must lie in [0, 1], got {}",
                self.stage2_fraction
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(TrainError::BadConfig("convergence_tol must be >= 0".into()));
        }
        Ok(())
    }

    fn stage2_iters(&self) -> usize {
        ((self.stage2_fraction * self.max_outer as f64).ceil() as usize).min(self.max_outer)
    }

    fn stage1_iters(&self) -> usize {
        self.max_outer - self.stage2_iters()
    }
}

/// Learning rate for a given outer iteration.
pub fn lr_schedule(cfg: &TrainConfig, outer_iter: usize, max_outer: usize) -> f64 {
    if max_outer == 0 {
        return cfg.lr_start;
    }
    let t = outer_iter.min(max_outer) as f64 / max_outer as f64;
    match cfg.lr_schedule {
        DecaySchedule::Geometric => cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t),
        DecaySchedule::Step => {
            if t < 0.5 {
                cfg.lr_start
            } else {
                cfg.lr_end
            }
        }
    }
}

/// Classical heavy-ball momentum: v <- momentum*v - lr*g; theta <- theta + v.
pub fn sgd_step(
    state: &mut EncoderState,
    velocity: &mut ParamGrads,
    grads: &ParamGrads,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if velocity.weights.len() != grads.weights.len()
        || velocity.weights.len() != state.weights().len()
    {
        return Err(TrainError::ShapeMismatch(format!(
            "layer counts: state {}, velocity {}, grads {}",
            state.weights().len(),
            velocity.weights.len(),
            grads.weights.len()
        )));
    }
    for (m, (vw, gw)) in velocity.weights.iter_mut().zip(&grads.weights).enumerate() {
        if vw.dim() != gw.dim() || vw.dim() != state.weights()[m].dim() {
            return Err(TrainError::ShapeMismatch(format!(
                "weight shapes at layer {m}: state {:?}, velocity {:?}, grads {:?}",
                state.weights()[m].dim(),
                vw.dim(),
                gw.dim()
            )));
        }
        *vw *= momentum;
        vw.scaled_add(-lr, gw);
    }
    for (vb, gb) in velocity.biases.iter_mut().zip(&grads.biases) {
        if vb.len() != gb.len() {
            return Err(TrainError::ShapeMismatch("bias shapes".into()));
        }
        *vb *= momentum;
        vb.scaled_add(-lr, gb);
    }
    state.apply_update(velocity);
    Ok(())
}

/// One log line per outer iteration. `mean_penalty` is the raw hinge mass
/// (unweighted); `mean_loss` folds in the stage's penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub outer: usize,
    pub stage: u8,
    pub mean_loss: f64,
    pub mean_level_ce: Vec<f64>,
    pub mean_penalty: f64,
    /// Mean over coordinates of | |r_j| - alpha |: how far magnitudes sit
    /// from the box boundary, a proxy for quantization error.
    pub mean_box_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub center_drift: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

/// Full training state at an outer-iteration boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub outer_done: usize,
    pub stage: u8,
    pub stage_iter: usize,
    pub prev_loss: Option<f64>,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub encoder: EncoderState,
    pub velocity: ParamGrads,
    pub centers: CenterSet,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    outer_done: usize,
    stage: u8,
    stage_iter: usize,
    prev_loss: Option<f64>,
    seed: u64,
    rng_word_pos: u128,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TrainError> {
        w.write_all(CKPT_MAGIC)?;
        binio::write_u32(w, CKPT_VERSION)?;
        let header = CheckpointHeader {
            outer_done: self.outer_done,
            stage: self.stage,
            stage_iter: self.stage_iter,
            prev_loss: self.prev_loss,
            seed: self.seed,
            rng_word_pos: self.rng_word_pos,
        };
        let json = serde_json::to_string(&header).expect("header serializes");
        binio::write_u64(w, json.len() as u64)?;
        w.write_all(json.as_bytes())?;
        let mut enc_bytes = Vec::new();
        self.encoder.write_to(&mut enc_bytes)?;
        binio::write_u64(w, enc_bytes.len() as u64)?;
        w.write_all(&enc_bytes)?;
        for (vw, vb) in self.velocity.weights.iter().zip(&self.velocity.biases) {
            for &v in vw.iter() {
                binio::write_f64(w, v)?;
            }
            for &v in vb.iter() {
                binio::write_f64(w, v)?;
            }
        }
        let centers_bytes = self.centers.to_bytes();
        binio::write_u64(w, centers_bytes.len() as u64)?;
        w.write_all(&centers_bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, TrainError> {
        let magic = binio::read_magic(r)?;
        if &magic != CKPT_MAGIC {
            return Err(TrainError::Format(format!(
                "bad magic {magic:?}, expected {CKPT_MAGIC:?}"
            )));
        }
        let version = binio::read_u32(r)?;
        if version != CKPT_VERSION {
            return Err(TrainError::Format(format!("unsupported version {version}")));
        }
        let header_len = binio::read_u64(r)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| TrainError::Format(e.to_string()))?;
        let enc_len = binio::read_u64(r)? as usize;
        let mut enc_bytes = vec![0u8; enc_len];
        r.read_exact(&mut enc_bytes)?;
        let encoder = EncoderState::read_from(&mut enc_bytes.as_slice())?;
        let mut velocity = ParamGrads::zeros_like(&encoder);
        for m in 0..velocity.weights.len() {
            for v in velocity.weights[m].iter_mut() {
                *v = binio::read_f64(r)?;
            }
            for v in velocity.biases[m].iter_mut() {
                *v = binio::read_f64(r)?;
            }
        }
        let centers_len = binio::read_u64(r)? as usize;
        let mut centers_bytes = vec![0u8; centers_len];
        r.read_exact(&mut centers_bytes)?;
        let centers = CenterSet::from_bytes(&centers_bytes)?;
        Ok(Checkpoint {
            outer_done: header.outer_done,
            stage: header.stage,
            stage_iter: header.stage_iter,
            prev_loss: header.prev_loss,
            seed: header.seed,
            rng_word_pos: header.rng_word_pos,
            encoder,
            velocity,
            centers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// Observer for streaming logs and checkpoints out of a run.
pub trait TrainHook {
    fn on_record(&mut self, _record: &TrainRecord) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Hook that does nothing.
pub struct NoHook;
impl TrainHook for NoHook {}

#[derive(Debug)]
pub struct TrainOutcome {
    pub encoder: EncoderState,
    pub centers: CenterSet,
    pub log: TrainLog,
    /// True when a stage stopped on the loss-change criterion rather than
    /// its budget.
    pub converged: bool,
    /// True when the run stopped early via `halt_after`.
    pub halted: bool,
}

/// Full-set means measured in one pass: per-level cross-entropy, raw
/// penalty, and the box-gap proxy.
struct Measurement {
    level_ce: Vec<f64>,
    penalty: f64,
    box_gap: f64,
}

fn measure(
    embeddings: &Array2<f64>,
    dataset: &Dataset,
    centers: &CenterSet,
    loss_cfg: &LossConfig,
) -> Result<Measurement, TrainError> {
    let n = embeddings.nrows();
    let mut level_ce = vec![0.0; loss_cfg.levels()];
    let mut penalty = 0.0;
    let mut box_gap = 0.0;
    for (r, path) in embeddings.outer_iter().zip(&dataset.paths) {
        let report = hierarchy_loss(r, path, centers, loss_cfg)?;
        for (acc, v) in level_ce.iter_mut().zip(&report.level_ce) {
            *acc += v;
        }
        penalty += report.penalty;
        box_gap += r.iter().map(|&v| (v.abs() - loss_cfg.alpha).abs()).sum::<f64>()
            / r.len() as f64;
    }
    let scale = 1.0 / n as f64;
    for v in &mut level_ce {
        *v *= scale;
    }
    Ok(Measurement {
        level_ce,
        penalty: penalty * scale,
        box_gap: box_gap * scale,
    })
}

fn relative_change(now: f64, before: f64) -> f64 {
    (now - before).abs() / before.abs().max(1e-12)
}

/// Runs the full training loop. `resume` continues a prior run from its
/// checkpoint; the config (notably the seed) must match the original run.
pub fn train(
    dataset: &Dataset,
    encoder_init: EncoderState,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    hook: &mut dyn TrainHook,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let tax = &dataset.taxonomy;
    tax.validate()?;
    if loss_cfg.sigma2 != tax.sigma2() {
        return Err(TrainError::BadConfig(
            "loss sigma2 differs from the taxonomy schedule".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(TrainError::BadConfig("dataset is empty".into()));
    }
    if encoder_init.input_dim() != dataset.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "encoder expects {}-dim inputs, dataset has {}",
            encoder_init.input_dim(),
            dataset.dim()
        )));
    }

    let n = dataset.len();
    let inner_iters = cfg.inner_iters.unwrap_or_else(|| n.div_ceil(cfg.batch_size));
    let stage1_iters = cfg.stage1_iters();
    let stage2_iters = cfg.stage2_iters();
    let eta_for = |stage: u8| -> f64 {
        match stage {
            1 => loss_cfg.eta1,
            _ => loss_cfg.eta1 * cfg.stage2_eta1_multiplier,
        }
    };

    let (mut state, mut velocity, mut centers, mut rng, mut outer_done, mut stage, mut stage_iter, mut prev_loss, mut have_prev_centers);
    match resume {
        Some(ckpt) => {
            if ckpt.seed != cfg.seed {
                return Err(TrainError::BadConfig(format!(
                    "checkpoint seed {} does not match config seed {}",
                    ckpt.seed, cfg.seed
                )));
            }
            let mut restored = ChaCha8Rng::seed_from_u64(ckpt.seed);
            restored.set_word_pos(ckpt.rng_word_pos);
            rng = restored;
            state = ckpt.encoder;
            velocity = ckpt.velocity;
            centers = ckpt.centers;
            outer_done = ckpt.outer_done;
            stage = ckpt.stage;
            stage_iter = ckpt.stage_iter;
            prev_loss = ckpt.prev_loss;
            have_prev_centers = true;
        }
        None => {
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            velocity = ParamGrads::zeros_like(&encoder_init);
            state = encoder_init;
            centers = CenterSet::new(tax, state.output_dim());
            outer_done = 0;
            stage = 1;
            stage_iter = 0;
            prev_loss = None;
            have_prev_centers = false;
        }
    }

    let started = Instant::now();
    let mut log = TrainLog::default();
    let mut converged = false;
    let mut halted = false;

    loop {
        // full-pass embeddings, then fine centers and upward propagation
        let embeddings = state.forward_batch(dataset.features.view())?;
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged { outer: outer_done });
        }
        let previous_centers = have_prev_centers.then(|| centers.clone());
        centers.update_fine_centers(embeddings.view(), &dataset.paths)?;
        centers.propagate_upper_centers(tax)?;
        let drift = previous_centers.map(|prev| centers.max_drift(&prev));
        have_prev_centers = true;

        let parts = measure(&embeddings, dataset, &centers, loss_cfg)?;
        let ce_total: f64 = parts.level_ce.iter().sum();
        let mut loss_now = ce_total + eta_for(stage) * parts.penalty;
        if !loss_now.is_finite() {
            return Err(TrainError::Diverged { outer: outer_done });
        }

        // Stage bookkeeping: stop on budget or converged loss; stage one
        // hands over to stage two, stage two ends the run.
        let mut finished = false;
        loop {
            let budget = if stage == 1 { stage1_iters } else { stage2_iters };
            let stage_converged =
                prev_loss.is_some_and(|p| relative_change(loss_now, p) < cfg.convergence_tol);
            if stage_iter >= budget || stage_converged {
                if stage == 1 && stage2_iters > 0 {
                    stage = 2;
                    stage_iter = 0;
                    prev_loss = None;
                    loss_now = ce_total + eta_for(2) * parts.penalty;
                    continue;
                }
                converged = stage_converged;
                finished = true;
            }
            break;
        }

        let record = TrainRecord {
            outer: outer_done,
            stage,
            mean_loss: loss_now,
            mean_level_ce: parts.level_ce,
            mean_penalty: parts.penalty,
            mean_box_gap: parts.box_gap,
            center_drift: drift,
            lr: lr_schedule(cfg, outer_done, cfg.max_outer),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        hook.on_record(&record)?;
        log.records.push(record);
        if finished {
            break;
        }

        // N SGD iterations against frozen centers
        let live_cfg = loss_cfg.clone().with_eta1(eta_for(stage));
        let lr = lr_schedule(cfg, outer_done, cfg.max_outer);
        let frozen = centers.checksum();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0usize;
        for _ in 0..inner_iters {
            if cursor >= n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(n);
            let batch_idx = &order[cursor..end];
            cursor = end;
            let xb = Array2::from_shape_fn((batch_idx.len(), dataset.dim()), |(i, j)| {
                dataset.features[[batch_idx[i], j]]
            });
            let pb: Vec<_> = batch_idx.iter().map(|&i| dataset.paths[i].clone()).collect();
            let rb = state.forward_batch(xb.view())?;
            let batch = batch_loss(rb.view(), &pb, &centers, &live_cfg)?;
            if !batch.report.total.is_finite() {
                return Err(TrainError::Diverged { outer: outer_done });
            }
            let (grads, _) = state.backward_batch(xb.view(), batch.grads.view())?;
            sgd_step(&mut state, &mut velocity, &grads, lr, cfg.momentum)?;
        }
        assert_eq!(
            centers.checksum(),
            frozen,
            "centers mutated during an inner SGD run"
        );

        outer_done += 1;
        stage_iter += 1;
        prev_loss = Some(loss_now);

        let checkpoint = Checkpoint {
            outer_done,
            stage,
            stage_iter,
            prev_loss,
            seed: cfg.seed,
            rng_word_pos: rng.get_word_pos(),
            encoder: state.clone(),
            velocity: velocity.clone(),
            centers: centers.clone(),
        };
        hook.on_checkpoint(&checkpoint)?;

        if cfg.halt_after.is_some_and(|m| outer_done >= m) {
            halted = true;
            break;
        }
    }

    Ok(TrainOutcome {
        encoder: state,
        centers,
        log,
        converged,
        halted,
    })
}
