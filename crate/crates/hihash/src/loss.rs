//! Multi-level Gaussian class-center loss.
//!
//! Per sample the loss is a sum over hierarchy levels of a softmax
//! cross-entropy whose logits are negative center distances scaled by the
//! level variance, plus a hinge penalty that keeps embedding coordinates
//! inside the [-alpha, alpha] box:
//!
//! ```text
//! total = sum_k -log( exp(-d(r, mu_{k,y_k}) / (2 sigma2_k))
//!                     / sum_i exp(-d(r, mu_{k,i}) / (2 sigma2_k)) )
//!         + eta1 * sum_j ( max(0, -alpha - r_j) + max(0, r_j - alpha) )
//! ```
//!
//! The distance is squared Euclidean by default (the Gaussian log-density
//! form, smooth everywhere); plain Euclidean is available for comparison.
//! All softmaxes go through max-logit subtraction and the cross-entropy is
//! evaluated as log-sum-exp minus the true logit, never via division.
//! Centers are constants here: gradients flow only into the embedding.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centers::CenterSet;
use crate::hierarchy::LabelPath;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no centers at level {0}")]
    EmptyCenters(usize),
    #[error("sigma2 = {0} is not positive")]
    NonPositiveSigma(f64),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("bad loss config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceForm {
    /// Squared Euclidean distance (default).
    Squared,
    /// Plain Euclidean norm.
    Euclidean,
}

impl DistanceForm {
    fn eval(self, r: ArrayView1<'_, f64>, center: ArrayView1<'_, f64>) -> f64 {
        let sq: f64 = r
            .iter()
            .zip(center.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        match self {
            DistanceForm::Squared => sq,
            DistanceForm::Euclidean => sq.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Box half-width; embeddings are pushed into [-alpha, alpha].
    pub alpha: f64,
    /// Penalty weight on the box hinge.
    pub eta1: f64,
    /// Per-level variances, strictly increasing with level.
    pub sigma2: Vec<f64>,
    pub distance: DistanceForm,
}

impl LossConfig {
    pub fn new(alpha: f64, eta1: f64, sigma2: Vec<f64>) -> Result<Self, LossError> {
        let cfg = LossConfig {
            alpha,
            eta1,
            sigma2,
            distance: DistanceForm::Squared,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_distance(mut self, distance: DistanceForm) -> Self {
        self.distance = distance;
        self
    }

    /// Same config with the penalty weight scaled; used by the second
    /// training stage.
    pub fn with_eta1(mut self, eta1: f64) -> Self {
        self.eta1 = eta1;
        self
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 1.0) {
            return Err(LossError::BadConfig(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if !(self.eta1 >= 0.0) {
            return Err(LossError::BadConfig(format!(
                "eta1 must be nonnegative, got {}",
                self.eta1
            )));
        }
        if self.sigma2.is_empty() {
            return Err(LossError::BadConfig("sigma2 is empty".into()));
        }
        for &s in &self.sigma2 {
            if !(s > 0.0) {
                return Err(LossError::NonPositiveSigma(s));
            }
        }
        for w in self.sigma2.windows(2) {
            if w[0] >= w[1] {
                return Err(LossError::BadConfig(format!(
                    "sigma2 must increase strictly with level: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.sigma2.len()
    }
}

/// Loss value with its additive parts. `total` always equals
/// `sum(level_ce) + eta1 * penalty`; `penalty` is the raw (unweighted)
/// hinge mass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub level_ce: Vec<f64>,
    pub penalty: f64,
    pub posteriors: Vec<Vec<f64>>,
}

/// Softmax class posterior at one level: p_i proportional to
/// exp(-d(r, mu_i) / (2 sigma2)).
pub fn level_posterior(
    r: ArrayView1<'_, f64>,
    centers_k: ArrayView2<'_, f64>,
    sigma2_k: f64,
    distance: DistanceForm,
) -> Result<Vec<f64>, LossError> {
    let (probs, _, _) = level_softmax(r, centers_k, sigma2_k, distance, None)?;
    Ok(probs)
}

/// Shared softmax core. When `true_class` is given, also returns the
/// cross-entropy for that class (log-sum-exp minus its logit).
fn level_softmax(
    r: ArrayView1<'_, f64>,
    centers_k: ArrayView2<'_, f64>,
    sigma2_k: f64,
    distance: DistanceForm,
    true_class: Option<usize>,
) -> Result<(Vec<f64>, f64, Vec<f64>), LossError> {
    if centers_k.nrows() == 0 {
        return Err(LossError::EmptyCenters(0));
    }
    if !(sigma2_k > 0.0) {
        return Err(LossError::NonPositiveSigma(sigma2_k));
    }
    if centers_k.ncols() != r.len() {
        return Err(LossError::DimensionMismatch {
            what: "center width",
            expected: r.len(),
            got: centers_k.ncols(),
        });
    }
    let logits: Vec<f64> = centers_k
        .outer_iter()
        .map(|mu| -distance.eval(r, mu) / (2.0 * sigma2_k))
        .collect();
    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = logits.iter().map(|&l| (l - max_logit).exp()).sum();
    let probs: Vec<f64> = logits
        .iter()
        .map(|&l| (l - max_logit).exp() / exp_sum)
        .collect();
    let ce = match true_class {
        Some(y) => {
            // lse - logit_y, clamped against tiny negative round-off
            (max_logit + exp_sum.ln() - logits[y]).max(0.0)
        }
        None => 0.0,
    };
    Ok((probs, ce, logits))
}

/// Raw hinge mass of box violations: sum_j max(0, -a - r_j) + max(0, r_j - a).
pub fn box_penalty(r: ArrayView1<'_, f64>, alpha: f64) -> f64 {
    r.iter()
        .map(|&v| (-alpha - v).max(0.0) + (v - alpha).max(0.0))
        .sum()
}

fn check_path(path: &LabelPath, centers: &CenterSet, cfg: &LossConfig) -> Result<(), LossError> {
    let levels = centers.level_count();
    if path.levels() != levels {
        return Err(LossError::InvalidPath(format!(
            "path has {} levels, centers have {levels}",
            path.levels()
        )));
    }
    if cfg.sigma2.len() != levels {
        return Err(LossError::BadConfig(format!(
            "config has {} sigma2 entries, centers have {levels} levels",
            cfg.sigma2.len()
        )));
    }
    for k in 0..levels {
        if path.class_at(k) >= centers.level(k).nrows() {
            return Err(LossError::InvalidPath(format!(
                "class {} out of range at level {k}",
                path.class_at(k)
            )));
        }
    }
    Ok(())
}

/// Full per-sample loss across all hierarchy levels.
pub fn hierarchy_loss(
    r: ArrayView1<'_, f64>,
    path: &LabelPath,
    centers: &CenterSet,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    check_path(path, centers, cfg)?;
    let mut level_ce = Vec::with_capacity(centers.level_count());
    let mut posteriors = Vec::with_capacity(centers.level_count());
    for k in 0..centers.level_count() {
        let (probs, ce, _) = level_softmax(
            r,
            centers.level(k),
            cfg.sigma2[k],
            cfg.distance,
            Some(path.class_at(k)),
        )
        .map_err(|e| match e {
            LossError::EmptyCenters(_) => LossError::EmptyCenters(k),
            other => other,
        })?;
        level_ce.push(ce);
        posteriors.push(probs);
    }
    let penalty = box_penalty(r, cfg.alpha);
    let total = level_ce.iter().sum::<f64>() + cfg.eta1 * penalty;
    Ok(LossReport {
        total,
        level_ce,
        penalty,
        posteriors,
    })
}

/// Exact gradient of [`hierarchy_loss`]'s total with respect to the
/// embedding. Centers are constants. At hinge kinks (|r_j| == alpha) the
/// zero subgradient is taken.
pub fn hierarchy_loss_grad(
    r: ArrayView1<'_, f64>,
    path: &LabelPath,
    centers: &CenterSet,
    cfg: &LossConfig,
) -> Result<Array1<f64>, LossError> {
    check_path(path, centers, cfg)?;
    let mut grad = Array1::<f64>::zeros(r.len());
    for k in 0..centers.level_count() {
        let level = centers.level(k);
        let y = path.class_at(k);
        let (probs, _, _) = level_softmax(r, level, cfg.sigma2[k], cfg.distance, None)
            .map_err(|e| match e {
                LossError::EmptyCenters(_) => LossError::EmptyCenters(k),
                other => other,
            })?;
        match cfg.distance {
            DistanceForm::Squared => {
                // d logit_i / dr = -(r - mu_i) / sigma2
                // d ce / dr = (1/sigma2) (sum_i p_i mu_i - mu_y)
                let mut expected = Array1::<f64>::zeros(r.len());
                for (i, mu) in level.outer_iter().enumerate() {
                    expected.scaled_add(probs[i], &mu);
                }
                expected -= &level.row(y);
                grad.scaled_add(1.0 / cfg.sigma2[k], &expected);
            }
            DistanceForm::Euclidean => {
                // d logit_i / dr = -u_i / (2 sigma2), u_i the unit vector
                // from mu_i to r (zero subgradient when r == mu_i)
                let unit = |mu: ArrayView1<'_, f64>| -> Array1<f64> {
                    let diff = &r - &mu;
                    let norm = diff.mapv(|v| v * v).sum().sqrt();
                    if norm > 0.0 {
                        diff / norm
                    } else {
                        Array1::zeros(r.len())
                    }
                };
                let mut term = unit(level.row(y));
                for (i, mu) in level.outer_iter().enumerate() {
                    term.scaled_add(-probs[i], &unit(mu));
                }
                grad.scaled_add(1.0 / (2.0 * cfg.sigma2[k]), &term);
            }
        }
    }
    for (g, &v) in grad.iter_mut().zip(r.iter()) {
        if v > cfg.alpha {
            *g += cfg.eta1;
        } else if v < -cfg.alpha {
            *g -= cfg.eta1;
        }
    }
    Ok(grad)
}

/// Batch-mean loss and the gradients of that mean.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// All scalar parts and the posteriors are means over the batch.
    pub report: LossReport,
    /// Row n is d(mean loss)/d(r_n), i.e. the per-sample gradient scaled by
    /// 1/batch_size.
    pub grads: Array2<f64>,
}

pub fn batch_loss(
    rs: ArrayView2<'_, f64>,
    paths: &[LabelPath],
    centers: &CenterSet,
    cfg: &LossConfig,
) -> Result<BatchLoss, LossError> {
    let n = rs.nrows();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if paths.len() != n {
        return Err(LossError::DimensionMismatch {
            what: "paths vs embeddings",
            expected: n,
            got: paths.len(),
        });
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut level_ce = vec![0.0; cfg.levels()];
    let mut penalty = 0.0;
    let mut posteriors: Vec<Vec<f64>> = (0..centers.level_count())
        .map(|k| vec![0.0; centers.level(k).nrows()])
        .collect();
    let mut grads = Array2::<f64>::zeros((n, rs.ncols()));
    for (i, (r, path)) in rs.outer_iter().zip(paths).enumerate() {
        let report = hierarchy_loss(r, path, centers, cfg)?;
        total += report.total;
        for (acc, v) in level_ce.iter_mut().zip(&report.level_ce) {
            *acc += v;
        }
        penalty += report.penalty;
        for (acc, probs) in posteriors.iter_mut().zip(&report.posteriors) {
            for (a, p) in acc.iter_mut().zip(probs) {
                *a += p;
            }
        }
        let g = hierarchy_loss_grad(r, path, centers, cfg)?;
        grads.row_mut(i).assign(&(g * scale));
    }
    total *= scale;
    for v in &mut level_ce {
        *v *= scale;
    }
    penalty *= scale;
    for probs in &mut posteriors {
        for p in probs.iter_mut() {
            *p *= scale;
        }
    }
    Ok(BatchLoss {
        report: LossReport {
            total,
            level_ce,
            penalty,
            posteriors,
        },
        grads,
    })
}
