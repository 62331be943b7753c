//! Training objectives: CTC, label-smoothed attention cross-entropy, their
//! weighted combination, and the two expansion regularizers (weight
//! constraint towards a snapshot, KL towards a teacher's CTC posteriors).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::model::{Binder, ModelError, BLANK};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("labels need at least {required} frames but only {frames} are available")]
    Unalignable { frames: usize, required: usize },
    #[error("length mismatch: expected {expected} rows, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("label symbol {symbol} is invalid for a vocabulary of {vocab}")]
    BadLabel { symbol: usize, vocab: usize },
    #[error("weight-constraint penalty needs a parameter snapshot")]
    MissingSnapshot,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the CTC term; the attention term gets `1 - lambda`.
    pub lambda: f64,
    pub label_smoothing: f64,
    pub kld_weight: f64,
    pub wca_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            label_smoothing: 0.1,
            kld_weight: 0.5,
            wca_weight: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(LossError::InvalidConfig(format!(
                "lambda {} must lie strictly between 0 and 1",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(LossError::InvalidConfig(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.kld_weight >= 0.0 && self.wca_weight >= 0.0) {
            return Err(LossError::InvalidConfig("regularizer weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Minimum number of frames needed to emit `labels` under CTC: one per
/// symbol plus a separating blank between equal neighbours.
pub fn ctc_required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood of `labels` under per-frame log-probabilities
/// (`frames × vocab`), with its gradient with respect to every entry.
/// Computed by the log-space forward-backward recursion.
pub fn ctc_forward_backward(log_probs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>), LossError> {
    if log_probs.shape().len() != 2 {
        return Err(LossError::ShapeMismatch(log_probs.shape().to_vec(), vec![0, 0]));
    }
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    if let Some(&bad) = labels.iter().find(|&&s| s == BLANK || s >= vocab) {
        return Err(LossError::BadLabel { symbol: bad, vocab });
    }
    let required = ctc_required_frames(labels);
    if frames < required {
        return Err(LossError::Unalignable { frames, required });
    }

    let states = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..states)
        .map(|s| if s % 2 == 0 { BLANK } else { labels[s / 2] })
        .collect();
    let lp = |u: usize, s: usize| log_probs.data()[u * vocab + ext[s]];
    let skip_allowed = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = lp(0, 0);
    if states > 1 {
        alpha[1] = lp(0, 1);
    }
    for u in 1..frames {
        for s in 0..states {
            let prev = &alpha[(u - 1) * states..u * states];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if skip_allowed(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[u * states + s] = if acc == ninf { ninf } else { acc + lp(u, s) };
        }
    }
    let last = (frames - 1) * states;
    let mut log_like = alpha[last + states - 1];
    if states > 1 {
        log_like = lse2(log_like, alpha[last + states - 2]);
    }

    // beta[u][s]: log-probability of finishing from state s at frame u,
    // excluding the emission at frame u.
    let mut beta = vec![ninf; frames * states];
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for u in (0..frames - 1).rev() {
        for s in 0..states {
            let next = (u + 1) * states;
            let mut acc = beta[next + s] + lp(u + 1, s);
            if s + 1 < states {
                acc = lse2(acc, beta[next + s + 1] + lp(u + 1, s + 1));
            }
            if s + 2 < states && skip_allowed(s + 2) {
                acc = lse2(acc, beta[next + s + 2] + lp(u + 1, s + 2));
            }
            beta[u * states + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for u in 0..frames {
        for s in 0..states {
            let occ = alpha[u * states + s] + beta[u * states + s] - log_like;
            if occ > ninf {
                grad[u * vocab + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_like, grad))
}

/// CTC loss node over a `frames × vocab` log-probability node.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var, LossError> {
    let lp = g.tensor(log_probs);
    let (loss, grad) = ctc_forward_backward(&lp, labels)?;
    Ok(g.scalar_fn(log_probs, loss, grad)?)
}

/// Smoothed target distribution: `1 - smoothing` on the target and the rest
/// spread evenly over the other `vocab - 1` symbols.
fn smoothed_targets(targets: &[usize], vocab: usize, smoothing: f64) -> Vec<f64> {
    let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
    let mut q = vec![off; targets.len() * vocab];
    for (row, &t) in targets.iter().enumerate() {
        q[row * vocab + t] = 1.0 - smoothing;
    }
    q
}

/// Mean label-smoothed cross-entropy of decoder logits against `labels ++ [eos]`.
pub fn aed_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    smoothing: f64,
    eos: usize,
) -> Result<Var, LossError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(LossError::ShapeMismatch(shape, vec![labels.len() + 1, 0]));
    }
    let (rows, vocab) = (shape[0], shape[1]);
    if rows != labels.len() + 1 {
        return Err(LossError::LengthMismatch {
            expected: labels.len() + 1,
            got: rows,
        });
    }
    let mut targets = labels.to_vec();
    targets.push(eos);
    if let Some(&bad) = targets.iter().find(|&&s| s >= vocab) {
        return Err(LossError::BadLabel { symbol: bad, vocab });
    }
    let q = g.constant(vec![rows, vocab], smoothed_targets(&targets, vocab, smoothing))?;
    let lsm = g.log_softmax(logits);
    let weighted = g.mul(lsm, q)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// `lambda * ctc + (1 - lambda) * aed`.
pub fn hybrid_value(ctc: f64, aed: f64, lambda: f64) -> f64 {
    lambda * ctc + (1.0 - lambda) * aed
}

pub fn hybrid_loss(g: &mut Graph, ctc: Var, aed: Var, lambda: f64) -> Result<Var, LossError> {
    let a = g.scale(ctc, lambda);
    let b = g.scale(aed, 1.0 - lambda);
    Ok(g.add(a, b)?)
}

/// `(weight / 2) * sum over unfrozen parameters of ||theta - theta0||^2`.
/// Returns `None` when every parameter is frozen.
pub fn wca_penalty(g: &mut Graph, params: &mut Binder<'_>, weight: f64) -> Result<Option<Var>, LossError> {
    let registry = params.registry();
    let snapshot = registry.snapshot().ok_or(LossError::MissingSnapshot)?;
    let mut total: Option<Var> = None;
    for (idx, anchor) in snapshot.iter().enumerate() {
        if registry.is_frozen(idx) {
            continue;
        }
        let theta = params.get_index(g, idx)?;
        let neg: Vec<f64> = anchor.data().iter().map(|v| -v).collect();
        let neg = g.constant(anchor.shape().to_vec(), neg)?;
        let diff = g.add(theta, neg)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| g.scale(t, weight / 2.0)))
}

/// `weight * mean over frames of KL(teacher || student)`, both given as
/// log-probabilities of the same shape. The teacher is a constant.
pub fn kld_penalty(
    g: &mut Graph,
    student_log_probs: Var,
    teacher_log_probs: &Tensor,
    weight: f64,
) -> Result<Var, LossError> {
    let shape = g.shape(student_log_probs).to_vec();
    if shape != teacher_log_probs.shape() {
        return Err(LossError::ShapeMismatch(shape, teacher_log_probs.shape().to_vec()));
    }
    let frames = teacher_log_probs.rows() as f64;
    let probs: Vec<f64> = teacher_log_probs.data().iter().map(|v| v.exp()).collect();
    let entropy_term: f64 = probs
        .iter()
        .zip(teacher_log_probs.data())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum();
    let p = g.constant(shape, probs)?;
    let cross = g.mul(student_log_probs, p)?;
    let cross = g.sum(cross);
    let cross = g.scale(cross, -weight / frames);
    let c = g.constant(vec![1], vec![weight * entropy_term / frames])?;
    Ok(g.add(cross, c)?)
}
