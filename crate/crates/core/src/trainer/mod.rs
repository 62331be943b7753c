//! Training engine: optimizers, the Noam schedule, per-epoch train/support
//! splits, the first-order MAML inner/outer updates, and the method dispatch
//! for fine-tuning baselines.

mod objective;
mod optim;
mod run;

pub use objective::{AsrObjective, Objective};
pub use optim::{Adam, Optimizer, Sgd};
pub use run::{inner_update, outer_update, train, train_objective, write_step_log, StepRecord, TrainOutcome};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::losses::LossError;
use crate::model::{FreezePolicy, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("learning-rate step must be >= 1")]
    InvalidStep,
    #[error("cannot split an id set of size {0}")]
    TooFewIds(usize),
    #[error("no training data")]
    EmptyData,
    #[error("non-finite {phase} loss at iteration {iteration}")]
    NonFinite { iteration: usize, phase: &'static str },
    #[error("method {0} needs a parameter snapshot; take one before training")]
    MissingSnapshot(Method),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    FT,
    WCA,
    KLD,
    FMP,
    MAML,
    #[serde(rename = "MAML_FMP")]
    MamlFmp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FT,
        Method::WCA,
        Method::KLD,
        Method::FMP,
        Method::MAML,
        Method::MamlFmp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::FT => "FT",
            Method::WCA => "WCA",
            Method::KLD => "KLD",
            Method::FMP => "FMP",
            Method::MAML => "MAML",
            Method::MamlFmp => "MAML_FMP",
        }
    }

    pub fn is_maml(self) -> bool {
        matches!(self, Method::MAML | Method::MamlFmp)
    }

    pub fn freezes(self) -> bool {
        matches!(self, Method::FMP | Method::MamlFmp)
    }

    pub fn needs_snapshot(self) -> bool {
        matches!(self, Method::WCA | Method::KLD)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("MAML+FMP") && *m == Method::MamlFmp))
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Noam,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub method: Method,
    /// Inner (train split) learning rate; held constant.
    pub alpha: f64,
    /// Outer (support split) learning-rate scale; multiplied by the schedule.
    pub beta: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub warmup_steps: usize,
    pub support_fraction: f64,
    pub rng_seed: u64,
    /// Baseline learning-rate scale; multiplied by the schedule.
    pub lr_scale: f64,
    pub clip_norm: f64,
    pub schedule: Schedule,
    /// Optimizer for the non-MAML methods. MAML phases are always plain SGD.
    pub optimizer: OptimizerKind,
    /// Overrides the default freeze policy for FMP and MAML_FMP.
    pub freeze_policy: Option<FreezePolicy>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::FT,
            alpha: 0.05,
            beta: 10.0,
            inner_steps: 1,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            warmup_steps: 400,
            support_fraction: 0.5,
            rng_seed: 0,
            lr_scale: 1.0,
            clip_norm: 5.0,
            schedule: Schedule::Noam,
            optimizer: OptimizerKind::Adam,
            freeze_policy: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be >= 1".into());
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be >= 1".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lr_scale >= 0.0) {
            return bad("learning rates must be finite and >= 0".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0".into());
        }
        if self.method.is_maml() && !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return bad(format!(
                "support_fraction {} must lie strictly between 0 and 1",
                self.support_fraction
            ));
        }
        Ok(())
    }

    /// Schedule factor at `step` (1-based).
    pub fn schedule_factor(&self, step: usize, model_dim: usize) -> Result<f64, TrainError> {
        match self.schedule {
            Schedule::Noam => noam_lr(step, model_dim, self.warmup_steps),
            Schedule::Constant if step == 0 => Err(TrainError::InvalidStep),
            Schedule::Constant => Ok(1.0),
        }
    }
}

/// `model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: usize, model_dim: usize, warmup: usize) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::InvalidStep);
    }
    let s = step as f64;
    let rise = s * (warmup as f64).powf(-1.5);
    Ok((model_dim as f64).powf(-0.5) * s.powf(-0.5).min(rise))
}

/// One epoch's partition of the training ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochSplit {
    pub epoch_index: usize,
    pub train_ids: BTreeSet<String>,
    pub support_ids: BTreeSet<String>,
    /// Ids in shuffled order, for batching.
    pub train_order: Vec<String>,
    pub support_order: Vec<String>,
}

pub(crate) fn epoch_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffles `ids` with a stream keyed by `(rng_seed, epoch_index)` and cuts
/// the first `round(n * support_fraction)` (at least one, at most `n - 1`)
/// into the support set.
pub fn split_epoch(
    ids: &[String],
    support_fraction: f64,
    epoch_index: usize,
    rng_seed: u64,
) -> Result<EpochSplit, TrainError> {
    if ids.len() < 2 {
        return Err(TrainError::TooFewIds(ids.len()));
    }
    if !(support_fraction > 0.0 && support_fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "support_fraction {support_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut epoch_rng(rng_seed, epoch_index, 0x5_9117));
    let n_sup = ((ids.len() as f64 * support_fraction).round() as usize).clamp(1, ids.len() - 1);
    let train_order = order.split_off(n_sup);
    let support_order = order;
    Ok(EpochSplit {
        epoch_index,
        train_ids: train_order.iter().cloned().collect(),
        support_ids: support_order.iter().cloned().collect(),
        train_order,
        support_order,
    })
}
