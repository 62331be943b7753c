use std::collections::{BTreeSet, HashMap};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    epoch_rng, split_epoch, Adam, AsrObjective, Method, Objective, Optimizer, OptimizerKind, Sgd, TrainError,
    TrainerConfig,
};
use crate::losses::LossConfig;
use crate::model::{apply_freeze_policy, AsrModel, FreezePolicy, ParameterRegistry};
use crate::synth::Utterance;

/// One optimizer step. For MAML methods `train_loss` is the inner-phase loss
/// and `support_loss` the outer-phase loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub method: Method,
    pub train_loss: f64,
    pub support_loss: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
    pub trainable_param_count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub frozen: BTreeSet<String>,
}

impl TrainOutcome {
    /// Median wall time per step, in milliseconds.
    pub fn median_step_ms(&self) -> Option<f64> {
        let mut ms: Vec<f64> = self.records.iter().map(|r| r.wall_ms).collect();
        if ms.is_empty() {
            return None;
        }
        ms.sort_by(f64::total_cmp);
        Some(ms[ms.len() / 2])
    }

    pub fn total_wall_s(&self) -> f64 {
        self.records.iter().map(|r| r.wall_ms).sum::<f64>() / 1000.0
    }
}

/// Writes one JSON object per line.
pub fn write_step_log(records: &[StepRecord], path: &Path) -> Result<(), TrainError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn step_seed(base: u64, step: usize, phase: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((step as u64) << 4 | phase)
}

fn checked(loss: f64, iteration: usize, phase: &'static str) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::NonFinite { iteration, phase })
    }
}

/// `theta' = theta - alpha * grad`, repeated `inner_steps` times over
/// `batches` in turn. `theta` is left untouched and the result carries no
/// link back to it. Returns `theta'` and the mean inner loss.
#[allow(clippy::too_many_arguments)]
pub fn inner_update<O: Objective>(
    objective: &mut O,
    theta: &ParameterRegistry,
    batches: &[Vec<usize>],
    alpha: f64,
    inner_steps: usize,
    clip_norm: f64,
    seed: u64,
    iteration: usize,
) -> Result<(ParameterRegistry, f64), TrainError> {
    if batches.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut prime = theta.clone();
    let mut total = 0.0;
    for s in 0..inner_steps {
        let batch = &batches[s % batches.len()];
        let (loss, mut grads) = objective.loss_and_grad(&prime, batch, seed.wrapping_add(s as u64))?;
        total += checked(loss, iteration, "inner")?;
        grads.clip_global_norm(clip_norm);
        if alpha != 0.0 {
            prime.sgd_step(&grads, alpha);
        }
    }
    Ok((prime, total / inner_steps as f64))
}

/// Evaluates the support gradient at `theta_prime` and applies it to `theta`
/// with step `beta`. Returns the support loss.
#[allow(clippy::too_many_arguments)]
pub fn outer_update<O: Objective>(
    objective: &mut O,
    theta: &mut ParameterRegistry,
    theta_prime: &ParameterRegistry,
    batch: &[usize],
    beta: f64,
    clip_norm: f64,
    seed: u64,
    iteration: usize,
) -> Result<f64, TrainError> {
    let (loss, mut grads) = objective.loss_and_grad(theta_prime, batch, seed)?;
    let loss = checked(loss, iteration, "support")?;
    grads.clip_global_norm(clip_norm);
    if beta != 0.0 {
        theta.sgd_step(&grads, beta);
    }
    Ok(loss)
}

fn batches(order: &[String], index: &HashMap<String, usize>, size: usize) -> Vec<Vec<usize>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|id| index[id]).collect())
        .collect()
}

/// Runs the configured method on `params` with an arbitrary objective.
/// Freeze masks and snapshots are taken as they are on `params`.
pub fn train_objective<O: Objective>(
    cfg: &TrainerConfig,
    params: &mut ParameterRegistry,
    objective: &mut O,
    model_dim: usize,
) -> Result<Vec<StepRecord>, TrainError> {
    cfg.validate()?;
    let ids = objective.example_ids();
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if ids.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let index: HashMap<String, usize> = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
    if index.len() != ids.len() {
        return Err(TrainError::InvalidConfig("example ids are not unique".into()));
    }
    let trainable = params.trainable_count();
    let mut optimizer: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd),
        OptimizerKind::Adam => Box::new(Adam::default()),
    };
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let mut records = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        if cfg.method.is_maml() {
            let split = split_epoch(&ids, cfg.support_fraction, epoch, cfg.rng_seed)?;
            let train_b = batches(&split.train_order, &index, cfg.batch_size);
            let support_b = batches(&split.support_order, &index, cfg.batch_size);
            for (it, support) in support_b.iter().enumerate() {
                if step >= limit {
                    break 'epochs;
                }
                step += 1;
                let start = Instant::now();
                let inner: Vec<Vec<usize>> = (0..cfg.inner_steps)
                    .map(|s| train_b[(it * cfg.inner_steps + s) % train_b.len()].clone())
                    .collect();
                let (prime, train_loss) = inner_update(
                    objective,
                    params,
                    &inner,
                    cfg.alpha,
                    cfg.inner_steps,
                    cfg.clip_norm,
                    step_seed(cfg.rng_seed, step, 1),
                    step,
                )?;
                let beta = cfg.beta * cfg.schedule_factor(step, model_dim)?;
                let support_loss = outer_update(
                    objective,
                    params,
                    &prime,
                    support,
                    beta,
                    cfg.clip_norm,
                    step_seed(cfg.rng_seed, step, 2),
                    step,
                )?;
                records.push(StepRecord {
                    iteration: step,
                    method: cfg.method,
                    train_loss,
                    support_loss: Some(support_loss),
                    lr: beta,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    trainable_param_count: trainable,
                });
            }
        } else {
            let mut order = ids.clone();
            order.shuffle(&mut epoch_rng(cfg.rng_seed, epoch, 0xba7c));
            for batch in batches(&order, &index, cfg.batch_size) {
                if step >= limit {
                    break 'epochs;
                }
                step += 1;
                let start = Instant::now();
                let (loss, mut grads) = objective.loss_and_grad(params, &batch, step_seed(cfg.rng_seed, step, 0))?;
                let loss = checked(loss, step, "train")?;
                grads.clip_global_norm(cfg.clip_norm);
                let lr = cfg.lr_scale * cfg.schedule_factor(step, model_dim)?;
                optimizer.step(params, &grads, lr);
                records.push(StepRecord {
                    iteration: step,
                    method: cfg.method,
                    train_loss: loss,
                    support_loss: None,
                    lr,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    trainable_param_count: trainable,
                });
            }
        }
    }
    Ok(records)
}

/// Trains `model` on `data` with `cfg.method`. FMP and MAML_FMP install the
/// freeze policy first; WCA and KLD need a snapshot already on the registry.
pub fn train(
    cfg: &TrainerConfig,
    model: &mut AsrModel,
    loss: &LossConfig,
    data: &[Utterance],
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    loss.validate()?;
    if cfg.method.freezes() {
        let policy = cfg
            .freeze_policy
            .clone()
            .unwrap_or_else(|| FreezePolicy::default_for(&model.config));
        apply_freeze_policy(&mut model.params, &policy)?;
    }
    if cfg.method.needs_snapshot() && model.params.snapshot().is_none() {
        return Err(TrainError::MissingSnapshot(cfg.method));
    }
    let frozen = model.params.freeze_mask();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            records: Vec::new(),
            frozen,
        });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut objective = AsrObjective::new(model.config.clone(), loss.clone(), data).for_method(cfg.method);
    let records = train_objective(cfg, &mut model.params, &mut objective, model.config.model_dim)?;
    Ok(TrainOutcome { records, frozen })
}
