use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Method, TrainError};
use crate::autodiff::{Graph, Tensor, Var};
use crate::losses::{aed_loss, ctc_loss, hybrid_loss, kld_penalty, wca_penalty, LossConfig};
use crate::model::{AsrModel, Binder, Forward, ModelConfig, ParamGrads, ParameterRegistry};
use crate::synth::Utterance;

/// A differentiable training objective over an indexed example set.
pub trait Objective {
    /// Stable identifier per example, used for epoch splitting.
    fn example_ids(&self) -> Vec<String>;

    /// Mean loss over `batch` at `params`, and its gradient for every
    /// unfrozen parameter. `seed` drives any stochastic layers.
    fn loss_and_grad(
        &mut self,
        params: &ParameterRegistry,
        batch: &[usize],
        seed: u64,
    ) -> Result<(f64, ParamGrads), TrainError>;
}

/// Hybrid CTC/attention loss over utterances, optionally with the weight
/// constraint or the KL term towards the snapshot model.
pub struct AsrObjective<'d> {
    config: ModelConfig,
    loss: LossConfig,
    data: &'d [Utterance],
    wca: bool,
    kld: bool,
    dropout: bool,
    teacher: Option<AsrModel>,
    teacher_cache: Vec<Option<Tensor>>,
}

impl<'d> AsrObjective<'d> {
    pub fn new(config: ModelConfig, loss: LossConfig, data: &'d [Utterance]) -> Self {
        Self {
            config,
            loss,
            data,
            wca: false,
            kld: false,
            dropout: true,
            teacher: None,
            teacher_cache: vec![None; data.len()],
        }
    }

    /// Enables the regularizer that belongs to `method`.
    pub fn for_method(mut self, method: Method) -> Self {
        self.wca = method == Method::WCA;
        self.kld = method == Method::KLD;
        self
    }

    pub fn with_dropout(mut self, on: bool) -> Self {
        self.dropout = on;
        self
    }

    fn teacher_log_probs(&mut self, params: &ParameterRegistry, idx: usize) -> Result<Tensor, TrainError> {
        if let Some(t) = &self.teacher_cache[idx] {
            return Ok(t.clone());
        }
        if self.teacher.is_none() {
            let snap = params
                .snapshot_registry()
                .ok_or(TrainError::MissingSnapshot(Method::KLD))?;
            self.teacher = Some(AsrModel {
                config: self.config.clone(),
                params: snap,
            });
        }
        let teacher = self.teacher.as_ref().expect("set above");
        let lp = teacher.ctc_log_probs(&self.data[idx].features)?;
        self.teacher_cache[idx] = Some(lp.clone());
        Ok(lp)
    }
}

impl Objective for AsrObjective<'_> {
    fn example_ids(&self) -> Vec<String> {
        self.data.iter().map(|u| u.id.clone()).collect()
    }

    fn loss_and_grad(
        &mut self,
        params: &ParameterRegistry,
        batch: &[usize],
        seed: u64,
    ) -> Result<(f64, ParamGrads), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let teachers = if self.kld {
            batch
                .iter()
                .map(|&i| self.teacher_log_probs(params, i))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut binder = Binder::new(params, true);
        let eos = self.config.sos_eos();
        let mut total: Option<Var> = None;
        for (k, &i) in batch.iter().enumerate() {
            let utt = &self.data[i];
            let rng_opt = if self.dropout { Some(&mut rng) } else { None };
            let mut fwd = Forward::new(&mut g, &self.config, binder, rng_opt);
            let enc = fwd.encode(&utt.features)?;
            let ctc_logits = fwd.ctc_logits(&enc)?;
            let aed_logits = fwd.aed_logits(&enc, &utt.labels)?;
            binder = fwd.into_binder();
            let lp = g.log_softmax(ctc_logits);
            let ctc = ctc_loss(&mut g, lp, &utt.labels)?;
            let aed = aed_loss(&mut g, aed_logits, &utt.labels, self.loss.label_smoothing, eos)?;
            let mut l = hybrid_loss(&mut g, ctc, aed, self.loss.lambda)?;
            if self.kld {
                let k = kld_penalty(&mut g, lp, &teachers[k], self.loss.kld_weight)?;
                l = g.add(l, k)?;
            }
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let mut loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        if self.wca {
            if let Some(p) = wca_penalty(&mut g, &mut binder, self.loss.wca_weight)? {
                loss = g.add(loss, p)?;
            }
        }
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Ok((value, ParamGrads::empty(params.len())));
        }
        let mut grads = g.backward(loss)?;
        Ok((value, binder.gradients(&mut grads)))
    }
}
