use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Gradients, Graph, Tensor, Var};

/// Named parameters in declaration order, with a freeze mask and an optional
/// read-only snapshot of the values at the time it was taken.
#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: Vec<bool>,
    snapshot: Option<Arc<Vec<Tensor>>>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize, ModelError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::DuplicateParameter(name));
        }
        let idx = self.names.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor);
        self.frozen.push(false);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|(t, _)| t.len())
            .sum()
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen[idx]
    }

    pub fn freeze_mask(&self) -> BTreeSet<String> {
        self.names
            .iter()
            .zip(&self.frozen)
            .filter(|(_, f)| **f)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Replaces the freeze mask with exactly `names`.
    pub fn set_freeze_mask<'a>(&mut self, names: impl IntoIterator<Item = &'a str>) -> Result<(), ModelError> {
        let mut mask = vec![false; self.len()];
        for name in names {
            let idx = self
                .index_of(name)
                .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
            mask[idx] = true;
        }
        self.frozen = mask;
        Ok(())
    }

    pub fn take_snapshot(&mut self) {
        self.snapshot = Some(Arc::new(self.tensors.clone()));
    }

    pub fn snapshot(&self) -> Option<&[Tensor]> {
        self.snapshot.as_deref().map(Vec::as_slice)
    }

    pub(crate) fn set_snapshot(&mut self, snapshot: Option<Vec<Tensor>>) {
        self.snapshot = snapshot.map(Arc::new);
    }

    /// A registry holding the snapshot values as its live parameters.
    pub fn snapshot_registry(&self) -> Option<ParameterRegistry> {
        let snap = self.snapshot.as_ref()?;
        let mut reg = self.clone();
        reg.tensors = snap.as_ref().clone();
        Some(reg)
    }

    /// Returns true when every tensor, the freeze mask and the name set match bit for bit.
    pub fn bit_identical(&self, other: &ParameterRegistry) -> bool {
        self.names == other.names
            && self.frozen == other.frozen
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| same_bits(a, b))
    }

    /// Applies `param -= lr * grad` to unfrozen parameters.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) {
        for (idx, g) in grads.iter() {
            if self.frozen[idx] {
                continue;
            }
            for (p, d) in self.tensors[idx].data_mut().iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
    }
}

pub(crate) fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Per-parameter gradients aligned with registry indices. Frozen parameters
/// have no entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn get(&self, idx: usize) -> Option<&[f64]> {
        self.grads.get(idx).and_then(|g| g.as_deref())
    }

    pub fn set(&mut self, idx: usize, grad: Vec<f64>) {
        self.grads[idx] = Some(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (i, g)))
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (idx, g) in other.iter() {
            match &mut self.grads[idx] {
                Some(dst) => dst.iter_mut().zip(g).for_each(|(d, v)| *d += v),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

/// Lazily binds registry parameters as graph leaves. Frozen parameters, or
/// all parameters when `track_grads` is off, are bound as constants.
pub struct Binder<'r> {
    registry: &'r ParameterRegistry,
    vars: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'r> Binder<'r> {
    pub fn new(registry: &'r ParameterRegistry, track_grads: bool) -> Self {
        Self {
            registry,
            vars: vec![None; registry.len()],
            track_grads,
        }
    }

    pub fn registry(&self) -> &'r ParameterRegistry {
        self.registry
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var, ModelError> {
        let idx = self
            .registry
            .index_of(name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        self.get_index(g, idx)
    }

    pub fn get_index(&mut self, g: &mut Graph, idx: usize) -> Result<Var, ModelError> {
        if let Some(v) = self.vars[idx] {
            return Ok(v);
        }
        let t = &self.registry.tensors[idx];
        let rg = self.track_grads && !self.registry.frozen[idx];
        let v = g.leaf(t.shape().to_vec(), t.data().to_vec(), rg)?;
        self.vars[idx] = Some(v);
        Ok(v)
    }

    /// Collects gradients of bound trainable parameters. Trainable parameters
    /// that were never bound get zero gradients.
    pub fn gradients(&self, grads: &mut Gradients) -> ParamGrads {
        let mut out = ParamGrads::empty(self.registry.len());
        if !self.track_grads {
            return out;
        }
        for idx in 0..self.registry.len() {
            if self.registry.frozen[idx] {
                continue;
            }
            let g = match self.vars[idx] {
                Some(v) => grads
                    .take(v)
                    .unwrap_or_else(|| vec![0.0; self.registry.tensors[idx].len()]),
                None => vec![0.0; self.registry.tensors[idx].len()],
            };
            out.set(idx, g);
        }
        out
    }
}

/// Parameters to freeze, listed as exact names or dotted prefixes
/// (`"encoder.block2"` matches every tensor under that block).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub frozen: Vec<String>,
}

impl FreezePolicy {
    pub fn none() -> Self {
        Self::default()
    }

    /// Keeps the encoder layers nearest the features and the labels trainable
    /// (first and last block, input projection, CTC head), plus the decoder
    /// embedding and output projection; freezes the encoder blocks in between
    /// and the decoder blocks that sit between embedding and output projection.
    pub fn default_for(config: &super::ModelConfig) -> Self {
        let mut frozen = Vec::new();
        for b in 2..config.num_encoder_blocks {
            frozen.push(format!("encoder.block{b}"));
        }
        for b in 1..=config.num_decoder_blocks {
            frozen.push(format!("decoder.block{b}"));
        }
        Self { frozen }
    }

    /// Expands the entries against the registry's names.
    pub fn resolve(&self, registry: &ParameterRegistry) -> Result<BTreeSet<String>, ModelError> {
        let mut out = BTreeSet::new();
        for entry in &self.frozen {
            let prefix = format!("{entry}.");
            let mut matched = false;
            for name in registry.names() {
                if name == entry || name.starts_with(&prefix) {
                    out.insert(name.clone());
                    matched = true;
                }
            }
            if !matched {
                return Err(ModelError::UnknownParameter(entry.clone()));
            }
        }
        Ok(out)
    }
}

/// Sets the registry's freeze mask from `policy` and returns the frozen names.
pub fn apply_freeze_policy(
    registry: &mut ParameterRegistry,
    policy: &FreezePolicy,
) -> Result<BTreeSet<String>, ModelError> {
    let names = policy.resolve(registry)?;
    registry.set_freeze_mask(names.iter().map(String::as_str))?;
    Ok(names)
}
