use crate::model::{ParamGrads, ParameterRegistry};

pub trait Optimizer {
    /// Updates unfrozen parameters in place with learning rate `lr`.
    fn step(&mut self, params: &mut ParameterRegistry, grads: &ParamGrads, lr: f64);
}

#[derive(Clone, Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParameterRegistry, grads: &ParamGrads, lr: f64) {
        params.sgd_step(grads, lr);
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily for the
/// parameters that receive gradients.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.98, 1e-9)
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParameterRegistry, grads: &ParamGrads, lr: f64) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, g) in grads.iter() {
            if params.is_frozen(idx) {
                continue;
            }
            let m = self.m[idx].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[idx].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = params.tensor_mut(idx).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
