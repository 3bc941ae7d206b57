use std::collections::BTreeMap;

use super::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for one flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the moments with `grad` and returns the bias-corrected
    /// increment to add to the parameters.
    pub fn update(&mut self, grad: &[f64], cfg: &AdamConfig) -> Vec<f64> {
        if self.m.len() != grad.len() {
            *self = Self::new(grad.len());
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let mut out = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            out[i] = -cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        out
    }
}

/// Adam over store parameters. Only parameters with a gradient buffer are
/// touched; each keeps its own step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<ParamId, Moments>,
    lr_scale: BTreeMap<ParamId, f64>,
    skipped: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
            lr_scale: BTreeMap::new(),
            skipped: 0,
        }
    }

    /// Applies one step. Returns `false`, leaving everything untouched, when
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> bool {
        if !grads.all_finite() {
            self.skipped += 1;
            return false;
        }
        for id in grads.ids() {
            let g = grads.get(id).expect("listed id");
            let st = self.state.entry(id).or_insert_with(|| Moments::new(g.len()));
            let cfg = AdamConfig {
                lr: self.config.lr * self.lr_scale.get(&id).copied().unwrap_or(1.0),
                ..self.config
            };
            let inc = st.update(g.data(), &cfg);
            for (p, d) in store.get_mut(id).data_mut().iter_mut().zip(inc) {
                *p += d;
            }
        }
        true
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.lr_scale.insert(id, scale);
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |m| m.steps())
    }
}
