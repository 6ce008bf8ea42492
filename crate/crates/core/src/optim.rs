//! AdamW with decoupled weight decay and the warm-up/decay schedule.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Gradients, Mat};

/// Learning-rate multiplier: linear from 0 at step 0 to 1 at the end of
/// warm-up, then linear down to 0 at `total` steps.
pub fn lr_multiplier(step: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = (warmup_ratio * total as f64).round() as usize;
    if step < warmup {
        step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        (total - step) as f64 / (total - warmup).max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Biases and LayerNorm parameters are not decayed.
    fn decays(store: &ParamStore, id: ParamId) -> bool {
        let name = store.name(id);
        !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
    }

    /// One update with learning rate `self.lr * multiplier`. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, multiplier: f64) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr * multiplier;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let decay = if Self::decays(store, id) { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let eps = self.eps;
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + eps);
                *w -= lr * (update + decay * *w);
            });
        }
    }
}
