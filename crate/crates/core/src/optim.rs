//! AdamW with decoupled weight decay, plus global gradient clipping.

use std::collections::HashMap;

use crate::error::Result;
use crate::param::ParameterStore;
use crate::scalar::Real;

/// Rescale all accumulated gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &ParameterStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in store.iter() {
        if let Some(g) = p.value.grad() {
            for v in g {
                let v = v.as_f64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::from_f64(max_norm / norm);
        for p in store.iter() {
            p.value.scale_grad(factor);
        }
    }
    norm
}

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from the gradients currently accumulated in `store`.
    /// Parameters without a gradient this step are treated as zero-gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParameterStore<T>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let value = store.get(&name)?;
            let n = value.numel();
            let grad: Vec<f64> = match value.grad() {
                Some(g) => g.iter().map(|&v| v.as_f64()).collect(),
                None => vec![0.0; n],
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut next = Vec::with_capacity(n);
            for (i, p) in value.data().iter().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let p64 = p.as_f64();
                let upd = self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p64);
                next.push(T::from_f64(p64 - upd));
            }
            store.set_data(&name, next)?;
        }
        Ok(())
    }
}
