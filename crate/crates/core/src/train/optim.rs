//! Adam with per-tensor step counts.

use ctcal_autodiff::Tensor;

use super::config::AdamConfig;
use crate::error::{Error, Result};
use crate::model::params::{ParamId, ParamStore};

/// First and second moments for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub counts: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut s = ParamStore::new();
            for (_, name, t) in p.iter() {
                s.add(name, Tensor::zeros(t.shape()));
            }
            s
        };
        Self { m: zeros(params), v: zeros(params), counts: vec![0; params.len()] }
    }

    /// One update. Tensors whose gradient is missing or identically zero are left untouched.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) -> Result<usize> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let mut touched = 0;
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let id = ParamId(i);
            self.counts[i] += 1;
            let t = self.counts[i] as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let step = (cfg.lr * c2.sqrt() / c1) as f32;
            let eps = (cfg.eps * c2.sqrt()) as f32;
            let decay = (cfg.lr * cfg.weight_decay) as f32;
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let w = params.get_mut(id).data_mut();
            for k in 0..w.len() {
                let g = grad.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                w[k] -= step * m[k] / (v[k].sqrt() + eps) + decay * w[k];
            }
            touched += 1;
        }
        Ok(touched)
    }

    /// Moments packed into one store with `m/` and `v/` prefixes.
    pub fn to_store(&self, prefix: &str) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (_, n, t) in self.m.iter() {
            s.add(format!("{prefix}/m/{n}"), t.clone());
        }
        for (_, n, t) in self.v.iter() {
            s.add(format!("{prefix}/v/{n}"), t.clone());
        }
        s
    }

    pub fn from_store(store: &ParamStore<f32>, prefix: &str, params: &ParamStore<f32>, counts: Vec<u64>) -> Result<Self> {
        let mut state = Self::new(params);
        if counts.len() != params.len() {
            return Err(Error::ShapeMismatch(format!("{} step counts for {} parameters", counts.len(), params.len())));
        }
        state.counts = counts;
        for (id, name, t) in params.iter() {
            for (which, dst) in [("m", &mut state.m), ("v", &mut state.v)] {
                let src = store
                    .by_name(&format!("{prefix}/{which}/{name}"))
                    .ok_or_else(|| Error::ShapeMismatch(format!("optimizer state lacks {prefix}/{which}/{name}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::ShapeMismatch(format!("optimizer state shape for {name}")));
                }
                *dst.get_mut(id) = src.clone();
            }
        }
        Ok(state)
    }
}
