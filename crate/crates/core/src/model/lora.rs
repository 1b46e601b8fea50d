//! Low-rank adapters on attention projection matrices.
//!
//! A target weight `W: [d_in, d_out]` is used as `W + scale * down @ up` with
//! `down: [d_in, r]`, `up: [r, d_out]` and `scale = alpha / r`. The substitution
//! happens when parameters are bound to a graph, so model code never sees it.

use ctcal_autodiff::{Graph, Real, Tensor};
use serde::{Deserialize, Serialize};

use super::params::{Bound, Init, ParamId, ParamStore};
use crate::error::{Error, Result};

const PROJECTION_SUFFIXES: [&str; 4] = [".wq.w", ".wk.w", ".wv.w", ".wo.w"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter<T> {
    pub config: AdapterConfig,
    /// `(base target, down, up)` ids; down/up index into `params`.
    pub pairs: Vec<(ParamId, ParamId, ParamId)>,
    pub params: ParamStore<T>,
}

/// Names of every image-side attention projection matrix in a store (text-encoder layers excluded).
pub fn attention_targets<T: Real>(base: &ParamStore<T>) -> Vec<String> {
    base.names()
        .iter()
        .filter(|n| !n.starts_with("text.") && PROJECTION_SUFFIXES.iter().any(|s| n.ends_with(s)))
        .cloned()
        .collect()
}

impl<T: Real> LoraAdapter<T> {
    /// Down matrices start random, up matrices at zero, so the adapted model starts equal to the base.
    pub fn new(base: &ParamStore<T>, targets: &[String], config: AdapterConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 || !config.alpha.is_finite() {
            return Err(Error::Config(format!("adapter rank {} / alpha {}", config.rank, config.alpha)));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let mut pairs = Vec::with_capacity(targets.len());
        for name in targets {
            let id = base.id(name).ok_or_else(|| Error::TargetNotFound(name.clone()))?;
            let s = base.get(id).shape();
            if s.len() != 2 {
                return Err(Error::TargetNotFound(format!("{name} (not a matrix)")));
            }
            let down = init.normal(&format!("{name}.lora_down"), &[s[0], config.rank], 1.0 / (s[0] as f64).sqrt());
            let up = init.zeros(&format!("{name}.lora_up"), &[config.rank, s[1]]);
            pairs.push((id, down, up));
        }
        Ok(Self { config, pairs, params })
    }

    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    /// `scale * down @ up` for pair `i`.
    pub fn delta(&self, i: usize) -> Tensor<T> {
        let (_, down, up) = self.pairs[i];
        let (d, u) = (self.params.get(down), self.params.get(up));
        let (m, r, n) = (d.shape()[0], d.shape()[1], u.shape()[1]);
        let s = T::from_f64_lossy(self.scale());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, r, n, d.data(), (r as isize, 1), u.data(), (n as isize, 1), &mut out, (n as isize, 1), false);
        out.iter_mut().for_each(|v| *v *= s);
        Tensor::new(&[m, n], out).unwrap()
    }

    /// Bind adapter matrices and point every target of `base` at the adapted weight.
    pub fn bind(&self, g: &mut Graph<T>, base: &mut Bound, trainable: bool) -> Bound {
        let own = self.params.bind(g, trainable);
        let s = T::from_f64_lossy(self.scale());
        for &(target, down, up) in &self.pairs {
            let prod = g.matmul(own.get(down), own.get(up));
            let prod = g.scale(prod, s);
            let w = g.add(base.get(target), prod);
            base.replace(target, w);
        }
        own
    }

    pub fn merge(&self, base: &mut ParamStore<T>) {
        for (i, &(target, _, _)) in self.pairs.iter().enumerate() {
            let d = self.delta(i);
            let w = base.get_mut(target);
            w.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += *b);
        }
    }

    pub fn unmerge(&self, base: &mut ParamStore<T>) {
        for (i, &(target, _, _)) in self.pairs.iter().enumerate() {
            let d = self.delta(i);
            let w = base.get_mut(target);
            w.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a -= *b);
        }
    }
}
