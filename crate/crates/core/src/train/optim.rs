use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay. Moments are stored flat per parameter
/// in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. All gradients are checked before anything is written, so
    /// a rejected step leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        self.config.validate()?;
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} gradients, {} moments for {} parameters", grads.len(), self.m.len(), store.len()),
            ));
        }
        for (id, gr) in store.ids().zip(grads) {
            let p = store.get(id);
            if gr.len() != p.numel() || self.m[id.index()].len() != p.numel() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("`{}`: gradient has {} entries, parameter {}", store.name(id), gr.len(), p.numel()),
                ));
            }
            if let Some(k) = gr.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` entry {k} is {}",
                    store.name(id),
                    gr[k]
                )));
            }
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (id, gr) in ids.into_iter().zip(grads) {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gi), mi), vi) in store.get_mut(id).data_mut().iter_mut().zip(gr).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p -= lr * weight_decay * *p;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
