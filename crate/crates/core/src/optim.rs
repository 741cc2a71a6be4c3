//! AdamW with decoupled weight decay and a per-epoch cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{GmsError, Result};
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

/// Gradients for a bound store, aligned with its parameter ids.
pub fn collect_grads<T: Scalar>(
    bound: &Bound,
    grads: &Gradients<T>,
    store: &ParamStore<T>,
) -> Result<Vec<Tensor<T>>> {
    store
        .ids()
        .map(|id| {
            grads.get(bound[id]).cloned().ok_or_else(|| {
                GmsError::Usage(format!("no gradient for parameter {}", store.name(id)))
            })
        })
        .collect()
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect()
        };
        AdamW {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One in-place update of every parameter in `store`. Only the store
    /// registered with this optimizer is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(GmsError::dim("gradient count", store.len(), grads.len()));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(GmsError::dim(
                    format!("gradient of {}", store.name(id)),
                    format!("{:?}", store.get(id).shape()),
                    format!("{:?}", g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let (lr, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
        for (i, id) in store.ids().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let theta = store.data_mut(id);
            for (((p, &gv), mv), vv) in theta
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }

    /// `(first moments, second moments, step count)`.
    pub fn state(&self) -> (&[Tensor<T>], &[Tensor<T>], u64) {
        (&self.first, &self.second, self.step)
    }

    pub fn restore(
        store: &ParamStore<T>,
        config: AdamWConfig,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
        step: u64,
    ) -> Result<Self> {
        for (id, (m, v)) in store.ids().zip(first.iter().zip(&second)) {
            let shape = store.get(id).shape();
            if m.shape() != shape || v.shape() != shape {
                return Err(GmsError::dim(
                    format!("optimizer state of {}", store.name(id)),
                    format!("{shape:?}"),
                    format!("{:?}", m.shape()),
                ));
            }
        }
        if first.len() != store.len() || second.len() != store.len() {
            return Err(GmsError::dim(
                "optimizer state entries",
                store.len(),
                first.len(),
            ));
        }
        Ok(AdamW {
            config,
            first,
            second,
            step,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub eta_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr_init: f64, total_epochs: usize) -> Self {
        CosineSchedule {
            lr_init,
            eta_min: 0.0,
            total_epochs,
        }
    }

    /// Learning rate for epoch `t` in `0..=total_epochs`.
    pub fn lr(&self, t: usize) -> Result<f64> {
        if t > self.total_epochs || self.total_epochs == 0 {
            return Err(GmsError::Usage(format!(
                "epoch {t} outside schedule range 0..={}",
                self.total_epochs
            )));
        }
        let phase = std::f64::consts::PI * t as f64 / self.total_epochs as f64;
        Ok(self.eta_min + 0.5 * (self.lr_init - self.eta_min) * (1.0 + phase.cos()))
    }
}
