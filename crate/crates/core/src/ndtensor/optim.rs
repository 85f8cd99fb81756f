use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Grads, ParamId};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with bias correction and decoupled weight decay. Decay applies to
/// parameters of rank ≥ 2 (weight matrices); vectors such as biases and
/// norm gains are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &Checkpoint<T>, cfg: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        AdamW { cfg, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Checkpoint<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        for (i, g) in grads.per_param.iter().enumerate() {
            if let Some(g) = g {
                if let Some(bad) = g.data().iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in `{}` at element {bad} ({:?})",
                        params.name(ParamId(i)),
                        g.data()[bad]
                    )));
                }
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for (i, g) in grads.per_param.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.tensor_mut(ParamId(i));
            let decay = if p.shape().len() >= 2 { T::lit(1.0 - lr * c.weight_decay) } else { T::one() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv * decay - step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate at fractional epoch `epoch`: linear warmup from 0 to
/// `base_lr` over `warmup_epochs`, then half-cosine decay reaching 0 at
/// `total_epochs`.
pub fn cosine_annealing_lr(epoch: f64, warmup_epochs: f64, total_epochs: f64, base_lr: f64) -> f64 {
    if epoch < warmup_epochs {
        return base_lr * epoch / warmup_epochs;
    }
    if epoch >= total_epochs || total_epochs <= warmup_epochs {
        return 0.0;
    }
    let progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
