//! AdamW with decoupled weight decay, updating trainable tensors only.

use serde::{Deserialize, Serialize};

use crate::model::{ParamMut, ParamRef};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decay applied to decoder tensors. Shift biases, norms, positional
    /// embeddings and the TAL are never decayed.
    #[serde(default = "default_decoder_decay")]
    pub decoder_weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_decoder_decay() -> f64 {
    0.01
}

impl AdamWConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            decoder_weight_decay: default_decoder_decay(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update. `params` and `grads` must list the same tensors in the
    /// same order; frozen tensors are skipped and never written.
    pub fn apply(&mut self, params: Vec<ParamMut<'_, T>>, grads: Vec<ParamRef<'_, T>>) {
        let trainable: Vec<_> = params
            .into_iter()
            .zip(grads)
            .filter(|(p, _)| p.trainable)
            .collect();
        if self.moments.is_empty() {
            self.moments = trainable
                .iter()
                .map(|(p, _)| (vec![T::zero(); p.data.len()], vec![T::zero(); p.data.len()]))
                .collect();
        }
        self.step += 1;
        let c = self.config;
        if c.learning_rate == 0.0 {
            return;
        }
        let lr = T::of(c.learning_rate);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let eps = T::of(c.eps);
        let bc1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        for ((p, g), (m, v)) in trainable.into_iter().zip(self.moments.iter_mut()) {
            debug_assert_eq!(p.name, g.name);
            let decay = if p.name.starts_with("decoder.") {
                T::of(c.decoder_weight_decay)
            } else {
                T::zero()
            };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p.data[i];
                p.data[i] = w - lr * decay * w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
