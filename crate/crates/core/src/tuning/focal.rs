//! Focal loss over binary mask logits.
//!
//! Per pixel, with `p = sigmoid(logit)` clamped to `[ε, 1-ε]`:
//! `-α (1-p)^γ ln p` where the target is 1 and `-(1-α) p^γ ln(1-p)` where it
//! is 0. Pixel terms are summed over the image and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskLogits;
use crate::ops::sigmoid;
use crate::raster::BinaryMask;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalLossConfig {
    pub alpha: f64,
    pub gamma: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-7
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 3.0,
            eps: default_eps(),
        }
    }
}

impl FocalLossConfig {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        Self {
            alpha,
            gamma,
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "focal alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal gamma {} must be ≥ 0",
                self.gamma
            )));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-3) {
            return Err(Error::Config(format!(
                "focal eps {} outside (0, 1e-3]",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Loss of a single pixel given the (unclamped) probability.
pub fn pixel_loss<T: Scalar>(p: T, target: bool, cfg: &FocalLossConfig) -> T {
    let eps = T::of(cfg.eps);
    let p = p.max(eps).min(T::one() - eps);
    let alpha = T::of(cfg.alpha);
    let gamma = T::of(cfg.gamma);
    if target {
        -alpha * (T::one() - p).powf(gamma) * p.ln()
    } else {
        -(T::one() - alpha) * p.powf(gamma) * (T::one() - p).ln()
    }
}

/// Derivative of [`pixel_loss`] w.r.t. the logit; zero where the clamp is active.
pub fn pixel_loss_grad<T: Scalar>(p: T, target: bool, cfg: &FocalLossConfig) -> T {
    let eps = T::of(cfg.eps);
    if p < eps || p > T::one() - eps {
        return T::zero();
    }
    let alpha = T::of(cfg.alpha);
    let gamma = T::of(cfg.gamma);
    let q = T::one() - p;
    if target {
        alpha * (gamma * p * q.powf(gamma) * p.ln() - q.powf(gamma + T::one()))
    } else {
        (T::one() - alpha) * (p.powf(gamma + T::one()) - gamma * p.powf(gamma) * q * q.ln())
    }
}

/// Pixel-summed loss of one mask and its gradient w.r.t. the logits.
/// `target` holds `{0, 1}` values (anything nonzero counts as 1).
pub fn focal_loss_single<T: Scalar>(
    logits: &[T],
    target: &[u8],
    cfg: &FocalLossConfig,
) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(target) {
        let p = sigmoid(z);
        loss += pixel_loss(p, y != 0, cfg);
        grad.push(pixel_loss_grad(p, y != 0, cfg));
    }
    (loss, grad)
}

fn check_batch<T: Scalar>(logits: &[MaskLogits<T>], targets: &[BinaryMask]) -> Result<()> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit maps vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    for (l, t) in logits.iter().zip(targets) {
        if l.height != t.height || l.width != t.width || l.data.len() != t.data.len() {
            return Err(Error::Shape(format!(
                "logits {}×{} vs target {}×{}",
                l.height, l.width, t.height, t.width
            )));
        }
        if let Some(&v) = t.data.iter().find(|&&v| v > 1) {
            return Err(Error::Shape(format!("target value {v} is not binary")));
        }
    }
    Ok(())
}

/// Batch focal loss: mean over masks of per-mask pixel sums.
pub fn focal_loss<T: Scalar>(
    logits: &[MaskLogits<T>],
    targets: &[BinaryMask],
    cfg: &FocalLossConfig,
) -> Result<T> {
    cfg.validate()?;
    check_batch(logits, targets)?;
    let total: T = logits
        .iter()
        .zip(targets)
        .map(|(l, t)| focal_loss_single(&l.data, &t.data, cfg).0)
        .sum();
    Ok(total / T::of(logits.len() as f64))
}

/// Gradient of [`focal_loss`] w.r.t. every logit of every mask.
pub fn focal_loss_grad<T: Scalar>(
    logits: &[MaskLogits<T>],
    targets: &[BinaryMask],
    cfg: &FocalLossConfig,
) -> Result<Vec<Vec<T>>> {
    cfg.validate()?;
    check_batch(logits, targets)?;
    let scale = T::one() / T::of(logits.len() as f64);
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(l, t)| {
            let (_, mut g) = focal_loss_single(&l.data, &t.data, cfg);
            g.iter_mut().for_each(|v| *v *= scale);
            g
        })
        .collect())
}
