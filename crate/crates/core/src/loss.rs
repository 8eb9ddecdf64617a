//! Focal loss and the two-space multi-task objective.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the positive (road) term.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Weight of the image-space loss relative to the BEV loss.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.gamma >= 0.0 && self.beta >= 0.0)
            || !(self.alpha.is_finite() && self.gamma.is_finite() && self.beta.is_finite())
        {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel focal loss and its derivative with respect to the prediction:
///
/// `L = -[ alpha (1-y)^gamma g ln y + y^gamma (1-g) ln(1-y) ]`
///
/// The derivative is zero where the prediction was clamped.
#[inline]
pub fn focal_pixel(pred: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let y = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let clamped = y != pred;
    let (ln_y, ln_1y) = (y.ln(), (1.0 - y).ln());
    let pos_mod = (1.0 - y).powf(gamma);
    let neg_mod = y.powf(gamma);
    let loss = -(alpha * pos_mod * target * ln_y + neg_mod * (1.0 - target) * ln_1y);
    if clamped {
        return (loss, 0.0);
    }
    // d/dy of (1-y)^gamma ln y and y^gamma ln(1-y)
    let d_pos = if gamma == 0.0 {
        1.0 / y
    } else {
        -gamma * (1.0 - y).powf(gamma - 1.0) * ln_y + pos_mod / y
    };
    let d_neg = if gamma == 0.0 {
        -1.0 / (1.0 - y)
    } else {
        gamma * y.powf(gamma - 1.0) * ln_1y - neg_mod / (1.0 - y)
    };
    (loss, -(alpha * target * d_pos + (1.0 - target) * d_neg))
}

/// Masked mean of [`focal_pixel`] over a flat prediction map.
pub fn focal_loss(pred: &[f64], target: &[f64], valid: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != valid.len() {
        return Err(Error::Shape("focal_loss inputs differ in length".into()));
    }
    let (sum, n) = pred
        .iter()
        .zip(target)
        .zip(valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), ((&p, &g), _)| {
            (s + focal_pixel(p, g, alpha, gamma).0, n + 1)
        });
    if n == 0 {
        return Err(Error::Config("focal_loss: mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

/// `beta * image_loss + bev_loss`.
pub fn multitask_loss(image_loss: f64, bev_loss: f64, beta: f64) -> f64 {
    beta * image_loss + bev_loss
}
