use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::mlp::Activation;

/// Scores are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logarithm.
pub const BCE_CLAMP: f64 = 1e-7;

#[inline]
fn bce_term(score: f64, target: f64) -> f64 {
    let s = score.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(target * math::ln(s) + (1.0 - target) * math::ln(1.0 - s))
}

/// Mean binary cross-entropy over elements.
pub fn bce_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    Error::check_len("bce targets", scores.len(), targets.len())?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = scores.iter().zip(targets).map(|(&s, &y)| bce_term(s, y)).sum();
    Ok(sum / scores.len() as f64)
}

/// `-ln softmax(logits)[label]`, via log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + math::ln(logits.iter().map(|&z| math::exp(z - max)).sum::<f64>());
    lse - logits[label]
}

/// Exit-weighted cross-entropy of one sample: `sum_n w_n * CE(softmax(z_n), label)`.
pub fn weighted_ce_loss(per_exit_logits: &[Vec<f64>], label: usize, weights: &[f64]) -> Result<f64> {
    Error::check_len("exit weights", per_exit_logits.len(), weights.len())?;
    let classes = per_exit_logits.first().map(Vec::len).unwrap_or(0);
    let mut total = 0.0;
    for (z, &w) in per_exit_logits.iter().zip(weights) {
        Error::check_len("exit logits", classes, z.len())?;
        if label >= z.len() {
            return Err(Error::DimensionMismatch {
                what: "label index",
                expected: z.len(),
                found: label,
            });
        }
        total += w * softmax_cross_entropy(z, label);
    }
    Ok(total)
}

/// Mean squared error over elements.
pub fn mse_loss(outputs: &[f64], targets: &[f64]) -> Result<f64> {
    Error::check_len("mse targets", outputs.len(), targets.len())?;
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = outputs.iter().zip(targets).map(|(&o, &t)| (o - t) * (o - t)).sum();
    Ok(sum / outputs.len() as f64)
}

/// Training objective of a network, paired with the head it expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Sigmoid head; per-sample loss sums BCE over outputs.
    Bce,
    /// Softmax head; one-hot targets.
    SoftmaxCe,
    /// Identity head; mean squared error over outputs.
    Mse,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::SoftmaxCe => "ce",
            LossKind::Mse => "mse",
        }
    }

    pub fn head(self) -> Activation {
        match self {
            LossKind::Bce => Activation::Sigmoid,
            LossKind::SoftmaxCe => Activation::Softmax,
            LossKind::Mse => Activation::Identity,
        }
    }

    /// Loss of one sample given the network output and last-layer logits.
    pub fn sample_loss(self, output: &[f64], logits: &[f64], target: &[f64]) -> f64 {
        match self {
            LossKind::Bce => output.iter().zip(target).map(|(&s, &y)| bce_term(s, y)).sum(),
            LossKind::SoftmaxCe => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + math::ln(logits.iter().map(|&z| math::exp(z - max)).sum::<f64>());
                target.iter().zip(logits).map(|(&y, &z)| y * (lse - z)).sum()
            }
            LossKind::Mse => {
                let k = output.len() as f64;
                output.iter().zip(target).map(|(&o, &t)| (o - t) * (o - t)).sum::<f64>() / k
            }
        }
    }

    /// Gradient of [`sample_loss`](Self::sample_loss) w.r.t. the last-layer
    /// pre-activation.
    pub fn logit_grad(self, output: &[f64], target: &[f64]) -> Vec<f64> {
        match self {
            LossKind::Bce => output
                .iter()
                .zip(target)
                .map(|(&s, &y)| {
                    // the clamped region is flat
                    if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&s) {
                        s - y
                    } else {
                        0.0
                    }
                })
                .collect(),
            LossKind::SoftmaxCe => {
                let mass: f64 = target.iter().sum();
                output.iter().zip(target).map(|(&p, &y)| mass * p - y).collect()
            }
            LossKind::Mse => {
                let k = output.len() as f64;
                output.iter().zip(target).map(|(&o, &t)| 2.0 * (o - t) / k).collect()
            }
        }
    }
}
