use crate::error::{Error, Result};
use crate::nn::loss::LossKind;
use crate::nn::mlp::{Mlp, OutputGrad};

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-4;

/// Magnitudes below this are compared on an absolute scale.
const RELATIVE_FLOOR: f64 = 1e-3;

/// Largest relative disagreement between backprop and central finite
/// differences over every parameter, for one sample.
///
/// The error for a parameter is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn numeric_gradient_check(net: &Mlp, input: &[f64], target: &[f64], loss: LossKind) -> Result<f64> {
    Error::check_len("gradcheck target", net.output_dim(), target.len())?;
    let cache = net.forward_cached(input)?;
    let d = loss.logit_grad(cache.output(), target);
    let mut grads = net.zero_gradients();
    net.backward(&cache, OutputGrad::PreActivation(&d), &mut grads);
    let analytic = grads.flat();

    let eval = |m: &Mlp| -> Result<f64> {
        let c = m.forward_cached(input)?;
        Ok(loss.sample_loss(c.output(), &c.logits, target))
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + GRADCHECK_STEP;
        let up = eval(&probe)?;
        *probe.param_mut(i) = orig - GRADCHECK_STEP;
        let down = eval(&probe)?;
        *probe.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
