//! End-to-end finite-difference check of network gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Network;
use crate::seed;
use crate::tensor::{mse_loss, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per parameter tensor (and for the input); `None`
    /// checks all of them.
    pub per_tensor: Option<usize>,
    /// Lower bound of the relative-error denominator, so gradients that
    /// are zero up to rounding do not blow up the ratio.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            per_tensor: Some(24),
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub pool: String,
    pub entries: Vec<GradCheckEntry>,
    /// Coordinates whose ±step perturbation changed a ReLU sign or a
    /// pooling argmax, where the loss is not differentiable at this scale.
    pub skipped: usize,
    pub max_rel_error: f64,
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn loss_and_signature(net: &Network, image: &Tensor, target: &Tensor) -> Result<(f64, u64)> {
    let loss = mse_loss(&net.forward(image)?, target)?.data()[0];
    Ok((loss, net.activation_signature(image)?))
}

fn pick(len: usize, per_tensor: Option<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    match per_tensor {
        Some(k) if k < len => {
            let mut idx = sample(rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares backpropagated gradients of `mse(net(image), target)` with
/// respect to every parameter tensor and the input against central
/// differences.
pub fn grad_check(net: &Network, image: &Tensor, target: &Tensor, config: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(config.step > 0.0) || !(config.floor > 0.0) {
        return Err(Error::invalid("grad check step and floor must be positive"));
    }
    let mut net = net.clone();
    net.set_trainable(true);
    let image = image.detach().with_requires_grad(true);
    let loss = mse_loss(&net.forward(&image)?, target)?;
    let grads = loss.backward()?;
    let analytic_of = |t: &Tensor| -> Vec<f64> { grads.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]) };

    let mut frozen = net.clone();
    frozen.set_trainable(false);
    let plain = image.detach();
    let (_, base_sig) = loss_and_signature(&frozen, &plain, target)?;
    let mut rng = seed::stream(config.seed, "grad-check");
    let h = config.step;
    let mut entries = Vec::new();
    let mut skipped = 0;

    let mut probe = |name: &str, index: usize, analytic: f64, eval: &mut dyn FnMut(f64) -> Result<(f64, u64)>| -> Result<()> {
        let (lp, sp) = eval(h)?;
        let (lm, sm) = eval(-h)?;
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            return Ok(());
        }
        let numeric = (lp - lm) / (2.0 * h);
        entries.push(GradCheckEntry {
            tensor: name.to_string(),
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric, config.floor),
        });
        Ok(())
    };

    for (pi, param) in net.parameters().iter().enumerate() {
        let analytic = analytic_of(&param.tensor);
        let original = param.tensor.data().to_vec();
        for j in pick(original.len(), config.per_tensor, &mut rng) {
            let mut eval = |delta: f64| {
                let mut data = original.clone();
                data[j] += delta;
                frozen.set_parameter(pi, data)?;
                let r = loss_and_signature(&frozen, &plain, target);
                frozen.set_parameter(pi, original.clone())?;
                r
            };
            probe(&param.name, j, analytic[j], &mut eval)?;
        }
    }
    let analytic = analytic_of(&image);
    let original = plain.data().to_vec();
    for j in pick(original.len(), config.per_tensor, &mut rng) {
        let mut eval = |delta: f64| {
            let mut data = original.clone();
            data[j] += delta;
            loss_and_signature(&frozen, &Tensor::from_vec(plain.shape(), data)?, target)
        };
        probe("input", j, analytic[j], &mut eval)?;
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        pool: net.config().pool.to_string(),
        entries,
        skipped,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-6), 0.0);
        assert_eq!(rel_error(2.0, 1.0, 1e-6), 0.5);
        assert_eq!(rel_error(0.0, 1e-9, 1e-6), 1e-3);
    }
}
