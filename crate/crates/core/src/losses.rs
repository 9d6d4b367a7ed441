//! Training objective: least-squares adversarial terms, the GGD fidelity
//! NLL and the residual consistency penalty.
//!
//! Generator: `L_G = 1/2 mean((D(fake) - 1)^2) + l_fid * mean(NLL) + l_res * L_res`.
//! Discriminator: `L_D = 1/2 mean((D(real) - 1)^2) + 1/2 mean(D(fake)^2)`.
//! Both adversarial terms are non-negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{box_blur_adjoint, local_residual, Image2D};

/// Weights of the fidelity and residual terms relative to the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_fidelity: f64,
    pub lambda_residual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fidelity: 0.8,
            lambda_residual: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_fidelity", self.lambda_fidelity),
            ("lambda_residual", self.lambda_residual),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn ensure_finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(component))
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// Mean absolute difference between the high-frequency residuals of `pred`
/// and `target`.
pub fn residual_consistency_loss(pred: &Image2D, target: &Image2D, kernel: usize) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let rp = local_residual(pred, kernel)?;
    let rt = local_residual(target, kernel)?;
    Ok(mean(
        rp.as_slice()
            .iter()
            .zip(rt.as_slice())
            .map(|(a, b)| (a - b).abs()),
    ))
}

/// Gradient of [`residual_consistency_loss`] with respect to `pred`
/// (sign subgradient, zero where the residuals agree).
pub fn residual_consistency_grad(pred: &Image2D, target: &Image2D, kernel: usize) -> Result<Image2D> {
    pred.ensure_same_shape(target)?;
    let rp = local_residual(pred, kernel)?;
    let rt = local_residual(target, kernel)?;
    let n = pred.len() as f64;
    let s = rp.zip_map(&rt, |a, b| {
        let d = a - b;
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    })?;
    let bt = box_blur_adjoint(&s, kernel)?;
    s.zip_map(&bt, |a, b| a - b)
}

/// Generator loss with its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub adversarial: f64,
    pub nll: f64,
    pub residual: f64,
    pub total: f64,
}

/// Compose the generator objective from discriminator scores on fakes, the
/// per-pixel NLL values and the residual term.
pub fn generator_loss(
    d_scores_fake: &[f64],
    nll_map: &[f64],
    residual_term: f64,
    weights: &LossWeights,
) -> Result<GeneratorLoss> {
    if d_scores_fake.is_empty() || nll_map.is_empty() {
        return Err(Error::invalid("generator loss needs non-empty inputs"));
    }
    let adversarial = ensure_finite(
        "adversarial",
        0.5 * mean(d_scores_fake.iter().map(|s| (s - 1.0).powi(2))),
    )?;
    let nll = ensure_finite("nll", mean(nll_map.iter().copied()))?;
    let residual = ensure_finite("residual", residual_term)?;
    let total = ensure_finite(
        "total",
        adversarial + weights.lambda_fidelity * nll + weights.lambda_residual * residual,
    )?;
    Ok(GeneratorLoss {
        adversarial,
        nll,
        residual,
        total,
    })
}

/// d/ds of the generator adversarial term for each score.
pub fn generator_adversarial_grad(d_scores_fake: &[f64]) -> Vec<f64> {
    let n = d_scores_fake.len() as f64;
    d_scores_fake.iter().map(|s| (s - 1.0) / n).collect()
}

pub fn discriminator_loss(d_scores_real: &[f64], d_scores_fake: &[f64]) -> Result<f64> {
    if d_scores_real.is_empty() || d_scores_fake.is_empty() {
        return Err(Error::invalid("discriminator loss needs non-empty inputs"));
    }
    if d_scores_real.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("d_real"));
    }
    if d_scores_fake.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("d_fake"));
    }
    let real = 0.5 * mean(d_scores_real.iter().map(|s| (s - 1.0).powi(2)));
    let fake = 0.5 * mean(d_scores_fake.iter().map(|s| s * s));
    ensure_finite("discriminator", real + fake)
}

/// Gradients of [`discriminator_loss`] with respect to real and fake scores.
pub fn discriminator_grads(d_scores_real: &[f64], d_scores_fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nr = d_scores_real.len() as f64;
    let nf = d_scores_fake.len() as f64;
    (
        d_scores_real.iter().map(|s| (s - 1.0) / nr).collect(),
        d_scores_fake.iter().map(|s| s / nf).collect(),
    )
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn img() -> impl Strategy<Value = Image2D> {
        proptest::collection::vec(0.0f64..1.0, 64).prop_map(|d| Image2D::new(8, 8, d).unwrap())
    }

    proptest! {
        #[test]
        fn residual_loss_symmetric_and_nonnegative(a in img(), b in img()) {
            let ab = residual_consistency_loss(&a, &b, 3).unwrap();
            let ba = residual_consistency_loss(&b, &a, 3).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-15);
        }

        #[test]
        fn generator_loss_linear_in_lambdas(f in 0.0f64..2.0, r in 0.0f64..2.0, n in 0.0f64..5.0, res in 0.0f64..1.0) {
            let base = generator_loss(&[0.3], &[n], res, &LossWeights { lambda_fidelity: 0.0, lambda_residual: 0.0 }).unwrap();
            let l = generator_loss(&[0.3], &[n], res, &LossWeights { lambda_fidelity: f, lambda_residual: r }).unwrap();
            prop_assert!((l.total - (base.total + f * n + r * res)).abs() < 1e-12);
        }
    }
}
