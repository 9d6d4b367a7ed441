//! Generalized Gaussian noise model.
//!
//! A zero-mean generalized Gaussian with scale `alpha` and shape `beta` has
//! density
//!
//! ```text
//! p(x) = beta / (2 alpha Gamma(1/beta)) * exp(-(|x| / alpha)^beta)
//! ```
//!
//! `beta = 2` is a Gaussian, `beta = 1` a Laplacian, and `beta < 1` gives
//! heavier tails. Its standard deviation is
//! `alpha * sqrt(Gamma(3/beta) / Gamma(1/beta))`.
//!
//! The negative log-likelihood below is the canonical form of that density
//! with the full normalisation constant, so loss values are comparable across
//! runs. The residual is smoothed as `sqrt(d^2 + eps)` to keep the derivative
//! with respect to the prediction defined at zero residual.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::seed;

/// Smallest admissible shape parameter. `Gamma(3/beta)` overflows quickly
/// below this.
pub const BETA_MIN: f64 = 0.3;
/// Largest admissible shape parameter.
pub const BETA_MAX: f64 = 10.0;
/// Residual smoothing constant.
pub const RESIDUAL_EPS: f64 = 1e-12;

/// Per-pixel scale (`alpha`) and shape (`beta`) maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgdParams {
    pub alpha: Image2D,
    pub beta: Image2D,
}

impl GgdParams {
    pub fn new(alpha: Image2D, beta: Image2D) -> Result<Self> {
        let p = Self { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn constant(height: usize, width: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(
            Image2D::filled(height, width, alpha),
            Image2D::filled(height, width, beta),
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        self.alpha.shape()
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.ensure_same_shape(&self.beta)?;
        for &a in self.alpha.as_slice() {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::invalid(format!("alpha must be positive, got {a}")));
            }
        }
        for &b in self.beta.as_slice() {
            check_beta(b)?;
        }
        Ok(())
    }
}

fn check_beta(b: f64) -> Result<()> {
    if !(BETA_MIN..=BETA_MAX).contains(&b) {
        return Err(Error::invalid(format!(
            "beta {b} outside [{BETA_MIN}, {BETA_MAX}]"
        )));
    }
    Ok(())
}

/// `sqrt(Gamma(3/beta) / Gamma(1/beta))`, the std of a unit-scale GGD.
pub fn sigma_factor(beta: f64) -> f64 {
    (0.5 * (ln_gamma(3.0 / beta) - ln_gamma(1.0 / beta))).exp()
}

pub fn effective_sigma_scalar(alpha: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(alpha * sigma_factor(beta))
}

/// Per-pixel effective standard deviation of the GGD.
pub fn effective_sigma(params: &GgdParams) -> Result<Image2D> {
    params.validate()?;
    params
        .alpha
        .zip_map(&params.beta, |a, b| a * sigma_factor(b))
}

/// Per-pixel negative log-likelihood.
#[inline]
pub fn nll_pixel(target: f64, pred: f64, alpha: f64, beta: f64) -> f64 {
    let d = target - pred;
    let r = (d * d + RESIDUAL_EPS).sqrt();
    (r / alpha).powf(beta) + alpha.ln() + ln_gamma(1.0 / beta) - beta.ln() + std::f64::consts::LN_2
}

/// Partial derivatives of [`nll_pixel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllGrad {
    pub d_pred: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

#[inline]
pub fn nll_pixel_grad(target: f64, pred: f64, alpha: f64, beta: f64) -> NllGrad {
    let d = target - pred;
    let r = (d * d + RESIDUAL_EPS).sqrt();
    let z = r / alpha;
    let zb = z.powf(beta);
    // d zb / d r = beta * zb / r
    let d_r = beta * zb / r;
    NllGrad {
        d_pred: -d_r * d / r,
        d_alpha: (1.0 - beta * zb) / alpha,
        d_beta: zb * z.ln() - digamma(1.0 / beta) / (beta * beta) - 1.0 / beta,
    }
}

/// Loss map and its pixel mean.
#[derive(Debug, Clone)]
pub struct NllMap {
    pub map: Image2D,
    pub mean: f64,
}

pub fn ggd_nll(target: &Image2D, pred: &Image2D, params: &GgdParams) -> Result<NllMap> {
    target.ensure_same_shape(pred)?;
    target.ensure_same_shape(&params.alpha)?;
    params.validate()?;
    let (h, w) = target.shape();
    let data: Vec<f64> = (0..target.len())
        .map(|k| {
            nll_pixel(
                target.as_slice()[k],
                pred.as_slice()[k],
                params.alpha.as_slice()[k],
                params.beta.as_slice()[k],
            )
        })
        .collect();
    let map = Image2D::new(h, w, data)?;
    let mean = map.mean();
    Ok(NllMap { map, mean })
}

/// Gradient maps of the *mean* NLL with respect to prediction, alpha and beta.
#[derive(Debug, Clone)]
pub struct NllGradMaps {
    pub d_pred: Image2D,
    pub d_alpha: Image2D,
    pub d_beta: Image2D,
}

pub fn ggd_nll_grad(target: &Image2D, pred: &Image2D, params: &GgdParams) -> Result<NllGradMaps> {
    target.ensure_same_shape(pred)?;
    target.ensure_same_shape(&params.alpha)?;
    params.validate()?;
    let (h, w) = target.shape();
    let n = target.len() as f64;
    let mut dp = Vec::with_capacity(target.len());
    let mut da = Vec::with_capacity(target.len());
    let mut db = Vec::with_capacity(target.len());
    for k in 0..target.len() {
        let g = nll_pixel_grad(
            target.as_slice()[k],
            pred.as_slice()[k],
            params.alpha.as_slice()[k],
            params.beta.as_slice()[k],
        );
        dp.push(g.d_pred / n);
        da.push(g.d_alpha / n);
        db.push(g.d_beta / n);
    }
    Ok(NllGradMaps {
        d_pred: Image2D::new(h, w, dp)?,
        d_alpha: Image2D::new(h, w, da)?,
        d_beta: Image2D::new(h, w, db)?,
    })
}

/// One zero-mean GGD draw via the Gamma power transform.
pub fn sample_scalar<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(1.0 / beta, 1.0)
        .expect("shape checked by caller")
        .sample(rng);
    let magnitude = alpha * g.powf(1.0 / beta);
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// Independent per-pixel zero-mean GGD noise, deterministic in `seed`.
pub fn ggd_sample(shape: (usize, usize), params: &GgdParams, seed: u64) -> Result<Image2D> {
    params.validate()?;
    if params.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: params.shape(),
        });
    }
    let mut rng = seed::rng(seed);
    let data = params
        .alpha
        .as_slice()
        .iter()
        .zip(params.beta.as_slice())
        .map(|(&a, &b)| sample_scalar(a, b, &mut rng))
        .collect();
    Image2D::new(shape.0, shape.1, data)
}
