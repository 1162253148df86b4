//! Learning-rate adaptation on top of [`crate::cmaes`].
//!
//! Each generation the unit-rate CMA-ES increments are expressed in the local
//! coordinates of the current search distribution, their signal-to-noise ratio
//! is tracked with exponential moving averages, and the mean and covariance
//! learning rates are nudged so that the observed SNR stays near `alpha` times
//! the rate. After the step the step size is rescaled by the change of the
//! mean rate so the effective mean step stays put.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cmaes::{apply_update, compute_update, Candidate, CmaState};
use crate::error::{Error, Result};

/// Lower clamp on both learning rates.
pub const MIN_RATE: f64 = 1e-8;
/// Reported SNR when the update is noise-free to working precision.
pub const SNR_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LraParams {
    /// Target SNR per unit learning rate.
    pub alpha: f64,
    /// Cap on the per-step log change of a rate.
    pub beta: f64,
    /// Per-step log change scale, multiplied by the current rate.
    pub gamma: f64,
    /// Moving-average factor of the mean-update estimator at rate 1.
    pub ema_mean: f64,
    /// Moving-average factor of the covariance-update estimator at rate 1.
    pub ema_cov: f64,
    /// Rescale σ by `old_rate / new_rate` of the mean after each step.
    pub step_size_correction: bool,
    /// When false the rates keep their current values; the estimators still run.
    pub adapt_rates: bool,
}

impl Default for LraParams {
    fn default() -> Self {
        LraParams {
            alpha: 1.4,
            beta: 0.4,
            gamma: 0.1,
            ema_mean: 0.1,
            ema_cov: 0.03,
            step_size_correction: true,
            adapt_rates: true,
        }
    }
}

impl LraParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("ema_mean", self.ema_mean), ("ema_cov", self.ema_cov)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Moving averages `E` of the normalized update and `V` of its squared norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrEstimator {
    pub avg: DVector<f64>,
    pub avg_sq_norm: f64,
}

impl SnrEstimator {
    pub fn new(len: usize) -> Self {
        SnrEstimator {
            avg: DVector::zeros(len),
            avg_sq_norm: 0.0,
        }
    }

    /// Folds `update` in with factor `ema` and returns the SNR estimate
    /// `(‖E‖² − ema/(2−ema)·V) / (V − ‖E‖²)`, floored at 0 and capped at
    /// [`SNR_CAP`] when the denominator vanishes.
    pub fn update(&mut self, update: &DVector<f64>, ema: f64) -> Result<f64> {
        if update.len() != self.avg.len() {
            return Err(Error::mismatch(format!(
                "estimator tracks {} components, got {}",
                self.avg.len(),
                update.len()
            )));
        }
        if !(ema > 0.0 && ema <= 1.0) {
            return Err(Error::invalid(format!(
                "moving-average factor must lie in (0, 1], got {ema}"
            )));
        }
        if update.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite update fed to SNR estimator"));
        }
        self.avg = &self.avg * (1.0 - ema) + update * ema;
        self.avg_sq_norm = (1.0 - ema) * self.avg_sq_norm + ema * update.norm_squared();
        let sq = self.avg.norm_squared();
        let num = sq - ema / (2.0 - ema) * self.avg_sq_norm;
        if num <= 0.0 {
            return Ok(0.0);
        }
        let den = self.avg_sq_norm - sq;
        if den <= 0.0 {
            return Ok(SNR_CAP);
        }
        Ok((num / den).min(SNR_CAP))
    }
}

/// One multiplicative rate update:
/// `δ·exp(min(γδ, β)·clip(η/(αδ) − 1, −1, 1))`, clamped to `[MIN_RATE, 1]`.
pub fn adapt_rate(rate: f64, snr: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    let rel = (snr / (alpha * rate) - 1.0).clamp(-1.0, 1.0);
    let next = rate * ((gamma * rate).min(beta) * rel).exp();
    next.clamp(MIN_RATE, 1.0)
}

/// `σ · old_rate / new_rate`.
pub fn correct_step_size(sigma_next: f64, old_rate: f64, new_rate: f64) -> Result<f64> {
    if !(sigma_next > 0.0 && old_rate > 0.0 && new_rate > 0.0) {
        return Err(Error::invalid(format!(
            "step-size correction needs positive inputs, got σ={sigma_next}, old={old_rate}, new={new_rate}"
        )));
    }
    Ok(old_rate / new_rate * sigma_next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LraState {
    pub rate_mean: f64,
    pub rate_cov: f64,
    pub mean_est: SnrEstimator,
    pub cov_est: SnrEstimator,
    pub params: LraParams,
    pub last_snr_mean: f64,
    pub last_snr_cov: f64,
}

impl LraState {
    pub fn new(dim: usize, params: LraParams) -> Result<Self> {
        params.validate()?;
        Ok(LraState {
            rate_mean: 1.0,
            rate_cov: 1.0,
            mean_est: SnrEstimator::new(dim),
            cov_est: SnrEstimator::new(dim * dim),
            params,
            last_snr_mean: 0.0,
            last_snr_cov: 0.0,
        })
    }
}

/// One LRA-CMA generation: unit-rate increments, SNR estimation in local
/// coordinates, rate adaptation, scaled update and step-size correction.
pub fn lra_step(
    cma: &CmaState,
    lra: &LraState,
    candidates: &[Candidate],
) -> Result<(CmaState, LraState)> {
    let delta = compute_update(cma, candidates)?;
    let inv_sqrt = cma.inv_sqrt_cov()?;
    let d = cma.dim();

    // whitened by the distribution that produced the candidates
    let local_mean = &inv_sqrt * &delta.mean_shift / cma.sigma;
    let local_cov = &inv_sqrt * delta.sigma_increment(cma) * &inv_sqrt / (cma.sigma * cma.sigma);
    let local_cov = DVector::from_column_slice(local_cov.as_slice()) / std::f64::consts::SQRT_2;
    debug_assert_eq!(local_cov.len(), d * d);

    let p = lra.params;
    let mut next = lra.clone();
    next.last_snr_mean = next
        .mean_est
        .update(&local_mean, p.ema_mean * lra.rate_mean)?;
    next.last_snr_cov = next.cov_est.update(&local_cov, p.ema_cov * lra.rate_cov)?;
    if p.adapt_rates {
        next.rate_mean = adapt_rate(lra.rate_mean, next.last_snr_mean, p.alpha, p.beta, p.gamma);
        next.rate_cov = adapt_rate(lra.rate_cov, next.last_snr_cov, p.alpha, p.beta, p.gamma);
    }

    let mut cma_next = apply_update(cma, &delta, next.rate_mean, next.rate_cov)?;
    if p.step_size_correction {
        cma_next.sigma = correct_step_size(cma_next.sigma, lra.rate_mean, next.rate_mean)?;
    }
    Ok((cma_next, next))
}
