//! Noise-level grids: the polynomial sampling schedule, log-uniform
//! evaluation grids for diagnostic curves, and the flow-matching time
//! conversion t = 1/(1+sigma).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly decreasing sampling schedule from `sigma_max` down to `sigma_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    sigma_max: f64,
    sigma_min: f64,
    rho: f64,
}

impl NoiseSchedule {
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn n_steps(&self) -> usize {
        self.sigmas.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

/// Default schedule curvature; reproduces the standard 18-knot table for
/// (80, 0.002) to printed precision.
pub const DEFAULT_RHO: f64 = 7.0;

/// Polynomial schedule:
/// `sigma_i = (sigma_max^(1/rho) + i/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`.
pub fn edm_schedule(sigma_max: f64, sigma_min: f64, n_steps: usize, rho: f64) -> Result<NoiseSchedule> {
    if !(sigma_max > sigma_min && sigma_min > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "schedule requires sigma_max > sigma_min > 0, got ({sigma_max}, {sigma_min})"
        )));
    }
    if n_steps < 2 {
        return Err(Error::InvalidParameter(format!(
            "schedule requires n_steps >= 2, got {n_steps}"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    let inv_rho = 1.0 / rho;
    let hi = sigma_max.powf(inv_rho);
    let lo = sigma_min.powf(inv_rho);
    let last = (n_steps - 1) as f64;
    let mut sigmas: Vec<f64> = (0..n_steps)
        .map(|i| (hi + (i as f64 / last) * (lo - hi)).powf(rho))
        .collect();
    // pin the endpoints exactly
    sigmas[0] = sigma_max;
    sigmas[n_steps - 1] = sigma_min;
    Ok(NoiseSchedule {
        sigmas,
        sigma_max,
        sigma_min,
        rho,
    })
}

/// Strictly increasing log-uniform evaluation grid for diagnostic curves,
/// decoupled from the sampling schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaGrid {
    sigmas: Vec<f64>,
}

impl SigmaGrid {
    pub fn log_uniform(sigma_lo: f64, sigma_hi: f64, n_points: usize) -> Result<Self> {
        if !(sigma_hi > sigma_lo && sigma_lo > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grid requires sigma_hi > sigma_lo > 0, got ({sigma_lo}, {sigma_hi})"
            )));
        }
        if n_points < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid requires at least 2 points, got {n_points}"
            )));
        }
        let llo = sigma_lo.ln();
        let lhi = sigma_hi.ln();
        let last = (n_points - 1) as f64;
        let mut sigmas: Vec<f64> = (0..n_points)
            .map(|i| (llo + (i as f64 / last) * (lhi - llo)).exp())
            .collect();
        sigmas[0] = sigma_lo;
        sigmas[n_points - 1] = sigma_hi;
        Ok(Self { sigmas })
    }

    pub fn from_values(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 1 || sigmas[0] <= 0.0 {
            return Err(Error::InvalidParameter("grid must be positive".into()));
        }
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// Flow-matching time of a noise level: t = 1/(1+sigma).
pub fn sigma_to_t(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma_to_t requires sigma > 0, got {sigma}")));
    }
    Ok(1.0 / (1.0 + sigma))
}

/// Noise level of a flow-matching time: sigma = (1-t)/t.
pub fn t_to_sigma(t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("t_to_sigma requires t in (0,1), got {t}")));
    }
    Ok((1.0 - t) / t)
}
