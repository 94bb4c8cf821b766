//! Density-distance focal loss and total-loss aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const CONFIDENCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdflParams {
    /// Gaussian mean over the occupancy ratio `n_v / n_max`.
    pub mu: f64,
    /// Gaussian scale; also used as the exponent scale.
    pub sigma: f64,
    pub gamma: f64,
    pub n_max: usize,
    /// Largest centroid range in the scene (meters).
    pub m_d: f64,
}

impl Default for DdflParams {
    fn default() -> Self {
        Self {
            mu: 0.5,
            sigma: 0.5,
            gamma: 2.0,
            n_max: 1,
            m_d: 1.0,
        }
    }
}

impl DdflParams {
    pub fn for_scene(n_max: usize, m_d: f64) -> Self {
        Self {
            n_max: n_max.max(1),
            m_d: if m_d > 0.0 { m_d } else { 1.0 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::arg("sigma", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::arg("gamma", "must be non-negative"));
        }
        if self.n_max == 0 {
            return Err(Error::arg("n_max", "must be at least 1"));
        }
        if !(self.m_d > 0.0) {
            return Err(Error::arg("m_d", "must be positive"));
        }
        Ok(())
    }
}

/// Density weight `exp(-(n_v/n_max - mu)^2 / (2 sigma^2))`, in (0, 1].
pub fn m_den<T: Real>(n_v: usize, params: &DdflParams) -> T {
    let x = n_v as f64 / params.n_max as f64 - params.mu;
    T::from_f64_lossy((-(x * x) / (2.0 * params.sigma * params.sigma)).exp())
}

/// Distance weight `exp(d / m_d) / e`, rising from 1/e at the origin to 1 at `m_d`.
pub fn m_dis<T: Real>(d: f64, params: &DdflParams) -> Result<T> {
    if !(d >= 0.0) || d > params.m_d * (1.0 + 1e-12) {
        return Err(Error::arg("d", format!("{d} outside [0, {}]", params.m_d)));
    }
    Ok(T::from_f64_lossy((d / params.m_d - 1.0).exp()))
}

/// Focal term `-(1 - p_t)^gamma ln(p_t)` scaled by `weight`, with its derivative
/// with respect to the confidence.
///
/// The confidence is clamped to `[1e-7, 1 - 1e-7]`; the returned derivative
/// is evaluated at the clamped value.
pub fn weighted_focal<T: Real>(confidence: T, label: bool, gamma: f64, weight: T) -> (T, T) {
    let c = confidence
        .to_f64_lossy()
        .clamp(CONFIDENCE_CLAMP, 1.0 - CONFIDENCE_CLAMP);
    let p = if label { c } else { 1.0 - c };
    let q = 1.0 - p;
    let ln_p = p.ln();
    let loss = -q.powf(gamma) * ln_p;
    let d_dp = if gamma == 0.0 {
        -1.0 / p
    } else {
        gamma * q.powf(gamma - 1.0) * ln_p - q.powf(gamma) / p
    };
    let d_dc = if label { d_dp } else { -d_dp };
    let w = weight.to_f64_lossy();
    (T::from_f64_lossy(loss * w), T::from_f64_lossy(d_dc * w))
}

/// Per-block DDFL: focal term times density and distance weights.
pub fn ddfl<T: Real>(confidence: T, label: bool, n_v: usize, d: f64, params: &DdflParams) -> Result<(T, T)> {
    let w = m_den::<f64>(n_v, params) * m_dis::<f64>(d, params)?;
    Ok(weighted_focal(confidence, label, params.gamma, T::from_f64_lossy(w)))
}

/// Unweighted sum of the four loss terms. Detector terms default to zero
/// when no detection head is attached.
pub fn total_loss(ddfl_sum: f64, l_cb: f64, l_cls: f64, l_box: f64) -> Result<f64> {
    for (name, v) in [("ddfl", ddfl_sum), ("l_cb", l_cb), ("l_cls", l_cls), ("l_box", l_box)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Argument {
                arg: "total_loss",
                reason: format!("term {name} = {v} must be finite and non-negative"),
            });
        }
    }
    Ok(ddfl_sum + l_cb + l_cls + l_box)
}
