use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlmsConfig {
    pub taps: usize,
    /// Normalized step size μ in (0, 2).
    pub step_size: f64,
    /// Regularization δ added to the input energy. Keeps updates bounded when a
    /// far-end pause leaves only a few nonzero samples in the tap window.
    pub regularization: f64,
}

impl Default for NlmsConfig {
    fn default() -> Self {
        NlmsConfig {
            taps: 512,
            step_size: 0.5,
            regularization: 1e-2,
        }
    }
}

impl NlmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size < 2.0) {
            return Err(Error::Contract(format!(
                "NLMS step size {} outside (0, 2)",
                self.step_size
            )));
        }
        if self.regularization.is_nan() || self.regularization <= 0.0 {
            return Err(Error::Contract(format!(
                "NLMS regularization {} must be positive",
                self.regularization
            )));
        }
        if self.taps == 0 {
            return Err(Error::Contract("NLMS needs at least one tap".into()));
        }
        Ok(())
    }
}

/// Sample-by-sample NLMS from zero weights; returns the error signal
/// `e(n) = mic(n) − wᵀx_n`.
pub fn nlms_cancel(far: &[f64], mic: &[f64], cfg: &NlmsConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if far.len() != mic.len() {
        return Err(Error::dim(
            "nlms_cancel",
            format!("far {} vs mic {}", far.len(), mic.len()),
        ));
    }
    if cfg.taps > far.len() {
        return Err(Error::Contract(format!(
            "{} taps exceed {} far-end samples",
            cfg.taps,
            far.len()
        )));
    }
    let taps = cfg.taps;
    // history[n..n+taps] holds far(n−taps+1) ..= far(n), oldest first
    let mut history = vec![0.0; taps - 1];
    history.extend_from_slice(far);
    let mut w = vec![0.0; taps];
    let mut residual = Vec::with_capacity(mic.len());
    for (n, &m) in mic.iter().enumerate() {
        let x = &history[n..n + taps];
        let e = m - dot(&w, x);
        let energy = dot(x, x);
        let g = cfg.step_size * e / (energy + cfg.regularization);
        for (wk, &xk) in w.iter_mut().zip(x) {
            *wk += g * xk;
        }
        residual.push(e);
    }
    Ok(residual)
}
