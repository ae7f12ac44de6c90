use std::ops::Range;

use crate::error::{Error, Result};

pub const ERLE_CAP_DB: f64 = 100.0;
/// Residual power below this counts as perfect cancellation.
pub const POWER_FLOOR: f64 = 1e-20;

/// `10·log10(P_mic / P_residual)` over the union of `regions`, capped at 100 dB.
pub fn erle(mic: &[f64], residual: &[f64], regions: &[Range<usize>]) -> Result<f64> {
    if mic.len() != residual.len() {
        return Err(Error::dim(
            "erle",
            format!("mic {} vs residual {}", mic.len(), residual.len()),
        ));
    }
    let mut p_mic = 0.0;
    let mut p_res = 0.0;
    let mut n = 0usize;
    for r in regions {
        if r.end > mic.len() || r.start > r.end {
            return Err(Error::dim(
                "erle",
                format!("region {r:?} outside {} samples", mic.len()),
            ));
        }
        p_mic += mic[r.clone()].iter().map(|v| v * v).sum::<f64>();
        p_res += residual[r.clone()].iter().map(|v| v * v).sum::<f64>();
        n += r.len();
    }
    if n == 0 {
        return Err(Error::Contract(
            "ERLE needs a nonempty single-talk region".into(),
        ));
    }
    let (p_mic, p_res) = (p_mic / n as f64, p_res / n as f64);
    if p_res < POWER_FLOOR {
        return Ok(ERLE_CAP_DB);
    }
    Ok((10.0 * (p_mic.max(POWER_FLOOR) / p_res).log10()).min(ERLE_CAP_DB))
}

/// dB of the mean power ratio across items, the alternative to averaging dB values.
pub fn pooled_erle_db(values_db: &[f64]) -> Option<f64> {
    if values_db.is_empty() {
        return None;
    }
    let mean = values_db.iter().map(|v| 10f64.powf(v / 10.0)).sum::<f64>() / values_db.len() as f64;
    Some(10.0 * mean.log10())
}
