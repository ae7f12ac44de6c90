use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(len: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Rescales `grads` so their L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Geometric interpolation from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_schedule(epoch: usize, epochs_max: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if epoch >= epochs_max {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside 0..{epochs_max}"
        )));
    }
    if epoch == 0 {
        return Ok(lr_start);
    }
    if epoch == epochs_max - 1 {
        return Ok(lr_end);
    }
    let frac = epoch as f64 / (epochs_max - 1) as f64;
    Ok(lr_start * (lr_end / lr_start).powf(frac))
}

/// True iff none of the last `patience` validation losses strictly improved on
/// the best loss before them.
pub fn early_stop_check(val_losses: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut best_idx = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < best {
            best = v;
            best_idx = Some(i);
        }
    }
    match best_idx {
        Some(i) => val_losses.len() - 1 - i >= patience,
        None => val_losses.len() >= patience && !val_losses.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }

    #[test]
    fn lr_rejects_out_of_range_epoch() {
        assert!(lr_schedule(200, 200, 1e-4, 1e-8).is_err());
        assert_eq!(lr_schedule(0, 1, 1e-4, 1e-8).unwrap(), 1e-4);
    }
}
