//! Finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error used by every check: `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
        None,
    )?;
    Ok(report.max_rel_error)
}

/// How the numeric derivative of one element is estimated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Difference {
    /// `(f(x+h) − f(x−h)) / 2h` with a fixed step.
    Central(f64),
    /// Central differences at `initial`, `initial/2`, ... (`levels` steps),
    /// returning the middle of the three consecutive steps that agree best.
    /// The step is chosen per element without looking at the analytic
    /// gradient, so derivatives near the round-off floor of `f` get large
    /// steps while elements next to a kink get steps small enough to miss it.
    Ladder { initial: f64, levels: usize },
}

/// Multi-input variant. With `sample = Some((k, seed))` only `k` randomly
/// chosen elements per input are perturbed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    sample_per_input: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, Difference::Central(eps), sample_per_input)
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    difference: Difference,
    sample_per_input: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| evaluate(&f, values);
    let (value, analytic) = analytic_gradients(&f, inputs)?;
    let noise = round_off(value);
    let mut rng = sample_per_input.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let indices: Vec<usize> = match (sample_per_input, rng.as_mut()) {
            (Some((k, _)), Some(rng)) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = input.data()[idx];
            let mut central = |h: f64| -> Result<f64> {
                work[i].data_mut()[idx] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[idx] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[idx] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = match difference {
                Difference::Central(h) => central(h)?,
                Difference::Ladder { initial, levels } => {
                    ladder(&mut central, initial, levels, noise)?
                }
            };
            let err = relative_error(analytic[i].data()[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, idx);
            }
        }
    }
    Ok(report)
}

/// Directional variant. For each input, `directions` unit directions
/// `v ∝ ∇f/|∇f| + r` with `r` a random unit vector whose components are all
/// nonzero, comparing the difference quotient of `f(x + h·v)` with `∇f · v`.
/// Every element contributes through `r`, and the gradient term keeps
/// `∇f · v` near `|∇f|/√2` so the quotient stays far above the round-off
/// floor of `f` even at the small steps needed to stay clear of kinks.
/// A gradient error shows up unless it happens to be orthogonal to every
/// random `r`. `worst` holds `(input, direction)`.
pub fn grad_check_directional<F>(
    f: F,
    inputs: &[Tensor],
    difference: Difference,
    directions: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (value, analytic) = analytic_gradients(&f, inputs)?;
    let noise = round_off(value);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        for d in 0..directions {
            let mut r: Vec<f64> = (0..input.numel())
                .map(|_| rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            normalize(&mut r);
            let mut v = analytic[i].data().to_vec();
            normalize(&mut v);
            v.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            normalize(&mut v);
            let expected: f64 = analytic[i].data().iter().zip(&v).map(|(g, x)| g * x).sum();
            let mut central = |h: f64| -> Result<f64> {
                let shift = |work: &mut [Tensor], sign: f64| {
                    for ((w, x), dir) in work[i].data_mut().iter_mut().zip(input.data()).zip(&v) {
                        *w = x + sign * h * dir;
                    }
                };
                shift(&mut work, 1.0);
                let plus = evaluate(&f, &work)?;
                shift(&mut work, -1.0);
                let minus = evaluate(&f, &work)?;
                work[i] = input.clone();
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = match difference {
                Difference::Central(h) => central(h)?,
                Difference::Ladder { initial, levels } => {
                    ladder(&mut central, initial, levels, noise)?
                }
            };
            let err = relative_error(expected, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, d);
            }
        }
    }
    Ok(report)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn evaluate<F>(f: &F, values: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)
}

fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = scalar(&tape, out)?;
    tape.backward(out)?;
    Ok((
        value,
        vars.iter()
            .map(|&v| tape.grad(v).expect("param leaf"))
            .collect(),
    ))
}

/// One ulp-scale unit of the value, an estimate of the evaluation's round-off.
fn round_off(value: f64) -> f64 {
    f64::EPSILON * value.abs()
}

/// Plateau search over halving steps. A window is scored by its spread plus
/// `noise / h`, the round-off a difference of step `h` picks up when `f`
/// carries absolute error `noise`; without that term a window of tiny,
/// noise-dominated steps could agree by chance. Kink contamination shrinks
/// steadily with the step, so three mutually agreeing values mark a step range
/// that is past the kink and above the round-off floor.
fn ladder(
    central: &mut dyn FnMut(f64) -> Result<f64>,
    initial: f64,
    levels: usize,
    noise: f64,
) -> Result<f64> {
    let mut h = initial;
    let mut values = Vec::with_capacity(levels.max(3));
    for _ in 0..levels.max(3) {
        values.push((h, central(h)?));
        h /= 2.0;
    }
    let mut best = values[1].1;
    let mut best_score = f64::INFINITY;
    for w in values.windows(3) {
        let (lo, hi) = w
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, d)| {
                (lo.min(d), hi.max(d))
            });
        let score = (hi - lo) + noise / w[2].0;
        if score < best_score {
            best_score = score;
            best = w[1].1;
        }
    }
    Ok(best)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad check needs a scalar function, got {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}
