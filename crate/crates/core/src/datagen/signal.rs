use std::ops::Range;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::wav::read_wav;
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Label window: 10 ms at 16 kHz.
pub const LABEL_WINDOW: usize = 160;
/// Windows whose near-end power is below this level count as single-talk.
pub const SILENCE_DBFS: f64 = -60.0;

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Mean square over the union of `regions`; zero when the regions are empty.
pub fn region_power(x: &[f64], regions: &[Range<usize>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for r in regions {
        let r = r.start.min(x.len())..r.end.min(x.len());
        sum += x[r.clone()].iter().map(|v| v * v).sum::<f64>();
        n += r.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn to_db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RirSource {
    /// Exponentially decaying white noise.
    Synthetic { t60: f64, length: usize, seed: u64 },
    /// A measured response stored as a WAV file.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RirSpec {
    pub source: RirSource,
    pub sample_rate: u32,
}

impl RirSpec {
    pub fn synthetic(t60: f64, length: usize, seed: u64) -> Self {
        RirSpec {
            source: RirSource::Synthetic { t60, length, seed },
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn realize(&self) -> Result<Vec<f64>> {
        let g = match &self.source {
            RirSource::Synthetic { t60, length, seed } => {
                synth_rir(*t60, *length, *seed, self.sample_rate)?
            }
            RirSource::File { path } => {
                let (g, rate) = read_wav(path)?;
                if rate != self.sample_rate {
                    return Err(Error::Config(format!(
                        "RIR {} is {rate} Hz, expected {}",
                        path.display(),
                        self.sample_rate
                    )));
                }
                g
            }
        };
        let energy: f64 = g.iter().map(|v| v * v).sum();
        if !(energy.is_finite() && energy > 0.0) {
            return Err(Error::Contract(format!(
                "RIR energy {energy} is not finite and positive"
            )));
        }
        Ok(g)
    }
}

/// `g(n) = w(n)·exp(−3·ln10·n / (fs·T60))` with seeded unit-variance white
/// noise `w`, scaled to unit energy. The envelope reaches −60 dB at `T60`.
pub fn synth_rir(t60: f64, length: usize, seed: u64, sample_rate: u32) -> Result<Vec<f64>> {
    if !(t60 > 0.0 && t60.is_finite()) {
        return Err(Error::Contract(format!("T60 must be positive, got {t60}")));
    }
    if length == 0 {
        return Err(Error::Contract("RIR length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = -3.0 * std::f64::consts::LN_10 / (sample_rate as f64 * t60);
    let mut g: Vec<f64> = (0..length)
        .map(|n| {
            let w: f64 = StandardNormal.sample(&mut rng);
            w * (decay * n as f64).exp()
        })
        .collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    g.iter_mut().for_each(|v| *v /= norm);
    Ok(g)
}

/// Clamps to `±clip_ratio·max|x|`. Silent input comes back unchanged.
pub fn hard_clip(x: &[f64], clip_ratio: f64) -> Result<Vec<f64>> {
    if !(clip_ratio > 0.0 && clip_ratio <= 1.0) {
        return Err(Error::Contract(format!(
            "clip ratio {clip_ratio} outside (0, 1]"
        )));
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let theta = clip_ratio * peak;
    Ok(x.iter().map(|v| v.clamp(-theta, theta)).collect())
}

/// Constants of the memoryless loudspeaker curve
/// `γ·(2/(1+exp(−a·b)) − 1)` with `b = p₁x + p₂x²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmoidShape {
    pub linear: f64,
    pub square: f64,
    /// Slope `a` where `b > 0`.
    pub gain_positive: f64,
    /// Slope `a` where `b ≤ 0`.
    pub gain_negative: f64,
    pub gamma: f64,
}

impl Default for SigmoidShape {
    fn default() -> Self {
        SigmoidShape {
            linear: 1.5,
            square: -0.3,
            gain_positive: 4.0,
            gain_negative: 0.5,
            gamma: 0.8,
        }
    }
}

pub fn sigmoid_distort(x: &[f64], shape: &SigmoidShape) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let b = shape.linear * v + shape.square * v * v;
            let a = if b > 0.0 {
                shape.gain_positive
            } else {
                shape.gain_negative
            };
            shape.gamma * (2.0 / (1.0 + (-a * b).exp()) - 1.0)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearMode {
    #[default]
    Linear,
    HardClip,
    Sigmoid,
    ClipThenSigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearitySpec {
    pub mode: NonlinearMode,
    pub clip_ratio: f64,
    pub sigmoid: SigmoidShape,
}

impl Default for NonlinearitySpec {
    fn default() -> Self {
        NonlinearitySpec {
            mode: NonlinearMode::Linear,
            clip_ratio: 0.8,
            sigmoid: SigmoidShape::default(),
        }
    }
}

impl NonlinearitySpec {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: NonlinearMode) -> Self {
        NonlinearitySpec {
            mode,
            ..Self::default()
        }
    }
}

/// Applies the configured distortion, clipping before the sigmoid.
pub fn apply_nonlinearity(x: &[f64], spec: &NonlinearitySpec) -> Result<Vec<f64>> {
    match spec.mode {
        NonlinearMode::Linear => Ok(x.to_vec()),
        NonlinearMode::HardClip => hard_clip(x, spec.clip_ratio),
        NonlinearMode::Sigmoid => Ok(sigmoid_distort(x, &spec.sigmoid)),
        NonlinearMode::ClipThenSigmoid => Ok(sigmoid_distort(
            &hard_clip(x, spec.clip_ratio)?,
            &spec.sigmoid,
        )),
    }
}

fn convolve_truncated(x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (n, out) in y.iter_mut().enumerate() {
        let taps = g.len().min(n + 1);
        let mut acc = 0.0;
        for (k, &gk) in g[..taps].iter().enumerate() {
            acc += gk * x[n - k];
        }
        *out = acc;
    }
    y
}

/// Linear and distorted echoes `x * g` and `f(x) * g`, truncated to `len(x)`.
pub fn make_echo(
    x: &[f64],
    g: &[f64],
    nonlinearity: &NonlinearitySpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if g.is_empty() {
        return Err(Error::Contract("empty RIR".into()));
    }
    if x.is_empty() {
        return Err(Error::Contract("empty far-end signal".into()));
    }
    let linear = convolve_truncated(x, g);
    let distorted = match nonlinearity.mode {
        NonlinearMode::Linear => linear.clone(),
        _ => convolve_truncated(&apply_nonlinearity(x, nonlinearity)?, g),
    };
    Ok((linear, distorted))
}

/// Scales `echo` so the near-to-echo power ratio over `region` equals
/// `ser_db`. Returns `(mixture, scaled_echo, realized_ser_db)`.
pub fn mix_at_ser(
    near: &[f64],
    echo: &[f64],
    ser_db: f64,
    region: &[Range<usize>],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if near.len() != echo.len() {
        return Err(Error::dim(
            "mix_at_ser",
            format!("near {} vs echo {}", near.len(), echo.len()),
        ));
    }
    let p_near = region_power(near, region);
    let p_echo = region_power(echo, region);
    if p_near <= 0.0 || p_echo <= 0.0 {
        return Err(Error::Contract(
            "near-end and echo must both be active over the double-talk region".into(),
        ));
    }
    let alpha = (p_near / (p_echo * 10f64.powf(ser_db / 10.0))).sqrt();
    let scaled: Vec<f64> = echo.iter().map(|v| alpha * v).collect();
    let mixture = near.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    let realized = to_db(p_near / region_power(&scaled, region));
    Ok((mixture, scaled, realized))
}

/// Adds seeded white Gaussian noise at `snr_db` relative to the full-utterance
/// mixture power. `None` leaves the mixture unchanged with zero noise.
/// Returns `(noisy, noise)`.
pub fn add_noise_at_snr(
    mixture: &[f64],
    snr_db: Option<f64>,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(snr_db) = snr_db else {
        return Ok((mixture.to_vec(), vec![0.0; mixture.len()]));
    };
    let p_mix = power(mixture);
    if p_mix <= 0.0 {
        return Err(Error::Contract("cannot set SNR of a silent mixture".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..mixture.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let beta = (p_mix / (power(&white) * 10f64.powf(snr_db / 10.0))).sqrt();
    let noise: Vec<f64> = white.iter().map(|v| beta * v).collect();
    let noisy = mixture.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok((noisy, noise))
}

/// Merged sample ranges of the 10 ms windows where `near` is below −60 dBFS.
/// A trailing partial window is labelled on its own samples.
pub fn single_talk_regions(near: &[f64]) -> Vec<Range<usize>> {
    let threshold = 10f64.powf(SILENCE_DBFS / 10.0);
    let mut out: Vec<Range<usize>> = Vec::new();
    for (w, chunk) in near.chunks(LABEL_WINDOW).enumerate() {
        if power(chunk) < threshold {
            let start = w * LABEL_WINDOW;
            let end = start + chunk.len();
            match out.last_mut() {
                Some(last) if last.end == start => last.end = end,
                _ => out.push(start..end),
            }
        }
    }
    out
}

/// Complement of `single_talk` within `0..len`.
pub fn double_talk_regions(single_talk: &[Range<usize>], len: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut pos = 0;
    for r in single_talk {
        if r.start > pos {
            out.push(pos..r.start);
        }
        pos = r.end;
    }
    if pos < len {
        out.push(pos..len);
    }
    out
}
