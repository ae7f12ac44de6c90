use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wav::read_wav;
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Where a far-end or near-end waveform comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// Speech-like harmonic bursts from [`synth_speech`].
    Synthetic {
        seed: u64,
        samples: usize,
        lead_silence: usize,
    },
    /// All zeros, for echo-only items.
    Silence { samples: usize },
    /// A 16 kHz mono WAV file.
    File { path: PathBuf },
}

impl SourceSpec {
    pub fn realize(&self) -> Result<Vec<f64>> {
        match self {
            SourceSpec::Synthetic {
                seed,
                samples,
                lead_silence,
            } => Ok(synth_speech(*seed, *samples, *lead_silence)),
            SourceSpec::Silence { samples } => Ok(vec![0.0; *samples]),
            SourceSpec::File { path } => {
                let (x, rate) = read_wav(path)?;
                if rate != SAMPLE_RATE {
                    return Err(Error::Config(format!(
                        "{} is {rate} Hz, expected {SAMPLE_RATE}",
                        path.display()
                    )));
                }
                Ok(x)
            }
        }
    }
}

/// Seeded speech-like signal: voiced syllables of 80–250 ms with a gliding
/// pitch and decaying harmonics, separated by 30–150 ms of silence, peak 0.5.
/// The first `lead_silence` samples are zero.
pub fn synth_speech(seed: u64, samples: usize, lead_silence: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; samples];
    let mut pos = lead_silence;
    while pos < samples {
        let len = rng.random_range(1280..4000).min(samples - pos);
        let f0_start: f64 = rng.random_range(90.0..260.0);
        let f0_end = f0_start * rng.random_range(0.8..1.2);
        let harmonics = rng.random_range(4..10);
        let amps: Vec<f64> = (1..=harmonics)
            .map(|h| rng.random_range(0.3..1.0) / h as f64)
            .collect();
        let gain = rng.random_range(0.3..1.0);
        let breath = rng.random_range(0.0..0.08);
        let mut phase = 0.0;
        for n in 0..len {
            let frac = n as f64 / len as f64;
            phase += 2.0 * PI * (f0_start + (f0_end - f0_start) * frac) / fs;
            let voiced: f64 = amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                .sum();
            let envelope = (PI * frac).sin();
            let hiss: f64 = rng.random_range(-1.0..1.0);
            out[pos + n] = gain * envelope * (voiced + breath * hiss);
        }
        pos += len + rng.random_range(480..2400);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}
