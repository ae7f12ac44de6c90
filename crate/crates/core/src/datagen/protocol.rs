use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::MixtureSpec;
use super::signal::{NonlinearitySpec, RirSpec};
use super::source::SourceSpec;
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Training SER choices in dB.
pub const TRAIN_SER_DB: [f64; 5] = [-6.0, -3.0, 0.0, 3.0, 6.0];
/// Test SER conditions in dB.
pub const TEST_SER_DB: [f64; 3] = [0.0, 3.5, 7.0];
/// Reverberation times in seconds; the last is held out for testing.
pub const T60_SET: [f64; 7] = [0.2, 0.4, 0.6, 0.8, 0.9, 1.0, 1.25];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Recipe for a batch of synthetic mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub split: Split,
    pub items: usize,
    /// Samples per item.
    pub samples: usize,
    /// Silent samples at the start of every near-end signal.
    pub lead_silence: usize,
    /// Fixed SER; otherwise drawn per item from the split's set.
    pub ser_db: Option<f64>,
    pub snr_db: Option<f64>,
    /// Fixed T60; otherwise drawn from the split's reverberation times.
    pub t60: Option<f64>,
    /// RIR taps; defaults to `round(T60·fs)`.
    pub rir_length: Option<usize>,
    pub nonlinearity: NonlinearitySpec,
    /// Echo-only items with a silent near end.
    pub single_talk_only: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split: Split::Train,
            items: 16,
            samples: 2 * SAMPLE_RATE as usize,
            lead_silence: SAMPLE_RATE as usize / 4,
            ser_db: None,
            snr_db: None,
            t60: None,
            rir_length: None,
            nonlinearity: NonlinearitySpec::default(),
            single_talk_only: false,
        }
    }
}

impl DataConfig {
    pub fn ser_choices(&self) -> Vec<f64> {
        match (self.ser_db, self.split) {
            (Some(v), _) => vec![v],
            (None, Split::Train) => TRAIN_SER_DB.to_vec(),
            (None, Split::Test) => TEST_SER_DB.to_vec(),
        }
    }

    pub fn t60_choices(&self) -> Vec<f64> {
        match (self.t60, self.split) {
            (Some(v), _) => vec![v],
            (None, Split::Train) => T60_SET[..6].to_vec(),
            (None, Split::Test) => T60_SET[6..].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.items == 0 || self.samples == 0 {
            return Err(Error::Config("items and samples must be positive".into()));
        }
        if self.lead_silence >= self.samples && !self.single_talk_only {
            return Err(Error::Config(
                "lead_silence leaves no near-end speech".into(),
            ));
        }
        let ratio = self.nonlinearity.clip_ratio;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("clip_ratio {ratio} outside (0, 1]")));
        }
        if let Some(t60) = self.t60 {
            if t60.is_nan() || t60 <= 0.0 {
                return Err(Error::Config(format!("t60 {t60} must be positive")));
            }
        }
        if self.rir_length == Some(0) {
            return Err(Error::Config("rir_length must be positive".into()));
        }
        Ok(())
    }

    /// Draws per-item conditions and seeds from one seeded stream.
    pub fn specs(&self, seed: u64) -> Result<Vec<MixtureSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sers = self.ser_choices();
        let t60s = self.t60_choices();
        let prefix = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let specs = (0..self.items)
            .map(|i| {
                let ser_db = *sers.choose(&mut rng).expect("nonempty");
                let t60 = *t60s.choose(&mut rng).expect("nonempty");
                let length = self
                    .rir_length
                    .unwrap_or((t60 * SAMPLE_RATE as f64).round() as usize);
                let far_seed: u64 = rng.random();
                let near_seed: u64 = rng.random();
                let rir_seed: u64 = rng.random();
                let noise_seed: u64 = rng.random();
                let near = if self.single_talk_only {
                    SourceSpec::Silence {
                        samples: self.samples,
                    }
                } else {
                    SourceSpec::Synthetic {
                        seed: near_seed,
                        samples: self.samples,
                        lead_silence: self.lead_silence,
                    }
                };
                MixtureSpec {
                    id: format!("{prefix}-{i:05}"),
                    far: SourceSpec::Synthetic {
                        seed: far_seed,
                        samples: self.samples,
                        lead_silence: 0,
                    },
                    near,
                    rir: RirSpec::synthetic(t60, length.max(1), rir_seed),
                    nonlinearity: self.nonlinearity,
                    ser_db,
                    snr_db: self.snr_db,
                    seed: noise_seed,
                }
            })
            .collect();
        Ok(specs)
    }
}
