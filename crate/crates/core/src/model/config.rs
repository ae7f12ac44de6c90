use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AttentionScale;
use crate::SAMPLE_RATE;

/// How the mixture and far-end representations enter the bottleneck.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Channel concatenation, bottleneck maps `2N → E`.
    #[default]
    Concat,
    /// Elementwise sum, bottleneck maps `N → E`.
    Sum,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder/decoder basis count (`N`).
    pub filters: usize,
    /// Encoder/decoder basis length in samples (`L`).
    pub filter_len: usize,
    /// Hop between encoder frames in samples.
    pub stride: usize,
    /// Bottleneck and residual-path channels (`E`).
    pub bottleneck: usize,
    /// Skip-path channels (`S`), also the attention feature and LSTM width.
    pub skip_channels: usize,
    /// Channels inside each convolutional block (`H`).
    pub conv_channels: usize,
    /// Depthwise kernel size (`K`).
    pub kernel: usize,
    /// Blocks per repeat, dilations `1, 2, …, 2^(M−1)` (`M`).
    pub blocks_per_repeat: usize,
    /// Number of repeats (`R`).
    pub repeats: usize,
    /// Attention projection width (`F`).
    pub attention_dim: usize,
    /// Attention heads (`h`).
    pub heads: usize,
    pub causal: bool,
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default)]
    pub attention_scale: AttentionScale,
}

impl ModelConfig {
    /// Full-size configuration: L=40, N=512, E=128, S=128, H=256, K=3, M=8,
    /// R=3, F=64, h=16, causal.
    pub fn full() -> Self {
        ModelConfig {
            filters: 512,
            filter_len: 40,
            stride: 20,
            bottleneck: 128,
            skip_channels: 128,
            conv_channels: 256,
            kernel: 3,
            blocks_per_repeat: 8,
            repeats: 3,
            attention_dim: 64,
            heads: 16,
            causal: true,
            fusion: Fusion::Concat,
            attention_scale: AttentionScale::KeyDim,
        }
    }

    /// Desk-scale configuration used by tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            filters: 64,
            filter_len: 40,
            stride: 20,
            bottleneck: 32,
            skip_channels: 32,
            conv_channels: 64,
            kernel: 3,
            blocks_per_repeat: 5,
            repeats: 2,
            attention_dim: 32,
            heads: 4,
            causal: true,
            fusion: Fusion::Concat,
            attention_scale: AttentionScale::KeyDim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("filters", self.filters),
            ("filter_len", self.filter_len),
            ("stride", self.stride),
            ("bottleneck", self.bottleneck),
            ("skip_channels", self.skip_channels),
            ("conv_channels", self.conv_channels),
            ("kernel", self.kernel),
            ("blocks_per_repeat", self.blocks_per_repeat),
            ("repeats", self.repeats),
            ("attention_dim", self.attention_dim),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.filter_len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter_len {} must be even",
                self.filter_len
            )));
        }
        if self.stride > self.filter_len || !self.filter_len.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "stride {} must divide filter_len {}",
                self.stride, self.filter_len
            )));
        }
        if !self.attention_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide attention_dim {}",
                self.heads, self.attention_dim
            )));
        }
        if self.blocks_per_repeat > 30 {
            return Err(Error::Config(
                "blocks_per_repeat above 30 overflows dilation".into(),
            ));
        }
        Ok(())
    }

    /// Total number of convolutional blocks, `J = M·R`.
    pub fn layers(&self) -> usize {
        self.blocks_per_repeat * self.repeats
    }

    /// Dilation of block `j` (0-based): `2^(j mod M)`.
    pub fn dilation(&self, block: usize) -> usize {
        1 << (block % self.blocks_per_repeat)
    }

    pub fn bottleneck_inputs(&self) -> usize {
        match self.fusion {
            Fusion::Concat => 2 * self.filters,
            Fusion::Sum => self.filters,
        }
    }

    /// Encoder frames for an input of `len` samples.
    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.filter_len).then(|| (len - self.filter_len) / self.stride + 1)
    }

    /// Decoder output length for `frames` encoder frames.
    pub fn output_len(&self, frames: usize) -> usize {
        (frames - 1) * self.stride + self.filter_len
    }

    /// Samples between an input sample arriving and its output being final.
    pub fn latency(&self) -> usize {
        self.filter_len - self.stride
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Receptive-field figures for a configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveField {
    /// Headline figure `R · 2^M · L` in samples.
    pub nominal_samples: usize,
    pub nominal_seconds: f64,
    /// Frames spanned by the dilated depthwise stack, `(K−1)·R·(2^M − 1) + 1`.
    pub conv_frames: usize,
    /// `conv_frames` mapped to input samples through the encoder framing.
    pub conv_samples: usize,
    pub conv_seconds: f64,
}

pub fn receptive_field(cfg: &ModelConfig) -> ReceptiveField {
    let pow = 1usize << cfg.blocks_per_repeat;
    let nominal_samples = cfg.repeats * pow * cfg.filter_len;
    let conv_frames = (cfg.kernel.saturating_sub(1)) * cfg.repeats * (pow - 1) + 1;
    let conv_samples = (conv_frames - 1) * cfg.stride + cfg.filter_len;
    let sr = SAMPLE_RATE as f64;
    ReceptiveField {
        nominal_samples,
        nominal_seconds: nominal_samples as f64 / sr,
        conv_frames,
        conv_samples,
        conv_seconds: conv_samples as f64 / sr,
    }
}
