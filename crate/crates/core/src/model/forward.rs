//! Offline (whole-utterance) forward pass recorded on a tape.

use super::config::{Fusion, ModelConfig};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::nn::{
    conv_block, layer_norm, lstm_step, multi_head_attention, BlockGeometry, LstmState,
};
use crate::tape::{Conv1dSpec, NormKind, Tape, Var};
use crate::tensor::Tensor;

/// Frames a `1 × len` waveform with the given basis: row `n` of the `N × T`
/// result at frame `k` is `ReLU(x_k · U_nᵀ)`.
pub fn encode(tape: &mut Tape, wave: Var, basis: Var, stride: usize) -> Result<Var> {
    let len = tape.shape(wave)[1];
    let l = tape.shape(basis)[2];
    if len < l {
        return Err(Error::TooShort(format!(
            "{len} samples, encoder needs at least {l}"
        )));
    }
    let spec = Conv1dSpec {
        stride,
        ..Conv1dSpec::default()
    };
    let rep = tape.conv1d(wave, basis, None, spec)?;
    Ok(tape.relu(rep))
}

/// Overlap-adds `x̂_k = w_k · V` at `stride` offsets; output is `1 × ((T−1)·stride + L)`.
pub fn decode(tape: &mut Tape, rep: Var, basis: Var, stride: usize) -> Result<Var> {
    tape.conv1d_transpose(rep, basis, stride)
}

fn norm_kind(cfg: &ModelConfig) -> NormKind {
    if cfg.causal {
        NormKind::Cumulative
    } else {
        NormKind::Global
    }
}

/// Multi-scale features `T × J × S`: the skip output of every block per frame.
pub fn extractor_forward(
    tape: &mut Tape,
    mix_rep: Var,
    far_rep: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    extractor(tape, mix_rep, far_rep, params, cfg, Some(norm_kind(cfg)))
}

/// The extractor with every normalization removed, leaving only the
/// convolutional path. Used to probe the dilated stack's receptive field,
/// which cumulative normalization would otherwise extend to the whole past.
pub fn conv_path_features(
    tape: &mut Tape,
    mix_rep: Var,
    far_rep: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    extractor(tape, mix_rep, far_rep, params, cfg, None)
}

fn extractor(
    tape: &mut Tape,
    mix_rep: Var,
    far_rep: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    norm: Option<NormKind>,
) -> Result<Var> {
    if tape.shape(mix_rep) != tape.shape(far_rep) {
        return Err(Error::dim(
            "extractor_forward",
            format!(
                "mixture {:?} vs far-end {:?}",
                tape.shape(mix_rep),
                tape.shape(far_rep)
            ),
        ));
    }
    let joined = match cfg.fusion {
        Fusion::Concat => tape.concat(&[mix_rep, far_rep])?,
        Fusion::Sum => tape.add(mix_rep, far_rep)?,
    };
    let joined = match norm {
        Some(kind) => layer_norm(tape, joined, &params.input_norm, kind)?,
        None => joined,
    };
    let mut x = tape.conv1d(
        joined,
        params.bottleneck_w,
        Some(params.bottleneck_b),
        Conv1dSpec::default(),
    )?;
    let mut skips = Vec::with_capacity(params.blocks.len());
    for (j, block) in params.blocks.iter().enumerate() {
        let geo = BlockGeometry {
            kernel: cfg.kernel,
            dilation: cfg.dilation(j),
            causal: cfg.causal,
            norm,
        };
        let (res, skip) = conv_block(tape, x, block, geo)?;
        x = res;
        skips.push(skip);
    }
    tape.interleave(&skips)
}

/// Recurrent state carried between canceller steps. The query for frame `t`
/// is the LSTM hidden state after frame `t − 1`.
#[derive(Clone, Copy, Debug)]
pub struct CancellerState {
    pub lstm: LstmState<Var>,
}

impl CancellerState {
    pub fn zeros(tape: &mut Tape, size: usize) -> Self {
        let hidden = tape.constant(Tensor::zeros(&[1, size]));
        let cell = tape.constant(Tensor::zeros(&[1, size]));
        CancellerState {
            lstm: LstmState { hidden, cell },
        }
    }
}

/// Output of one canceller step.
#[derive(Clone, Copy, Debug)]
pub struct CancellerStep {
    /// `1 × N` mask in `(0, 1)`.
    pub mask: Var,
    /// `h × J` attention weights.
    pub weights: Var,
    pub state: CancellerState,
}

/// Layer attention over one frame's `J × S` features, LSTM update, sigmoid mask.
pub fn canceller_step(
    tape: &mut Tape,
    features: Var,
    state: CancellerState,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<CancellerStep> {
    let (context, weights) = multi_head_attention(
        tape,
        state.lstm.hidden,
        features,
        &params.attention,
        cfg.heads,
        cfg.attention_scale,
    )?;
    let lstm = lstm_step(tape, context, state.lstm, &params.lstm)?;
    let logits = tape.matmul(lstm.hidden, params.mask_w)?;
    let logits = tape.add(logits, params.mask_b)?;
    let mask = tape.sigmoid(logits);
    Ok(CancellerStep {
        mask,
        weights,
        state: CancellerState { lstm },
    })
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardGraph {
    /// `1 × ((T−1)·stride + L)` near-end estimate.
    pub estimate: Var,
    /// `N × T` masks.
    pub masks: Var,
    /// `N × T` mixture representation before masking.
    pub mix_rep: Var,
    /// `T × h × J` attention weights.
    pub attention: Var,
    /// `T × J × S` multi-scale features.
    pub features: Var,
    pub frames: usize,
}

/// Records the whole network on `tape` for `1 × len` mixture and far-end rows.
pub fn forward_graph(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    mix: Var,
    far: Var,
) -> Result<ForwardGraph> {
    if tape.shape(mix) != tape.shape(far) {
        return Err(Error::dim(
            "forward",
            format!(
                "mixture {:?} vs far-end {:?}",
                tape.shape(mix),
                tape.shape(far)
            ),
        ));
    }
    let mix_rep = encode(tape, mix, params.encoder_mix, cfg.stride)?;
    let far_rep = encode(tape, far, params.encoder_far, cfg.stride)?;
    let frames = tape.shape(mix_rep)[1];
    let features = extractor_forward(tape, mix_rep, far_rep, params, cfg)?;
    let layers = cfg.layers();
    let mut state = CancellerState::zeros(tape, cfg.skip_channels);
    let mut masks = Vec::with_capacity(frames);
    let mut weights = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = tape.slice_rows(features, t, 1)?;
        let frame = tape.reshape(frame, &[layers, cfg.skip_channels])?;
        let step = canceller_step(tape, frame, state, params, cfg)?;
        masks.push(step.mask);
        weights.push(step.weights);
        state = step.state;
    }
    let masks = tape.concat(&masks)?;
    let masks = tape.transpose(masks)?;
    let masked = tape.mul(masks, mix_rep)?;
    let estimate = decode(tape, masked, params.decoder, cfg.stride)?;
    let attention = tape.concat(&weights)?;
    let attention = tape.reshape(attention, &[frames, cfg.heads, layers])?;
    Ok(ForwardGraph {
        estimate,
        masks,
        mix_rep,
        attention,
        features,
        frames,
    })
}

/// Result of an inference-only forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub estimate: Vec<f64>,
    /// `T × h × J`
    pub attention: Tensor,
    /// `N × T`
    pub masks: Tensor,
}

/// Runs the network on a whole utterance without recording gradients.
pub fn forward_full(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    mix: &[f64],
    far: &[f64],
) -> Result<ForwardOutput> {
    if mix.len() != far.len() {
        return Err(Error::dim(
            "forward",
            format!("mixture {} vs far-end {} samples", mix.len(), far.len()),
        ));
    }
    if mix.len() < cfg.filter_len {
        return Err(Error::TooShort(format!(
            "{} samples, need at least {}",
            mix.len(),
            cfg.filter_len
        )));
    }
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, false);
    let mix = tape.constant(Tensor::row(mix.to_vec()));
    let far = tape.constant(Tensor::row(far.to_vec()));
    let g = forward_graph(&mut tape, &p, cfg, mix, far)?;
    Ok(ForwardOutput {
        estimate: tape.value(g.estimate).data().to_vec(),
        attention: tape.value(g.attention).clone(),
        masks: tape.value(g.masks).clone(),
    })
}
