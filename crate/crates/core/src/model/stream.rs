//! Frame-by-frame causal inference.
//!
//! Everything is computed with plain loops over the stored weights, not the
//! tape, and reproduces the offline causal forward pass: the output stream is
//! the offline estimate delayed by `L − stride` samples.

use std::collections::VecDeque;

use super::config::{Fusion, ModelConfig};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::Rows;
use crate::nn::{depthwise_padding, ConvBlockParams, NormParams};
use crate::tape::{dot, sigmoid, softmax_in_place, RunningMoments};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    pub in_norm: RunningMoments,
    pub dw_norm: RunningMoments,
    /// The last `d·(K−1)` depthwise inputs, oldest first.
    pub history: VecDeque<Vec<f64>>,
}

/// Causal inference state. All buffers start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub mix_buffer: Vec<f64>,
    pub far_buffer: Vec<f64>,
    pub hops_seen: usize,
    pub input_norm: RunningMoments,
    pub blocks: Vec<BlockState>,
    /// LSTM hidden state, also the next attention query.
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    /// Overlap-add accumulator of length `L`.
    pub overlap: Vec<f64>,
}

impl StreamState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if !cfg.causal {
            return Err(Error::Contract(
                "streaming requires a causal configuration".into(),
            ));
        }
        cfg.validate()?;
        let blocks = (0..cfg.layers())
            .map(|j| {
                let (span, _) = depthwise_padding(cfg.kernel, cfg.dilation(j), true);
                BlockState {
                    in_norm: RunningMoments::new(),
                    dw_norm: RunningMoments::new(),
                    history: (0..span).map(|_| vec![0.0; cfg.conv_channels]).collect(),
                }
            })
            .collect();
        Ok(StreamState {
            mix_buffer: vec![0.0; cfg.filter_len],
            far_buffer: vec![0.0; cfg.filter_len],
            hops_seen: 0,
            input_norm: RunningMoments::new(),
            blocks,
            hidden: vec![0.0; cfg.skip_channels],
            cell: vec![0.0; cfg.skip_channels],
            overlap: vec![0.0; cfg.filter_len],
        })
    }
}

/// Every weight matrix laid out as output rows for matrix–vector products.
#[derive(Clone, Debug)]
struct Packed {
    encoder_mix: Rows,
    encoder_far: Rows,
    bottleneck: Rows,
    blocks: Vec<[Rows; 3]>,
    query: Rows,
    key: Rows,
    value: Rows,
    out: Rows,
    lstm_input: Rows,
    lstm_hidden: Rows,
    mask: Rows,
    decoder: Rows,
}

impl Packed {
    fn new(cfg: &ModelConfig, p: &ModelParams<Tensor>) -> Self {
        let (n, l) = (cfg.filters, cfg.filter_len);
        let (e, h, s, f) = (
            cfg.bottleneck,
            cfg.conv_channels,
            cfg.skip_channels,
            cfg.attention_dim,
        );
        let fused = p.bottleneck_w.data().len() / e;
        Packed {
            encoder_mix: Rows::new(n, l, p.encoder_mix.data()),
            encoder_far: Rows::new(n, l, p.encoder_far.data()),
            bottleneck: Rows::new(e, fused, p.bottleneck_w.data()),
            blocks: p
                .blocks
                .iter()
                .map(|b| {
                    [
                        Rows::new(h, e, b.in_w.data()),
                        Rows::new(e, h, b.res_w.data()),
                        Rows::new(s, h, b.skip_w.data()),
                    ]
                })
                .collect(),
            query: Rows::transposed(f, s, p.attention.w_query.data()),
            key: Rows::transposed(f, s, p.attention.w_key.data()),
            value: Rows::transposed(f, s, p.attention.w_value.data()),
            out: Rows::transposed(s, f, p.attention.w_out.data()),
            lstm_input: Rows::transposed(4 * s, s, p.lstm.w_input.data()),
            lstm_hidden: Rows::transposed(4 * s, s, p.lstm.w_hidden.data()),
            mask: Rows::transposed(n, s, p.mask_w.data()),
            decoder: Rows::transposed(l, n, p.decoder.data()),
        }
    }
}

/// A causal echo canceller fed one hop of `stride` samples at a time.
#[derive(Clone, Debug)]
pub struct StreamingAec {
    params: ModelParams<Tensor>,
    packed: Packed,
    cfg: ModelConfig,
    state: StreamState,
    last_attention: Option<Vec<f64>>,
}

impl StreamingAec {
    pub fn new(cfg: &ModelConfig, params: ModelParams<Tensor>) -> Result<Self> {
        let state = StreamState::new(cfg)?;
        let packed = Packed::new(cfg, &params);
        Ok(StreamingAec {
            params,
            packed,
            cfg: cfg.clone(),
            state,
            last_attention: None,
        })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `h × J` attention weights of the most recent frame, row-major.
    pub fn last_attention(&self) -> Option<&[f64]> {
        self.last_attention.as_deref()
    }

    /// Zeroes every buffer, as at the start of a new stream.
    pub fn reset(&mut self) {
        self.state = StreamState::new(&self.cfg).expect("config validated at construction");
        self.last_attention = None;
    }

    /// Consumes one hop of each signal and emits one hop of output.
    ///
    /// The first `L/stride − 1` hops only fill the encoder window and emit zeros.
    pub fn process_frame(&mut self, mix: &[f64], far: &[f64]) -> Result<Vec<f64>> {
        let hop = self.cfg.stride;
        if mix.len() != hop || far.len() != hop {
            return Err(Error::dim(
                "stream_process_frame",
                format!(
                    "expected {hop} samples, got mixture {} and far-end {}",
                    mix.len(),
                    far.len()
                ),
            ));
        }
        shift_in(&mut self.state.mix_buffer, mix);
        shift_in(&mut self.state.far_buffer, far);
        self.state.hops_seen += 1;
        if self.state.hops_seen < self.cfg.filter_len / hop {
            return Ok(vec![0.0; hop]);
        }
        let frame = self.run_frame();
        let overlap = &mut self.state.overlap;
        overlap.iter_mut().zip(&frame).for_each(|(o, v)| *o += v);
        let out = overlap[..hop].to_vec();
        overlap.copy_within(hop.., 0);
        let len = overlap.len();
        overlap[len - hop..].fill(0.0);
        Ok(out)
    }

    /// Returns the `L − stride` samples still held in the overlap buffer.
    pub fn flush(&mut self) -> Vec<f64> {
        let tail = self.cfg.latency();
        let out = self.state.overlap[..tail].to_vec();
        self.state.overlap.fill(0.0);
        out
    }

    /// Streams a whole utterance (length a multiple of `stride`) and realigns
    /// the result to the offline estimate's timeline and length.
    pub fn process_utterance(&mut self, mix: &[f64], far: &[f64]) -> Result<Vec<f64>> {
        let hop = self.cfg.stride;
        if mix.len() != far.len() || !mix.len().is_multiple_of(hop) {
            return Err(Error::dim(
                "stream",
                format!(
                    "lengths {} and {} must match and be multiples of {hop}",
                    mix.len(),
                    far.len()
                ),
            ));
        }
        let mut out = Vec::with_capacity(mix.len() + hop);
        for (m, f) in mix.chunks(hop).zip(far.chunks(hop)) {
            out.extend(self.process_frame(m, f)?);
        }
        out.extend(self.flush());
        let latency = self.cfg.latency();
        Ok(out.split_off(latency))
    }

    fn run_frame(&mut self) -> Vec<f64> {
        let cfg = &self.cfg;
        let p = &self.params;
        let w = &self.packed;
        let st = &mut self.state;

        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<f64>>();
        let mix_rep = relu(w.encoder_mix.apply(&st.mix_buffer, None));
        let far_rep = relu(w.encoder_far.apply(&st.far_buffer, None));
        let joined: Vec<f64> = match cfg.fusion {
            Fusion::Concat => mix_rep.iter().chain(&far_rep).copied().collect(),
            Fusion::Sum => mix_rep.iter().zip(&far_rep).map(|(a, b)| a + b).collect(),
        };
        let joined = cumulative_norm(&mut st.input_norm, &joined, &p.input_norm);
        let mut x = w.bottleneck.apply(&joined, Some(p.bottleneck_b.data()));

        let layers = cfg.layers();
        let s = cfg.skip_channels;
        let mut features = Vec::with_capacity(layers * s);
        for (j, ((bp, bw), bs)) in p
            .blocks
            .iter()
            .zip(&w.blocks)
            .zip(st.blocks.iter_mut())
            .enumerate()
        {
            let (res, skip) = block_frame(bp, bw, bs, &x, cfg.kernel, cfg.dilation(j));
            x = res;
            features.extend(skip);
        }

        let (weights, context) = attention_frame(w, cfg, &st.hidden, &features);
        self.last_attention = Some(weights);

        lstm_frame(
            w,
            p.lstm.bias.data(),
            &context,
            &mut st.hidden,
            &mut st.cell,
        );

        let gates = w.mask.apply(&st.hidden, Some(p.mask_b.data()));
        let masked: Vec<f64> = gates
            .iter()
            .zip(&mix_rep)
            .map(|(&g, &m)| sigmoid(g) * m)
            .collect();
        w.decoder.apply(&masked, None)
    }
}

fn shift_in(buffer: &mut [f64], hop: &[f64]) {
    let len = buffer.len();
    buffer.copy_within(hop.len().., 0);
    buffer[len - hop.len()..].copy_from_slice(hop);
}

fn prelu_in_place(x: &mut [f64], alpha: &[f64]) {
    for (v, &a) in x.iter_mut().zip(alpha) {
        if *v < 0.0 {
            *v *= a;
        }
    }
}

fn cumulative_norm(moments: &mut RunningMoments, x: &[f64], p: &NormParams<Tensor>) -> Vec<f64> {
    let (mean, inv) = moments.push(x.iter().copied());
    x.iter()
        .zip(p.gain.data().iter().zip(p.bias.data()))
        .map(|(&v, (&g, &b))| g * ((v - mean) * inv) + b)
        .collect()
}

fn block_frame(
    p: &ConvBlockParams<Tensor>,
    w: &[Rows; 3],
    st: &mut BlockState,
    x: &[f64],
    kernel: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut h = w[0].apply(x, Some(p.in_b.data()));
    prelu_in_place(&mut h, p.in_alpha.data());
    let h = cumulative_norm(&mut st.in_norm, &h, &p.in_norm);

    let span = st.history.len();
    let dw = p.dw_w.data();
    let mut d: Vec<f64> = p.dw_b.data().to_vec();
    for (c, out) in d.iter_mut().enumerate() {
        for k in 0..kernel {
            // tap k reads the input (K−1−k)·dilation frames back
            let back = (kernel - 1 - k) * dilation;
            let v = if back == 0 {
                h[c]
            } else {
                st.history[span - back][c]
            };
            *out += dw[c * kernel + k] * v;
        }
    }
    if span > 0 {
        st.history.pop_front();
        st.history.push_back(h);
    }
    prelu_in_place(&mut d, p.dw_alpha.data());
    let d = cumulative_norm(&mut st.dw_norm, &d, &p.dw_norm);

    let mut res = w[1].apply(&d, Some(p.res_b.data()));
    res.iter_mut().zip(x).for_each(|(r, &v)| *r += v);
    let skip = w[2].apply(&d, Some(p.skip_b.data()));
    (res, skip)
}

/// Returns `(h × J weights, 1 × S context)` for one frame of `J × S` features.
fn attention_frame(
    w: &Packed,
    cfg: &ModelConfig,
    query: &[f64],
    features: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let s = cfg.skip_channels;
    let f = cfg.attention_dim;
    let heads = cfg.heads;
    let width = f / heads;
    let layers = cfg.layers();
    let q = w.query.apply(query, None);
    let keys: Vec<Vec<f64>> = features.chunks(s).map(|r| w.key.apply(r, None)).collect();
    let values: Vec<Vec<f64>> = features.chunks(s).map(|r| w.value.apply(r, None)).collect();
    let divisor = cfg.attention_scale.divisor(s, f, heads);

    let mut weights = vec![0.0; heads * layers];
    let mut mixed = vec![0.0; f];
    for h in 0..heads {
        let cols = h * width..(h + 1) * width;
        let row = &mut weights[h * layers..(h + 1) * layers];
        for (j, a) in row.iter_mut().enumerate() {
            *a = dot(&q[cols.clone()], &keys[j][cols.clone()]) / divisor;
        }
        softmax_in_place(row);
        for (j, &a) in row.iter().enumerate() {
            for (m, &v) in mixed[cols.clone()].iter_mut().zip(&values[j][cols.clone()]) {
                *m += a * v;
            }
        }
    }
    let context = w.out.apply(&mixed, None);
    (weights, context)
}

fn lstm_frame(w: &Packed, bias: &[f64], x: &[f64], hidden: &mut [f64], cell: &mut [f64]) {
    let size = hidden.len();
    let mut gates = w.lstm_input.apply(x, Some(bias));
    let recurrent = w.lstm_hidden.apply(hidden, None);
    gates.iter_mut().zip(&recurrent).for_each(|(g, r)| *g += r);
    for c in 0..size {
        let i = sigmoid(gates[c]);
        let f = sigmoid(gates[size + c]);
        let g = gates[2 * size + c].tanh();
        let o = sigmoid(gates[3 * size + c]);
        cell[c] = f * cell[c] + i * g;
        hidden[c] = o * cell[c].tanh();
    }
}
