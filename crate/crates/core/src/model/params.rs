use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{
    key, AttentionParams, ConvBlockParams, LstmParams, NormParams, ParamTree, PRELU_INIT,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Every learnable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// Mixture encoder basis, `N × 1 × L`.
    pub encoder_mix: T,
    /// Far-end encoder basis, `N × 1 × L`.
    pub encoder_far: T,
    /// Decoder basis, `N × 1 × L`.
    pub decoder: T,
    pub input_norm: NormParams<T>,
    /// `E × C × 1` with `C` = 2N (concat) or N (sum).
    pub bottleneck_w: T,
    pub bottleneck_b: T,
    pub blocks: Vec<ConvBlockParams<T>>,
    pub attention: AttentionParams<T>,
    pub lstm: LstmParams<T>,
    /// `S × N`
    pub mask_w: T,
    /// `1 × N`
    pub mask_b: T,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map_leaves<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder_mix: f(&key(p, "encoder_mix"), &self.encoder_mix),
            encoder_far: f(&key(p, "encoder_far"), &self.encoder_far),
            decoder: f(&key(p, "decoder"), &self.decoder),
            input_norm: self.input_norm.map_leaves(&key(p, "input_norm"), f),
            bottleneck_w: f(&key(p, "bottleneck_w"), &self.bottleneck_w),
            bottleneck_b: f(&key(p, "bottleneck_b"), &self.bottleneck_b),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(j, b)| b.map_leaves(&key(p, &format!("blocks.{j}")), f))
                .collect(),
            attention: self.attention.map_leaves(&key(p, "attention"), f),
            lstm: self.lstm.map_leaves(&key(p, "lstm"), f),
            mask_w: f(&key(p, "mask_w"), &self.mask_w),
            mask_b: f(&key(p, "mask_b"), &self.mask_b),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&key(p, "encoder_mix"), &mut self.encoder_mix);
        f(&key(p, "encoder_far"), &mut self.encoder_far);
        f(&key(p, "decoder"), &mut self.decoder);
        self.input_norm.visit_mut(&key(p, "input_norm"), f);
        f(&key(p, "bottleneck_w"), &mut self.bottleneck_w);
        f(&key(p, "bottleneck_b"), &mut self.bottleneck_b);
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&key(p, &format!("blocks.{j}")), f);
        }
        self.attention.visit_mut(&key(p, "attention"), f);
        self.lstm.visit_mut(&key(p, "lstm"), f);
        f(&key(p, "mask_w"), &mut self.mask_w);
        f(&key(p, "mask_b"), &mut self.mask_b);
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `±sqrt(1/fan_in)`.
    FanIn(usize),
    Const(f64),
    /// LSTM bias: forget-gate block at 1, the rest 0.
    LstmBias,
}

fn build(cfg: &ModelConfig, make: &mut dyn FnMut(Init, &[usize]) -> Tensor) -> ModelParams<Tensor> {
    let (n, l, e, s, h, k, f) = (
        cfg.filters,
        cfg.filter_len,
        cfg.bottleneck,
        cfg.skip_channels,
        cfg.conv_channels,
        cfg.kernel,
        cfg.attention_dim,
    );
    let c = cfg.bottleneck_inputs();
    let norm = |ch: usize, make: &mut dyn FnMut(Init, &[usize]) -> Tensor| NormParams {
        gain: make(Init::Const(1.0), &[ch]),
        bias: make(Init::Const(0.0), &[ch]),
    };
    let encoder_mix = make(Init::FanIn(l), &[n, 1, l]);
    let encoder_far = make(Init::FanIn(l), &[n, 1, l]);
    let decoder = make(Init::FanIn(n), &[n, 1, l]);
    let input_norm = norm(c, make);
    let bottleneck_w = make(Init::FanIn(c), &[e, c, 1]);
    let bottleneck_b = make(Init::FanIn(c), &[e]);
    let blocks = (0..cfg.layers())
        .map(|_| ConvBlockParams {
            in_w: make(Init::FanIn(e), &[h, e, 1]),
            in_b: make(Init::FanIn(e), &[h]),
            in_alpha: make(Init::Const(PRELU_INIT), &[h]),
            in_norm: norm(h, make),
            dw_w: make(Init::FanIn(k), &[h, 1, k]),
            dw_b: make(Init::FanIn(k), &[h]),
            dw_alpha: make(Init::Const(PRELU_INIT), &[h]),
            dw_norm: norm(h, make),
            res_w: make(Init::FanIn(h), &[e, h, 1]),
            res_b: make(Init::FanIn(h), &[e]),
            skip_w: make(Init::FanIn(h), &[s, h, 1]),
            skip_b: make(Init::FanIn(h), &[s]),
        })
        .collect();
    let attention = AttentionParams {
        w_query: make(Init::FanIn(s), &[s, f]),
        w_key: make(Init::FanIn(s), &[s, f]),
        w_value: make(Init::FanIn(s), &[s, f]),
        w_out: make(Init::FanIn(f), &[f, s]),
    };
    let lstm = LstmParams {
        w_input: make(Init::FanIn(s), &[s, 4 * s]),
        w_hidden: make(Init::FanIn(s), &[s, 4 * s]),
        bias: make(Init::LstmBias, &[1, 4 * s]),
    };
    let mask_w = make(Init::FanIn(s), &[s, n]);
    let mask_b = make(Init::FanIn(s), &[1, n]);
    ModelParams {
        encoder_mix,
        encoder_far,
        decoder,
        input_norm,
        bottleneck_w,
        bottleneck_b,
        blocks,
        attention,
        lstm,
        mask_w,
        mask_b,
    }
}

impl ModelParams<Tensor> {
    /// Seed-deterministic initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build(cfg, &mut |init, shape| match init {
            Init::FanIn(fan_in) => Tensor::uniform(shape, (1.0 / fan_in as f64).sqrt(), &mut rng),
            Init::Const(v) => Tensor::full(shape, v),
            Init::LstmBias => {
                let mut t = Tensor::zeros(shape);
                let size = t.numel() / 4;
                t.data_mut()[size..2 * size].fill(1.0);
                t
            }
        })
    }

    /// Every tensor zero, including norm gains and PReLU slopes.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        build(cfg, &mut |_, shape| Tensor::zeros(shape))
    }

    pub fn count(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, t| total += t.numel());
        total
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(name.to_string()));
        names
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.map_leaves("", &mut |_, t| tape.leaf(t.clone(), trainable))
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.is_finite());
        ok
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count());
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.count();
        if flat.len() != total {
            return Err(crate::Error::dim(
                "assign_flat",
                format!("{} values for {total} parameters", flat.len()),
            ));
        }
        let mut pos = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        });
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        self.visit_mut("", &mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        });
    }
}

impl ModelParams<Var> {
    /// Collects gradients after `Tape::backward`.
    pub fn grads(&self, tape: &Tape) -> Result<ModelParams<Tensor>> {
        let mut missing = None;
        let out = self.map_leaves("", &mut |name, v| match tape.grad(*v) {
            Some(g) => g,
            None => {
                missing.get_or_insert_with(|| name.to_string());
                Tensor::zeros(tape.shape(*v))
            }
        });
        match missing {
            Some(name) => Err(crate::Error::Contract(format!(
                "parameter {name} is not trainable on this tape"
            ))),
            None => Ok(out),
        }
    }
}
