//! Network building blocks recorded on a [`Tape`](crate::tape::Tape).
//!
//! Parameter structs are generic over their leaf type so the same layout
//! serves stored weights (`Tensor`), tape handles (`Var`), gradients and
//! optimizer moments.

mod attention;
mod block;
mod lstm;

pub use attention::{attend, multi_head_attention, AttentionParams, AttentionScale};
pub use block::{conv_block, depthwise_padding, BlockGeometry, ConvBlockParams};
pub use lstm::{lstm_step, LstmParams, LstmState};

use crate::error::Result;
use crate::tape::{NormKind, Tape, Var};

/// A tree of named parameters with leaves of type `T`.
pub trait ParamTree<T> {
    type Mapped<U>;

    /// Builds the same tree with every leaf transformed by `f(name, leaf)`.
    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.map_leaves(prefix, &mut |name, leaf| f(name, leaf));
    }
}

pub(crate) fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-channel affine parameters of a layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> ParamTree<T> for NormParams<T> {
    type Mapped<U> = NormParams<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&key(prefix, "gain"), &self.gain),
            bias: f(&key(prefix, "bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&key(prefix, "gain"), &mut self.gain);
        f(&key(prefix, "bias"), &mut self.bias);
    }
}

/// gLN or cLN followed by the per-channel affine map.
pub fn layer_norm(
    tape: &mut Tape,
    x: Var,
    params: &NormParams<Var>,
    kind: NormKind,
) -> Result<Var> {
    tape.norm(x, params.gain, params.bias, kind)
}

/// Channel-wise PReLU; `alpha` holds one slope per channel.
pub fn prelu(tape: &mut Tape, x: Var, alpha: Var) -> Result<Var> {
    tape.prelu(x, alpha)
}

/// Default PReLU slope.
pub const PRELU_INIT: f64 = 0.25;
