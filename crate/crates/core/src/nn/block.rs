use super::{key, layer_norm, NormParams, ParamTree};
use crate::error::Result;
use crate::tape::{Conv1dSpec, NormKind, Tape, Var};

/// One dilated depthwise-separable block with residual and skip outputs.
///
/// Kernel shapes: `in_w` `H×E×1`, `dw_w` `H×1×K`, `res_w` `E×H×1`, `skip_w` `S×H×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T> {
    pub in_w: T,
    pub in_b: T,
    pub in_alpha: T,
    pub in_norm: NormParams<T>,
    pub dw_w: T,
    pub dw_b: T,
    pub dw_alpha: T,
    pub dw_norm: NormParams<T>,
    pub res_w: T,
    pub res_b: T,
    pub skip_w: T,
    pub skip_b: T,
}

impl<T> ParamTree<T> for ConvBlockParams<T> {
    type Mapped<U> = ConvBlockParams<U>;

    fn map_leaves<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ConvBlockParams<U> {
        ConvBlockParams {
            in_w: f(&key(p, "in_w"), &self.in_w),
            in_b: f(&key(p, "in_b"), &self.in_b),
            in_alpha: f(&key(p, "in_alpha"), &self.in_alpha),
            in_norm: self.in_norm.map_leaves(&key(p, "in_norm"), f),
            dw_w: f(&key(p, "dw_w"), &self.dw_w),
            dw_b: f(&key(p, "dw_b"), &self.dw_b),
            dw_alpha: f(&key(p, "dw_alpha"), &self.dw_alpha),
            dw_norm: self.dw_norm.map_leaves(&key(p, "dw_norm"), f),
            res_w: f(&key(p, "res_w"), &self.res_w),
            res_b: f(&key(p, "res_b"), &self.res_b),
            skip_w: f(&key(p, "skip_w"), &self.skip_w),
            skip_b: f(&key(p, "skip_b"), &self.skip_b),
        }
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&key(p, "in_w"), &mut self.in_w);
        f(&key(p, "in_b"), &mut self.in_b);
        f(&key(p, "in_alpha"), &mut self.in_alpha);
        self.in_norm.visit_mut(&key(p, "in_norm"), f);
        f(&key(p, "dw_w"), &mut self.dw_w);
        f(&key(p, "dw_b"), &mut self.dw_b);
        f(&key(p, "dw_alpha"), &mut self.dw_alpha);
        self.dw_norm.visit_mut(&key(p, "dw_norm"), f);
        f(&key(p, "res_w"), &mut self.res_w);
        f(&key(p, "res_b"), &mut self.res_b);
        f(&key(p, "skip_w"), &mut self.skip_w);
        f(&key(p, "skip_b"), &mut self.skip_b);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub kernel: usize,
    pub dilation: usize,
    pub causal: bool,
    /// `None` skips both normalizations; only receptive-field probes use it.
    pub norm: Option<NormKind>,
}

impl BlockGeometry {
    pub fn new(kernel: usize, dilation: usize, causal: bool) -> Self {
        let norm = Some(if causal {
            NormKind::Cumulative
        } else {
            NormKind::Global
        });
        BlockGeometry {
            kernel,
            dilation,
            causal,
            norm,
        }
    }
}

/// `(left, right)` zero padding that keeps the depthwise output length equal
/// to its input. Non-causal padding puts the odd sample on the left.
pub fn depthwise_padding(kernel: usize, dilation: usize, causal: bool) -> (usize, usize) {
    let total = dilation * (kernel - 1);
    if causal {
        (total, 0)
    } else {
        (total - total / 2, total / 2)
    }
}

/// Runs one block on an `E × T` input, returning `(residual E×T, skip S×T)`.
pub fn conv_block(
    tape: &mut Tape,
    x: Var,
    p: &ConvBlockParams<Var>,
    geo: BlockGeometry,
) -> Result<(Var, Var)> {
    let h = tape.conv1d(x, p.in_w, Some(p.in_b), Conv1dSpec::default())?;
    let h = tape.prelu(h, p.in_alpha)?;
    let h = match geo.norm {
        Some(kind) => layer_norm(tape, h, &p.in_norm, kind)?,
        None => h,
    };
    let channels = tape.shape(h)[0];
    let (left_pad, right_pad) = depthwise_padding(geo.kernel, geo.dilation, geo.causal);
    let dw = Conv1dSpec {
        stride: 1,
        dilation: geo.dilation,
        left_pad,
        right_pad,
        groups: channels,
    };
    let h = tape.conv1d(h, p.dw_w, Some(p.dw_b), dw)?;
    let h = tape.prelu(h, p.dw_alpha)?;
    let h = match geo.norm {
        Some(kind) => layer_norm(tape, h, &p.dw_norm, kind)?,
        None => h,
    };
    let res = tape.conv1d(h, p.res_w, Some(p.res_b), Conv1dSpec::default())?;
    let res = tape.add(res, x)?;
    let skip = tape.conv1d(h, p.skip_w, Some(p.skip_b), Conv1dSpec::default())?;
    Ok((res, skip))
}
