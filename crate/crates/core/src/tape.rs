//! Reverse-mode automatic differentiation over an explicit operation tape.
//!
//! Every op appends a node holding its forward value and enough information
//! to run its backward rule. Nodes are only ever appended, so the tape is in
//! topological order by construction and `backward` is a single reverse sweep.
//! Gradients accumulate additively, so a node consumed twice receives the sum
//! of both contributions.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub left_pad: usize,
    pub right_pad: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec {
            stride: 1,
            dilation: 1,
            left_pad: 0,
            right_pad: 0,
            groups: 1,
        }
    }
}

impl Conv1dSpec {
    /// Output length for an input of `t_in` frames and a kernel of `k` taps.
    pub fn output_len(&self, t_in: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = t_in + self.left_pad + self.right_pad;
        if padded < span {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

/// Which statistics a layer normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Mean and variance over every element of the `C × T` input.
    Global,
    /// Mean and variance over channels and frames `0..=t` for each frame `t`.
    Cumulative,
}

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Prelu(Var, Var),
    SoftmaxRows(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: Conv1dSpec,
    },
    ConvTranspose1d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    Norm {
        input: Var,
        gain: Var,
        bias: Var,
        kind: NormKind,
        normalized: Vec<f64>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Interleave(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    HeadScores {
        query: Var,
        keys: Var,
        heads: usize,
    },
    HeadMix {
        weights: Var,
        values: Var,
        heads: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single-writer recording of forward operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Nodes that require gradients but were not reached get a zero tensor.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::new(shape, g.clone()).expect("grad shape mirrors value")),
            None => Some(Tensor::zeros(shape)),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, format!("expected rank 2, got {s:?}"))),
        }
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(value.shape(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, op)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[c, r], data)?, rg, Op::Transpose(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2("matmul", a)?;
        let (p2, n) = self.dims2("matmul", b)?;
        if p != p2 {
            return Err(Error::dim("matmul", format!("{m}x{p} · {p2}x{n}")));
        }
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            p,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut data,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], data)?, rg, Op::MatMul(a, b)))
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// Adds `bias[c]` to every frame of channel `c` of a `C × T` input.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, t) = self.dims2("add_channel_bias", x)?;
        if self.value(bias).numel() != c {
            return Err(Error::dim(
                "add_channel_bias",
                format!("{c} channels, bias of {:?}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &bv) in data.chunks_mut(t).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::new(&[c, t], data)?, rg, Op::ChannelBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Channel-wise PReLU on a `C × T` input with one slope per channel.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (c, t) = self.dims2("prelu", x)?;
        if self.value(alpha).numel() != c {
            return Err(Error::dim(
                "prelu",
                format!("{c} channels, alpha of {:?}", self.shape(alpha)),
            ));
        }
        let a = self.value(alpha).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &av) in data.chunks_mut(t).zip(a) {
            for v in row.iter_mut() {
                if *v < 0.0 {
                    *v *= av;
                }
            }
        }
        let rg = self.any_grad(&[x, alpha]);
        Ok(self.push(Tensor::new(&[c, t], data)?, rg, Op::Prelu(x, alpha)))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let d = *value
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        let mut data = value.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(value.shape(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::SoftmaxRows(x)))
    }

    /// 1-D convolution of a `C_in × T_in` input with a `C_out × C_in/groups × K` kernel.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: Conv1dSpec,
    ) -> Result<Var> {
        let (c_in, t_in) = self.dims2("conv1d", input)?;
        let (c_out, cin_g, k) = match *self.shape(kernel) {
            [a, b, c] => (a, b, c),
            ref s => {
                return Err(Error::dim(
                    "conv1d",
                    format!("kernel must be rank 3, got {s:?}"),
                ))
            }
        };
        if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::dim(
                "conv1d",
                "groups, stride and dilation must be positive",
            ));
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 || cin_g * spec.groups != c_in {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "input {c_in} channels, kernel {:?}, groups {}",
                    self.shape(kernel),
                    spec.groups
                ),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(Error::dim(
                    "conv1d",
                    format!("bias {:?} for {c_out} outputs", self.shape(b)),
                ));
            }
        }
        let t_out = spec.output_len(t_in, k).ok_or_else(|| Error::EmptyOutput {
            op: "conv1d",
            detail: format!("input length {t_in}, kernel {k}, {spec:?}"),
        })?;
        let geo = ConvGeometry {
            c_in,
            t_in,
            c_out,
            k,
            t_out,
            spec,
        };
        let mut out = vec![0.0; c_out * t_out];
        geo.forward(
            self.value(input).data(),
            self.value(kernel).data(),
            &mut out,
        );
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(t_out).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(&[c_out, t_out], out)?,
            rg,
            Op::Conv1d {
                input,
                kernel,
                bias,
                spec,
            },
        ))
    }

    /// Transposed 1-D convolution (overlap-add) with a `C_in × C_out × K` kernel.
    pub fn conv1d_transpose(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (c_in, t_in) = self.dims2("conv1d_transpose", input)?;
        let (kc_in, c_out, k) = match *self.shape(kernel) {
            [a, b, c] => (a, b, c),
            ref s => {
                return Err(Error::dim(
                    "conv1d_transpose",
                    format!("kernel must be rank 3, got {s:?}"),
                ))
            }
        };
        if kc_in != c_in {
            return Err(Error::dim(
                "conv1d_transpose",
                format!("input {c_in} channels, kernel {:?}", self.shape(kernel)),
            ));
        }
        if stride == 0 || k < stride {
            return Err(Error::Contract(format!(
                "conv1d_transpose needs 1 <= stride <= kernel, got stride {stride}, kernel {k}"
            )));
        }
        let t_out = (t_in - 1) * stride + k;
        let mut cols = vec![0.0; c_out * k * t_in];
        gemm(
            c_out * k,
            c_in,
            t_in,
            self.value(kernel).data(),
            true,
            self.value(input).data(),
            false,
            &mut cols,
            0.0,
        );
        let mut out = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            let dst = &mut out[o * t_out..(o + 1) * t_out];
            for kk in 0..k {
                let src = &cols[(o * k + kk) * t_in..(o * k + kk + 1) * t_in];
                for (t, &v) in src.iter().enumerate() {
                    dst[t * stride + kk] += v;
                }
            }
        }
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            Tensor::new(&[c_out, t_out], out)?,
            rg,
            Op::ConvTranspose1d {
                input,
                kernel,
                stride,
            },
        ))
    }

    /// Layer normalization of a `C × T` input followed by a per-channel affine map.
    pub fn norm(&mut self, input: Var, gain: Var, bias: Var, kind: NormKind) -> Result<Var> {
        let (c, t) = self.dims2("norm", input)?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::dim(
                "norm",
                format!(
                    "{c} channels, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let x = self.value(input).data();
        let (normalized, mean, inv_std) = match kind {
            NormKind::Global => global_stats(x),
            NormKind::Cumulative => cumulative_stats(x, c, t),
        };
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = normalized.clone();
        for ((row, &gv), &bv) in out.chunks_mut(t).zip(g).zip(b) {
            row.iter_mut().for_each(|v| *v = gv * *v + bv);
        }
        let rg = self.any_grad(&[input, gain, bias]);
        Ok(self.push(
            Tensor::new(&[c, t], out)?,
            rg,
            Op::Norm {
                input,
                gain,
                bias,
                kind,
                normalized,
                mean,
                inv_std,
            },
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail: Vec<usize> = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(&shape, data)?, rg, Op::Concat(parts.to_vec())))
    }

    /// Stacks `J` channel-major `S × T` inputs into a frame-major `T × J × S` tensor.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("interleave", "no inputs"))?;
        let (s, t) = self.dims2("interleave", first)?;
        let j_count = parts.len();
        let mut data = vec![0.0; t * j_count * s];
        for (j, &p) in parts.iter().enumerate() {
            if self.shape(p) != [s, t] {
                return Err(Error::dim(
                    "interleave",
                    format!("{:?} vs [{s}, {t}]", self.shape(p)),
                ));
            }
            let src = self.value(p).data();
            for ch in 0..s {
                for f in 0..t {
                    data[(f * j_count + j) * s + ch] = src[ch * t + f];
                }
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&[t, j_count, s], data)?,
            rg,
            Op::Interleave(parts.to_vec()),
        ))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::dim(
                "slice_rows",
                format!("{start}+{len} of {shape:?}"),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            rg,
            Op::SliceRows { input: x, start },
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}+{len} of {c} columns"),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[r, len], data)?,
            rg,
            Op::SliceCols { input: x, start },
        ))
    }

    /// Per-head dot products between a `1 × F` query and the rows of a `J × F` key
    /// matrix, where head `i` owns feature columns `i·F/h .. (i+1)·F/h`. Returns `h × J`.
    pub fn head_scores(&mut self, query: Var, keys: Var, heads: usize) -> Result<Var> {
        let (one, f) = self.dims2("head_scores", query)?;
        let (j, f2) = self.dims2("head_scores", keys)?;
        if one != 1 || f != f2 || heads == 0 || f % heads != 0 {
            return Err(Error::dim(
                "head_scores",
                format!("query {one}x{f}, keys {j}x{f2}, {heads} heads"),
            ));
        }
        let w = f / heads;
        let q = self.value(query).data();
        let kd = self.value(keys).data();
        let mut data = vec![0.0; heads * j];
        for h in 0..heads {
            let qh = &q[h * w..(h + 1) * w];
            for r in 0..j {
                let kr = &kd[r * f + h * w..r * f + (h + 1) * w];
                data[h * j + r] = dot(qh, kr);
            }
        }
        let rg = self.any_grad(&[query, keys]);
        Ok(self.push(
            Tensor::new(&[heads, j], data)?,
            rg,
            Op::HeadScores { query, keys, heads },
        ))
    }

    /// Mixes the rows of a `J × F` value matrix with `h × J` weights, head `i`
    /// reading its own column slice. Returns the `1 × F` concatenation of heads.
    pub fn head_mix(&mut self, weights: Var, values: Var, heads: usize) -> Result<Var> {
        let (h, j) = self.dims2("head_mix", weights)?;
        let (j2, f) = self.dims2("head_mix", values)?;
        if h != heads || j != j2 || f % heads != 0 {
            return Err(Error::dim(
                "head_mix",
                format!("weights {h}x{j}, values {j2}x{f}, {heads} heads"),
            ));
        }
        let w = f / heads;
        let wd = self.value(weights).data();
        let vd = self.value(values).data();
        let mut data = vec![0.0; f];
        for hh in 0..heads {
            let out = &mut data[hh * w..(hh + 1) * w];
            for r in 0..j {
                let a = wd[hh * j + r];
                let vr = &vd[r * f + hh * w..r * f + (hh + 1) * w];
                out.iter_mut().zip(vr).for_each(|(o, &v)| *o += a * v);
            }
        }
        let rg = self.any_grad(&[weights, values]);
        Ok(self.push(
            Tensor::new(&[1, f], data)?,
            rg,
            Op::HeadMix {
                weights,
                values,
                heads,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Squared error between equal-shape tensors, summed or averaged.
    pub fn squared_error(&mut self, estimate: Var, target: Var, mean: bool) -> Result<Var> {
        let d = self.sub(estimate, target)?;
        let sq = self.mul(d, d)?;
        Ok(if mean { self.mean(sq) } else { self.sum(sq) })
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Inner product with four independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4
        .remainder()
        .iter()
        .zip(b4.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn global_stats(x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    let y = x.iter().map(|v| (v - mean) * inv).collect();
    (y, vec![mean], vec![inv])
}

/// Running first and second moments over channels and frames `0..=t`.
///
/// The accumulation order (per frame, channels summed first) is shared with
/// the streaming path so both produce the same statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningMoments {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: usize,
}

impl RunningMoments {
    pub fn new() -> Self {
        RunningMoments {
            sum: 0.0,
            sum_sq: 0.0,
            count: 0,
        }
    }

    /// Folds in one frame and returns `(mean, 1/sqrt(var + eps))`.
    pub fn push<I: Iterator<Item = f64> + Clone>(&mut self, frame: I) -> (f64, f64) {
        let mut s = 0.0;
        let mut s2 = 0.0;
        let mut n = 0;
        for v in frame {
            s += v;
            s2 += v * v;
            n += 1;
        }
        self.sum += s;
        self.sum_sq += s2;
        self.count += n;
        let c = self.count as f64;
        let mean = self.sum / c;
        let var = self.sum_sq / c - mean * mean;
        (mean, 1.0 / (var + NORM_EPS).sqrt())
    }
}

fn cumulative_stats(x: &[f64], c: usize, t: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut moments = RunningMoments::new();
    let mut means = Vec::with_capacity(t);
    let mut invs = Vec::with_capacity(t);
    let mut y = vec![0.0; c * t];
    for f in 0..t {
        let (mean, inv) = moments.push((0..c).map(|ch| x[ch * t + f]));
        for ch in 0..c {
            y[ch * t + f] = (x[ch * t + f] - mean) * inv;
        }
        means.push(mean);
        invs.push(inv);
    }
    (y, means, invs)
}

struct ConvGeometry {
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    t_out: usize,
    spec: Conv1dSpec,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.left_pad == 0 && self.spec.right_pad == 0
    }

    /// Frame range `t` for which tap `kk` reads inside the unpadded input.
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let off = (kk * self.spec.dilation) as isize - self.spec.left_pad as isize;
        // need 0 <= t*s + off < t_in
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = {
            let lim = self.t_in as isize - off;
            if lim <= 0 {
                0
            } else {
                (lim + s - 1) / s
            }
        };
        let lo = lo.max(0) as usize;
        let hi = (hi_excl as usize).min(self.t_out);
        (lo, hi.max(lo))
    }

    fn src_index(&self, t: usize, kk: usize) -> usize {
        t * self.spec.stride + kk * self.spec.dilation - self.spec.left_pad
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.c_in * self.k * self.t_out];
        for i in 0..self.c_in {
            let xi = &x[i * self.t_in..(i + 1) * self.t_in];
            for kk in 0..self.k {
                let row =
                    &mut cols[(i * self.k + kk) * self.t_out..(i * self.k + kk + 1) * self.t_out];
                let (lo, hi) = self.valid_range(kk);
                for t in lo..hi {
                    row[t] = xi[self.src_index(t, kk)];
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        for i in 0..self.c_in {
            let dxi = &mut dx[i * self.t_in..(i + 1) * self.t_in];
            for kk in 0..self.k {
                let row = &cols[(i * self.k + kk) * self.t_out..(i * self.k + kk + 1) * self.t_out];
                let (lo, hi) = self.valid_range(kk);
                for t in lo..hi {
                    dxi[self.src_index(t, kk)] += row[t];
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let g = self.spec.groups;
        if g == 1 {
            if self.is_pointwise() {
                gemm(
                    self.c_out, self.c_in, self.t_out, w, false, x, false, out, 0.0,
                );
            } else {
                let cols = self.im2col(x);
                gemm(
                    self.c_out,
                    self.c_in * self.k,
                    self.t_out,
                    w,
                    false,
                    &cols,
                    false,
                    out,
                    0.0,
                );
            }
            return;
        }
        let cin_g = self.c_in / g;
        let cout_g = self.c_out / g;
        for o in 0..self.c_out {
            let grp = o / cout_g;
            let dst = &mut out[o * self.t_out..(o + 1) * self.t_out];
            for ii in 0..cin_g {
                let i = grp * cin_g + ii;
                let xi = &x[i * self.t_in..(i + 1) * self.t_in];
                for kk in 0..self.k {
                    let wv = w[(o * cin_g + ii) * self.k + kk];
                    let (lo, hi) = self.valid_range(kk);
                    for t in lo..hi {
                        dst[t] += wv * xi[self.src_index(t, kk)];
                    }
                }
            }
        }
    }

    fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        dout: &[f64],
        dx: Option<&mut Vec<f64>>,
        dw: Option<&mut Vec<f64>>,
    ) {
        let g = self.spec.groups;
        if g == 1 {
            let pointwise = self.is_pointwise();
            let ck = self.c_in * self.k;
            if let Some(dw) = dw {
                if pointwise {
                    gemm(self.c_out, self.t_out, ck, dout, false, x, true, dw, 1.0);
                } else {
                    let cols = self.im2col(x);
                    gemm(
                        self.c_out, self.t_out, ck, dout, false, &cols, true, dw, 1.0,
                    );
                }
            }
            if let Some(dx) = dx {
                if pointwise {
                    gemm(ck, self.c_out, self.t_out, w, true, dout, false, dx, 1.0);
                } else {
                    let mut dcols = vec![0.0; ck * self.t_out];
                    gemm(
                        ck, self.c_out, self.t_out, w, true, dout, false, &mut dcols, 0.0,
                    );
                    self.col2im(&dcols, dx);
                }
            }
            return;
        }
        let cin_g = self.c_in / g;
        let cout_g = self.c_out / g;
        let mut dx = dx;
        let mut dw = dw;
        for o in 0..self.c_out {
            let grp = o / cout_g;
            let go = &dout[o * self.t_out..(o + 1) * self.t_out];
            for ii in 0..cin_g {
                let i = grp * cin_g + ii;
                for kk in 0..self.k {
                    let widx = (o * cin_g + ii) * self.k + kk;
                    let (lo, hi) = self.valid_range(kk);
                    if let Some(dw) = dw.as_deref_mut() {
                        let xi = &x[i * self.t_in..(i + 1) * self.t_in];
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += go[t] * xi[self.src_index(t, kk)];
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        let dxi = &mut dx[i * self.t_in..(i + 1) * self.t_in];
                        for t in lo..hi {
                            dxi[self.src_index(t, kk)] += wv * go[t];
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
        }
        Op::Transpose(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                // output is c×r, input r×c
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, p) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                gemm(m, n, p, g, false, bv, true, da, 1.0);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                gemm(p, m, n, av, true, g, false, db, 1.0);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * f);
            }
        }
        Op::ChannelBias(x, b) => {
            let t = node.value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                add_into(dx, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, row) in db.iter_mut().zip(g.chunks(t)) {
                    *d += row.iter().sum::<f64>();
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * s * (1.0 - s);
                }
            }
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - s * s);
                }
            }
        }
        Op::Prelu(x, alpha) => {
            let t = node.value.shape()[1];
            let xv = val(*x);
            let av = val(*alpha);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (ch, (drow, (grow, xrow))) in dx
                    .chunks_mut(t)
                    .zip(g.chunks(t).zip(xv.chunks(t)))
                    .enumerate()
                {
                    for ((d, &gv), &v) in drow.iter_mut().zip(grow).zip(xrow) {
                        *d += if v < 0.0 { av[ch] * gv } else { gv };
                    }
                }
            }
            if let Some(da) = slot(nodes, grads, *alpha) {
                for (d, (grow, xrow)) in da.iter_mut().zip(g.chunks(t).zip(xv.chunks(t))) {
                    *d += grow
                        .iter()
                        .zip(xrow)
                        .filter(|(_, &v)| v < 0.0)
                        .map(|(&gv, &v)| gv * v)
                        .sum::<f64>();
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let d = *node.value.shape().last().unwrap();
            let y = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((drow, grow), yrow) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let inner = dot(grow, yrow);
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += yv * (gv - inner);
                    }
                }
            }
        }
        Op::Conv1d {
            input,
            kernel,
            bias,
            spec,
        } => {
            let (c_in, t_in) = (
                nodes[input.0].value.shape()[0],
                nodes[input.0].value.shape()[1],
            );
            let ks = nodes[kernel.0].value.shape();
            let (c_out, k) = (ks[0], ks[2]);
            let t_out = node.value.shape()[1];
            let geo = ConvGeometry {
                c_in,
                t_in,
                c_out,
                k,
                t_out,
                spec: *spec,
            };
            if let Some(b) = bias {
                if let Some(db) = slot(nodes, grads, *b) {
                    for (d, row) in db.iter_mut().zip(g.chunks(t_out)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            let xv = val(*input);
            let wv = val(*kernel);
            // two distinct slots: take one out temporarily
            let mut dw_buf = slot(nodes, grads, *kernel).map(std::mem::take);
            let dx = slot(nodes, grads, *input);
            geo.backward(xv, wv, g, dx, dw_buf.as_mut());
            if let Some(buf) = dw_buf {
                grads[kernel.0] = Some(buf);
            }
        }
        Op::ConvTranspose1d {
            input,
            kernel,
            stride,
        } => {
            let (c_in, t_in) = (
                nodes[input.0].value.shape()[0],
                nodes[input.0].value.shape()[1],
            );
            let ks = nodes[kernel.0].value.shape();
            let (c_out, k) = (ks[1], ks[2]);
            let t_out = node.value.shape()[1];
            let mut dcols = vec![0.0; c_out * k * t_in];
            for o in 0..c_out {
                let src = &g[o * t_out..(o + 1) * t_out];
                for kk in 0..k {
                    let row = &mut dcols[(o * k + kk) * t_in..(o * k + kk + 1) * t_in];
                    for (t, r) in row.iter_mut().enumerate() {
                        *r = src[t * stride + kk];
                    }
                }
            }
            let xv = val(*input);
            let wv = val(*kernel);
            if let Some(dx) = slot(nodes, grads, *input) {
                gemm(c_in, c_out * k, t_in, wv, false, &dcols, false, dx, 1.0);
            }
            if let Some(dw) = slot(nodes, grads, *kernel) {
                gemm(c_in, t_in, c_out * k, xv, false, &dcols, true, dw, 1.0);
            }
        }
        Op::Norm {
            input,
            gain,
            bias,
            kind,
            normalized,
            mean,
            inv_std,
        } => {
            let (c, t) = (node.value.shape()[0], node.value.shape()[1]);
            let gv = val(*gain);
            if let Some(db) = slot(nodes, grads, *bias) {
                for (d, row) in db.iter_mut().zip(g.chunks(t)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (d, (grow, yrow)) in dg.iter_mut().zip(g.chunks(t).zip(normalized.chunks(t))) {
                    *d += dot(grow, yrow);
                }
            }
            let xv = val(*input);
            if let Some(dx) = slot(nodes, grads, *input) {
                // upstream through the affine map
                let gy: Vec<f64> = g
                    .chunks(t)
                    .zip(gv)
                    .flat_map(|(row, &gn)| row.iter().map(move |v| v * gn))
                    .collect();
                match kind {
                    NormKind::Global => {
                        let n = (c * t) as f64;
                        let inv = inv_std[0];
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = dot(&gy, normalized) / n;
                        for ((d, &gi), &yi) in dx.iter_mut().zip(&gy).zip(normalized) {
                            *d += inv * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    NormKind::Cumulative => {
                        let mut d_s1 = vec![0.0; t];
                        let mut d_s2 = vec![0.0; t];
                        for f in 0..t {
                            let inv = inv_std[f];
                            let mut sum_g = 0.0;
                            let mut sum_gy = 0.0;
                            for ch in 0..c {
                                sum_g += gy[ch * t + f];
                                sum_gy += gy[ch * t + f] * normalized[ch * t + f];
                            }
                            let d_var = -0.5 * sum_gy * inv * inv;
                            let d_mean = -sum_g * inv - 2.0 * mean[f] * d_var;
                            let count = (c * (f + 1)) as f64;
                            d_s1[f] = d_mean / count;
                            d_s2[f] = d_var / count;
                        }
                        let mut acc1 = 0.0;
                        let mut acc2 = 0.0;
                        for f in (0..t).rev() {
                            acc1 += d_s1[f];
                            acc2 += d_s2[f];
                            let inv = inv_std[f];
                            for ch in 0..c {
                                let i = ch * t + f;
                                dx[i] += gy[i] * inv + acc1 + 2.0 * xv[i] * acc2;
                            }
                        }
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.numel();
                if let Some(dp) = slot(nodes, grads, *p) {
                    add_into(dp, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::Interleave(parts) => {
            let j_count = parts.len();
            let (t, s) = (node.value.shape()[0], node.value.shape()[2]);
            for (j, p) in parts.iter().enumerate() {
                if let Some(dp) = slot(nodes, grads, *p) {
                    for ch in 0..s {
                        for f in 0..t {
                            dp[ch * t + f] += g[(f * j_count + j) * s + ch];
                        }
                    }
                }
            }
        }
        Op::SliceRows { input, start } => {
            let n = node.value.numel();
            let row = n / node.value.shape()[0];
            if let Some(dx) = slot(nodes, grads, *input) {
                add_into(&mut dx[start * row..start * row + n], g);
            }
        }
        Op::SliceCols { input, start } => {
            let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
            let c = nodes[input.0].value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *input) {
                for i in 0..r {
                    add_into(
                        &mut dx[i * c + start..i * c + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
        }
        Op::HeadScores { query, keys, heads } => {
            let (j, f) = (
                nodes[keys.0].value.shape()[0],
                nodes[keys.0].value.shape()[1],
            );
            let w = f / heads;
            let q = val(*query);
            let kd = val(*keys);
            if let Some(dq) = slot(nodes, grads, *query) {
                for h in 0..*heads {
                    for r in 0..j {
                        let gv = g[h * j + r];
                        for x in 0..w {
                            dq[h * w + x] += gv * kd[r * f + h * w + x];
                        }
                    }
                }
            }
            if let Some(dk) = slot(nodes, grads, *keys) {
                for h in 0..*heads {
                    for r in 0..j {
                        let gv = g[h * j + r];
                        for x in 0..w {
                            dk[r * f + h * w + x] += gv * q[h * w + x];
                        }
                    }
                }
            }
        }
        Op::HeadMix {
            weights,
            values,
            heads,
        } => {
            let (j, f) = (
                nodes[values.0].value.shape()[0],
                nodes[values.0].value.shape()[1],
            );
            let w = f / heads;
            let wd = val(*weights);
            let vd = val(*values);
            if let Some(dw) = slot(nodes, grads, *weights) {
                for h in 0..*heads {
                    for r in 0..j {
                        dw[h * j + r] += dot(
                            &g[h * w..(h + 1) * w],
                            &vd[r * f + h * w..r * f + (h + 1) * w],
                        );
                    }
                }
            }
            if let Some(dv) = slot(nodes, grads, *values) {
                for h in 0..*heads {
                    for r in 0..j {
                        let a = wd[h * j + r];
                        for x in 0..w {
                            dv[r * f + h * w + x] += a * g[h * w + x];
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
