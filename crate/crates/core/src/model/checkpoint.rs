//! Binary checkpoint: a config header followed by named little-endian `f32` tensors.
//!
//! Layout: magic `AECMLTCN`, `u32` version, eleven `u32` config fields, three
//! `u8` flags (causal, fusion, attention scale), `u32` tensor count, then per
//! tensor a `u32`-prefixed name, `u32` rank, `u32` dims and the data.

use std::path::Path;

use super::config::{Fusion, ModelConfig};
use super::params::ModelParams;
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::Result;
use crate::nn::{AttentionScale, ParamTree};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AECMLTCN";
const VERSION: u32 = 1;

pub fn encode_checkpoint(cfg: &ModelConfig, params: &ModelParams<Tensor>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    for v in [
        cfg.filters,
        cfg.filter_len,
        cfg.stride,
        cfg.bottleneck,
        cfg.skip_channels,
        cfg.conv_channels,
        cfg.kernel,
        cfg.blocks_per_repeat,
        cfg.repeats,
        cfg.attention_dim,
        cfg.heads,
    ] {
        w.u32(v as u32);
    }
    w.u8(cfg.causal as u8);
    w.u8(match cfg.fusion {
        Fusion::Concat => 0,
        Fusion::Sum => 1,
    });
    w.u8(match cfg.attention_scale {
        AttentionScale::KeyDim => 0,
        AttentionScale::HeadDim => 1,
    });
    let mut count = 0u32;
    params.visit("", &mut |_, _| count += 1);
    w.u32(count);
    params.visit("", &mut |name, t| {
        w.str(name);
        w.u32(t.rank() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.bytes(&(v as f32).to_le_bytes());
        }
    });
    w.buf
}

pub fn decode_checkpoint(data: &[u8], path: &Path) -> Result<(ModelConfig, ModelParams<Tensor>)> {
    let mut r = Reader::new(data, path);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 11];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let causal = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.fail(format!("bad causal flag {v}"))),
    };
    let fusion = match r.u8()? {
        0 => Fusion::Concat,
        1 => Fusion::Sum,
        v => return Err(r.fail(format!("bad fusion flag {v}"))),
    };
    let attention_scale = match r.u8()? {
        0 => AttentionScale::KeyDim,
        1 => AttentionScale::HeadDim,
        v => return Err(r.fail(format!("bad attention scale flag {v}"))),
    };
    let [filters, filter_len, stride, bottleneck, skip_channels, conv_channels, kernel, blocks_per_repeat, repeats, attention_dim, heads] =
        fields;
    let cfg = ModelConfig {
        filters,
        filter_len,
        stride,
        bottleneck,
        skip_channels,
        conv_channels,
        kernel,
        blocks_per_repeat,
        repeats,
        attention_dim,
        heads,
        causal,
        fusion,
        attention_scale,
    };
    cfg.validate().map_err(|e| r.fail(e.to_string()))?;

    let mut params = ModelParams::zeros(&cfg);
    let expected: usize = {
        let mut n = 0;
        params.visit("", &mut |_, _| n += 1);
        n
    };
    let count = r.u32()? as usize;
    if count != expected {
        return Err(r.fail(format!("{count} tensors, configuration needs {expected}")));
    }
    let mut failure = None;
    params.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = read_tensor(&mut r, name, slot) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    r.finish()?;
    Ok((cfg, params))
}

fn read_tensor(r: &mut Reader, name: &str, slot: &mut Tensor) -> Result<()> {
    let found = r.str()?;
    if found != name {
        return Err(r.fail(format!("expected tensor `{name}`, found `{found}`")));
    }
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    if shape != slot.shape() {
        return Err(r.fail(format!(
            "tensor `{name}` has shape {shape:?}, expected {:?}",
            slot.shape()
        )));
    }
    for v in slot.data_mut() {
        *v = r.f32()? as f64;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams<Tensor>) -> Result<()> {
    write_file(path, &encode_checkpoint(cfg, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<Tensor>)> {
    decode_checkpoint(&read_file(path)?, path)
}
