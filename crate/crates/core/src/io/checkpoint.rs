//! Model checkpoints.
//!
//! ```text
//! "XPRCKPT1" | config_len u32 | config JSON | n_tensors u32
//! | per tensor: name_len u16, name, ndims u8, dims ndims x u32, values x f32
//! ```
//!
//! Only trainable tensors are stored; the fixed NetVLAD projection is
//! regenerated from the config seed.

use std::path::Path;

use super::{put_config, read_file, write_file, Reader};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XPRCKPT1";

pub fn write_checkpoint(params: &ModelParams, cfg: &Config) -> Result<Vec<u8>> {
    if !params.matches_config(cfg) {
        return Err(Error::Shape("parameters do not match the config".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_config(&mut out, cfg);
    let tensors = params.trainable();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        shape.iter().for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        for &v in values {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("tensor {name}")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path, bytes: &[u8]) -> Result<(ModelParams, Config)> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let cfg = r.config()?;
    let mut params = ModelParams::init(&cfg);
    let expected: Vec<(&'static str, Vec<usize>)> = params
        .trainable()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let n = r.u32()? as usize;
    if n != expected.len() {
        return Err(r.err(format!("{n} tensors, expected {}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(n);
    for (name, shape) in &expected {
        let at = r.pos;
        let len = r.u16()? as usize;
        let got = r.take(len)?;
        if got != name.as_bytes() {
            return Err(r.err_at(at, format!("expected tensor {name}, found {:?}", String::from_utf8_lossy(got))));
        }
        let ndims = r.u8()? as usize;
        let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(r.err_at(at, format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = dims.iter().product();
        loaded.push((0..count).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?);
    }
    r.finish()?;
    for (dst, src) in params.trainable_mut().into_iter().zip(loaded) {
        dst.copy_from_slice(&src);
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, cfg: &Config) -> Result<()> {
    write_file(path, &write_checkpoint(params, cfg)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Config)> {
    read_checkpoint(path, &read_file(path)?)
}
