//! Checkpoint files.
//!
//! Layout (all integers little-endian `u32`): magic `MILK`, version, tensor
//! count, then per tensor its name length, UTF-8 name, rank, dims and the
//! row-major `f32` values.

use std::path::Path;

use deepmil::{BackboneConfig, ModelParams, Preset, Tensor};

use crate::error::{CliError, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"MILK";
pub const VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    put(&mut out, VERSION as usize);
    put(&mut out, params.len());
    for (name, t) in params.iter() {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.dims().len());
        for &d in t.dims() {
            put(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CliError::Truncated {
                path: self.path.to_path_buf(),
                what: what.to_string(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut c = Cursor { path, bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CliError::BadMagic {
            path: path.to_path_buf(),
            found: magic.to_vec(),
        });
    }
    let version = c.u32("version")? as u32;
    if version != VERSION {
        return Err(CliError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let count = c.u32("tensor count")?;
    let mut params = ModelParams::new();
    for i in 0..count {
        let len = c.u32(&format!("name length of tensor {i}"))?;
        let name = std::str::from_utf8(c.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| CliError::format(path, format!("name of tensor {i} is not UTF-8")))?
            .to_string();
        if params.get(&name).is_some() {
            return Err(CliError::format(path, format!("tensor `{name}` appears twice")));
        }
        let rank = c.u32(&format!("rank of `{name}`"))?;
        let dims = (0..rank)
            .map(|_| c.u32(&format!("dims of `{name}`")))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CliError::format(path, format!("dims {dims:?} of `{name}` overflow")))?;
        let raw = c.take(n, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(name, Tensor::new(dims, data)?);
    }
    if c.pos != bytes.len() {
        return Err(CliError::format(
            path,
            format!("{} trailing bytes after the last tensor", bytes.len() - c.pos),
        ));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    fsutil::write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    decode(path, &fsutil::read(path)?)
}

/// Loads a checkpoint and checks it against `config`'s parameter layout;
/// a mismatch names the offending tensor.
pub fn load_for(path: &Path, config: &BackboneConfig) -> Result<ModelParams<f32>> {
    let params = load(path)?;
    params.check_layout(&config.zero_params::<f32>())?;
    Ok(params)
}

/// The preset whose parameter layout matches `params`, if any.
pub fn infer_preset(params: &ModelParams<f32>) -> Option<Preset> {
    Preset::ALL
        .into_iter()
        .find(|p| params.check_layout(&p.config().zero_params::<f32>()).is_ok())
}
