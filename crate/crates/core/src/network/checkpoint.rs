//! Little-endian binary checkpoints.
//!
//! Layout: magic `GIFN`, version `u32 = 1`, the seven architecture values
//! (six `u32` then `mlp_ratio` as `f32`), tensor count `u32`, then per tensor:
//! name length `u16`, UTF-8 name, rank `u8`, dims `u32 × rank`, raw `f32` data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::{ArchConfig, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GIFN";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 7 * 4 + 4;

/// Exact encoded size of `params` in bytes.
pub fn checkpoint_size(params: &ModelParams) -> usize {
    HEADER_BYTES
        + params
            .iter()
            .map(|(name, var)| 2 + name.len() + 1 + 4 * var.rank() + 4 * var.elem_count())
            .sum::<usize>()
}

fn io_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Checkpoint(e.to_string())
    }
}

pub fn write_checkpoint(params: &ModelParams, mut out: impl Write) -> Result<()> {
    let cfg = params.config();
    let mut buf = Vec::with_capacity(checkpoint_size(params));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.base_channels,
        cfg.enc_layers,
        cfg.branch_layers,
        cfg.embed_dim,
        cfg.heads,
        cfg.window,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.mlp_ratio.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, var) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(var.rank() as u8);
        for d in var.dims() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        let data: Vec<f32> = var
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io_err)?;
    out.flush().map_err(io_err)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut ints = [0usize; 6];
    for v in ints.iter_mut() {
        *v = read_u32(&mut r)? as usize;
    }
    let config = ArchConfig {
        base_channels: ints[0],
        enc_layers: ints[1],
        branch_layers: ints[2],
        embed_dim: ints[3],
        heads: ints[4],
        window: ints[5],
        mlp_ratio: f32::from_bits(read_u32(&mut r)?),
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("embedded architecture invalid: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(io_err)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(io_err)?;
        let dims = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io_err)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    ModelParams::from_tensors(&config, tensors).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
