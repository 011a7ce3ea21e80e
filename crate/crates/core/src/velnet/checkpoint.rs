//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian u32, values little-endian f64):
//! magic `AVFC`, version, config JSON length, config JSON bytes, tensor count,
//! then per tensor: name length, name bytes, ndim, dims, row-major values.

use std::io::{Read, Write};
use std::path::Path;

use super::{NetConfig, NetParams};
use crate::diffkit::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AVFC";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn write_checkpoint(w: &mut impl Write, params: &NetParams) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    let cfg = serde_json::to_vec(params.config())?;
    put_u32(w, cfg.len())?;
    w.write_all(&cfg)?;
    put_u32(w, params.entries().len())?;
    for e in params.entries() {
        put_u32(w, e.name.len())?;
        w.write_all(e.name.as_bytes())?;
        put_u32(w, e.tensor.ndim())?;
        for &d in e.tensor.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(8 * e.tensor.numel());
        for v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<NetParams> {
    let magic = get_bytes(r, 4)?;
    if magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = get_u32(r)?;
    let config: NetConfig = serde_json::from_slice(&get_bytes(r, n)?)?;
    let count = get_u32(r)?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let n = get_u32(r)?;
        let name = String::from_utf8(get_bytes(r, n)?).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = get_u32(r)?;
        let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = get_bytes(r, 8 * numel)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    NetParams::from_named(config, named)
}

pub fn save_checkpoint(path: &Path, params: &NetParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetParams> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
