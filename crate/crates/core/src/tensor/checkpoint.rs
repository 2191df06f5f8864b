//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian):
//! `magic[4] version:u8 count:u32` then per record
//! `name_len:u32 name:utf8 rank:u32 dims:u64*rank payload:f64*prod(dims)`.

use std::io::{Read, Write};

use super::params::ParamEntry;
use super::{ParamGroup, ParamSet, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSQP";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint(params: &ParamSet, mut w: impl Write) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for e in params.entries() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.value.shape().len() as u32).to_le_bytes())?;
        for &d in e.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {}",
            ver[0]
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let group = name
            .split('.')
            .next()
            .and_then(ParamGroup::parse)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown group in {name}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        entries.push(ParamEntry {
            name,
            group,
            value: Tensor::new(shape, data)?,
        });
    }
    Ok(ParamSet::from_entries(entries))
}
