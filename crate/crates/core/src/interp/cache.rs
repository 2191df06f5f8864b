//! Binary coefficient cache.
//!
//! Little-endian layout:
//! `magic[4] version:u8 subjects:u32 channels:u32 roles:u8*channels`, then
//! for each subject `knots:u32` followed by, per channel,
//! `max(knots-1, 1)` records of `a b c d` as f64.

use std::io::{Read, Write};

use super::{ChannelRole, ChannelSpline, ControlSignal, CubicPiece, InterpError, Result};

pub const CACHE_MAGIC: [u8; 4] = *b"CSQC";
pub const CACHE_VERSION: u8 = 1;

fn io_err(e: std::io::Error) -> InterpError {
    InterpError::Cache(e.to_string())
}

pub fn write_cache(signals: &[ControlSignal], mut w: impl Write) -> Result<()> {
    let roles: Vec<ChannelRole> = signals
        .first()
        .map(|s| s.roles().to_vec())
        .unwrap_or_default();
    if signals.iter().any(|s| s.roles() != roles.as_slice()) {
        return Err(InterpError::Cache(
            "subjects disagree on channel layout".into(),
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CACHE_MAGIC);
    buf.push(CACHE_VERSION);
    buf.extend_from_slice(&(signals.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(roles.len() as u32).to_le_bytes());
    buf.extend(roles.iter().map(|r| r.code()));
    for s in signals {
        buf.extend_from_slice(&(s.n_knots() as u32).to_le_bytes());
        for ch in s.channels() {
            for p in ch.pieces() {
                for v in p.coeffs() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    w.write_all(&buf).map_err(io_err)
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}

pub fn read_cache(mut r: impl Read) -> Result<Vec<ControlSignal>> {
    if read_array::<4>(&mut r)? != CACHE_MAGIC {
        return Err(InterpError::Cache("bad magic".into()));
    }
    let [version] = read_array::<1>(&mut r)?;
    if version != CACHE_VERSION {
        return Err(InterpError::Cache(format!("unsupported version {version}")));
    }
    let subjects = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let channels = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut roles = Vec::with_capacity(channels);
    for _ in 0..channels {
        let [c] = read_array::<1>(&mut r)?;
        roles.push(
            ChannelRole::from_code(c)
                .ok_or_else(|| InterpError::Cache(format!("unknown channel role {c}")))?,
        );
    }
    let mut out = Vec::with_capacity(subjects);
    for _ in 0..subjects {
        let knots = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let records = knots.saturating_sub(1).max(1);
        let mut splines = Vec::with_capacity(channels);
        for _ in 0..channels {
            let mut pieces = Vec::with_capacity(records);
            for _ in 0..records {
                let mut c = [0.0; 4];
                for v in &mut c {
                    *v = f64::from_le_bytes(read_array(&mut r)?);
                }
                pieces.push(CubicPiece::new(c[0], c[1], c[2], c[3]));
            }
            splines.push(ChannelSpline::from_pieces(pieces, knots)?);
        }
        out.push(ControlSignal::new(splines, roles.clone())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{build_control_signal, Scheme};

    #[test]
    fn roundtrip_bit_exact() {
        let roles = [ChannelRole::Feature, ChannelRole::Count, ChannelRole::Time];
        let a = build_control_signal(
            &[
                vec![Some(0.3), None, Some(-1.25), Some(2.0)],
                vec![Some(1.0), Some(1.0), Some(2.0), Some(3.0)],
                vec![Some(0.0), Some(0.7), Some(1.9), Some(2.2)],
            ],
            &roles,
            Scheme::Natural,
        )
        .unwrap();
        let b = build_control_signal(
            &[vec![Some(4.0)], vec![Some(1.0)], vec![Some(0.5)]],
            &roles,
            Scheme::Natural,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_cache(&[a.clone(), b.clone()], &mut buf).unwrap();
        let back = read_cache(&buf[..]).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn truncated_file_is_error() {
        let roles = [ChannelRole::Time];
        let a = build_control_signal(&[vec![Some(0.0), Some(1.0)]], &roles, Scheme::Linear)
            .unwrap();
        let mut buf = Vec::new();
        write_cache(&[a], &mut buf).unwrap();
        buf.pop();
        assert!(read_cache(&buf[..]).is_err());
    }
}
