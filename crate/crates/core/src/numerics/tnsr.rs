//! `TNSR` raw tensor files.
//!
//! Layout: magic `54 4E 53 52`, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! `rank` × u64 LE dims, then the row-major payload in little-endian.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TNSR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::format("rank", format!("{} exceeds 255", t.rank())))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + width * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(dtype as u8);
    out.push(rank);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 || bytes[..4] != MAGIC {
        return Err(Error::format("magic", "not a TNSR file"));
    }
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::format("dtype", format!("unknown dtype {other}"))),
    };
    let rank = bytes[5] as usize;
    let dims_end = 6 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(Error::format("dims", "truncated"));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("dims", "element count overflows"))?;
    let payload = &bytes[dims_end..];
    let data: Vec<f64> = match dtype {
        DType::F32 => {
            if payload.len() != count * 4 {
                return Err(Error::format("payload", "length does not match shape"));
            }
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        DType::F64 => {
            if payload.len() != count * 8 {
                return Err(Error::format("payload", "length does not match shape"));
            }
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
    };
    Tensor::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode(t, dtype)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t, DType::F32).unwrap();
        let mut expected = b"TNSR".to_vec();
        expected.extend([0u8, 2]);
        expected.extend(1u64.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1f32.to_le_bytes());
        expected.extend((-2f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let t = Tensor::new(vec![3], vec![0.1, 1e-300, -7.25]).unwrap();
        assert_eq!(decode(&encode(&t, DType::F64).unwrap()).unwrap(), t);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE\x00\x00").is_err());
        let t = Tensor::zeros(&[2]);
        let mut bytes = encode(&t, DType::F64).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
