//! CTNS binary tensor format.
//!
//! Layout: `b"CTNS"`, version `0x01`, dtype `0x00` (f32), ndim, then `ndim`
//! little-endian `u32` dims, then the row-major little-endian `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"CTNS";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;

#[derive(Debug, Error)]
pub enum CtnsError {
    #[error("bad magic bytes {0:02x?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0:#04x}")]
    Version(u8),
    #[error("unsupported dtype {0:#04x}")]
    Dtype(u8),
    #[error("truncated {section}: expected {expected} bytes, found {found}")]
    Truncated {
        section: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("invalid dims {0:?}")]
    Dims(Vec<usize>),
    #[error("tensor rank {0} exceeds 255")]
    Rank(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>, CtnsError> {
    let ndim = t.dims().len();
    if ndim > u8::MAX as usize {
        return Err(CtnsError::Rank(ndim));
    }
    let mut out = Vec::with_capacity(7 + 4 * ndim + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(ndim as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| CtnsError::Dims(t.dims().to_vec()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, CtnsError> {
    if bytes.len() < 7 {
        return Err(CtnsError::Truncated {
            section: "header",
            expected: 7,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(CtnsError::Magic(magic));
    }
    if bytes[4] != VERSION {
        return Err(CtnsError::Version(bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(CtnsError::Dtype(bytes[5]));
    }
    let ndim = bytes[6] as usize;
    let dims_end = 7 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(CtnsError::Truncated {
            section: "dims",
            expected: dims_end,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[7..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CtnsError::Dims(dims.clone()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(dims_end))
        .ok_or_else(|| CtnsError::Dims(dims.clone()))?;
    if bytes.len() < expected {
        return Err(CtnsError::Truncated {
            section: "payload",
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CtnsError::Trailing(bytes.len() - expected));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Tensor::new(dims.clone(), data).map_err(|_| CtnsError::Dims(dims))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<(), CtnsError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>, CtnsError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_round_trip() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..7], &[b'C', b'T', b'N', b'S', 1, 0, 2]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.dims(), t.dims());
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_errors() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let good = encode(&t).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CtnsError::Magic(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(CtnsError::Version(2))));
        let mut bad = good.clone();
        bad[5] = 1;
        assert!(matches!(decode(&bad), Err(CtnsError::Dtype(1))));
        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(CtnsError::Truncated { section: "payload", .. })
        ));
        assert!(matches!(
            decode(&good[..9]),
            Err(CtnsError::Truncated { section: "dims", .. })
        ));
    }
}
