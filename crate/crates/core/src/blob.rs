//! Raw tensor files: a 16-byte header (`SECO`, rank, two dims as
//! little-endian `u32`) followed by little-endian `f32` values in row-major
//! order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SECO";

pub fn encode(shape: &[usize], data: impl IntoIterator<Item = f32>) -> Result<Vec<u8>> {
    if shape.len() > 2 {
        return Err(Error::Checkpoint(format!("rank {} tensors are not supported", shape.len())));
    }
    let mut dims = [0u32; 2];
    for (d, s) in dims.iter_mut().zip(shape) {
        *d = u32::try_from(*s).map_err(|_| Error::Checkpoint(format!("dimension {s} too large")))?;
    }
    let count: usize = shape.iter().product();
    let mut out = Vec::with_capacity(16 + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    out.extend_from_slice(&dims[0].to_le_bytes());
    out.extend_from_slice(&dims[1].to_le_bytes());
    let mut written = 0;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
        written += 1;
    }
    if written != count {
        return Err(Error::Checkpoint(format!("expected {count} values, got {written}")));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing SECO header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let rank = word(4);
    if rank > 2 {
        return Err(Error::Checkpoint(format!("unsupported rank {rank}")));
    }
    let shape: Vec<usize> = [word(8), word(12)][..rank].to_vec();
    let count: usize = shape.iter().product();
    let body = &bytes[16..];
    if body.len() != 4 * count {
        return Err(Error::Checkpoint(format!(
            "payload of {} bytes does not match shape {shape:?}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((shape, data))
}

pub fn write(path: &Path, shape: &[usize], data: impl IntoIterator<Item = f32>) -> Result<()> {
    fs::write(path, encode(shape, data)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let bytes = encode(&[2, 3], (0..6).map(|v| v as f32 * 0.5)).unwrap();
        assert_eq!(&bytes[..4], b"SECO");
        assert_eq!(bytes.len(), 16 + 24);
        let (shape, data) = decode(&bytes).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(data[5], 2.5);
        let (shape, _) = decode(&encode(&[4], [1.0; 4]).unwrap()).unwrap();
        assert_eq!(shape, vec![4]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(encode(&[2, 2], [1.0; 3]).is_err());
        assert!(encode(&[1, 1, 1], [1.0]).is_err());
        assert!(decode(b"NOPE").is_err());
        let mut bytes = encode(&[2], [1.0, 2.0]).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
