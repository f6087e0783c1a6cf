//! The `MTEN` raw tensor format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MTEN" | rank: u32 | rank x dim: u32 | f32 data, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTEN";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = read_u32(&mut r)? as usize;
        if d == 0 {
            return Err(Error::Format("zero dimension".into()));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    if r.len() != 4 * n {
        return Err(Error::Format(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            4 * n,
            r.len()
        )));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Missing {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"MTEN");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"MTE").is_err());
        assert!(decode(b"XTEN\0\0\0\0").is_err());
        let mut b = encode(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        b.pop();
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn scalar_has_rank_zero() {
        let b = encode(&Tensor::scalar(7.0));
        assert_eq!(b.len(), 12);
        assert_eq!(decode(&b).unwrap().item(), 7.0);
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32) * 0.37 - 100.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
