//! PFTENSOR binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PFTENSOR"            8-byte magic
//! rank: u32
//! extents: u32 × rank
//! element width: u32    4 (f32) or 8 (f64)
//! payload               IEEE-754 little-endian, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"PFTENSOR";

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.rank() + t.len() * S::WIDTH as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.extend_from_slice(&S::WIDTH.to_le_bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "truncated PFTENSOR: expected {n} bytes of {what} at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a tensor whose stored width matches `S`.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (shape, width, payload) = decode_header(bytes)?;
    if width != S::WIDTH {
        return Err(Error::Data(format!(
            "PFTENSOR holds {width}-byte elements, expected {} ({})",
            S::WIDTH,
            S::NAME
        )));
    }
    let data = payload.chunks_exact(width as usize).map(S::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes a tensor of either width, converting to `S`.
pub fn decode_any<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (_, width, _) = decode_header(bytes)?;
    match width {
        4 => Ok(decode::<f32>(bytes)?.cast()),
        8 => Ok(decode::<f64>(bytes)?.cast()),
        _ => unreachable!("validated in decode_header"),
    }
}

fn decode_header(bytes: &[u8]) -> Result<(Vec<usize>, u32, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Integrity("bad PFTENSOR magic".into()));
    }
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Integrity(format!("implausible PFTENSOR rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("extent")? as usize);
    }
    let width = r.u32("element width")?;
    if width != 4 && width != 8 {
        return Err(Error::Integrity(format!("unknown PFTENSOR element width {width}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Integrity("PFTENSOR extents overflow".into()))?;
    let payload = r.take(n * width as usize, "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after PFTENSOR payload",
            bytes.len() - r.pos
        )));
    }
    Ok((shape, width, payload))
}

pub fn save<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_any<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_any(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], b"PFTENSOR");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &3u32.to_le_bytes());
        assert_eq!(&b[20..24], &4u32.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24 + 6 * 4);
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let t = Tensor::<f64>::from_f64(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = encode(&t);
        for cut in [0, 5, 12, 19, b.len() - 1] {
            assert!(matches!(decode::<f64>(&b[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode::<f64>(&long), Err(Error::Integrity(_))));
    }

    #[test]
    fn width_mismatch_is_reported() {
        let t = Tensor::<f32>::from_f64(&[1], &[1.5]).unwrap();
        assert!(matches!(decode::<f64>(&encode(&t)), Err(Error::Data(_))));
        assert_eq!(decode_any::<f64>(&encode(&t)).unwrap().data(), &[1.5]);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::<f64>::new(shape, data).unwrap();
            let back = decode::<f64>(&encode(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
