//! The TRUP1 single-tensor binary format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TRUP"  0x01  rank:u32  dims:[u32; rank]  data:[f32; product(dims)]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TRUP";
pub const VERSION: u8 = 0x01;

pub fn write_trup1<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let chunk = bytes
        .get(*at..*at + 4)
        .ok_or_else(|| bad("truncated TRUP1 header"))?;
    *at += 4;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
}

pub fn decode_trup1(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(bad("bad TRUP1 magic bytes"));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported TRUP1 version {}", bytes[4])));
    }
    let mut at = 5;
    let rank = read_u32(bytes, &mut at)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, &mut at)? as usize);
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[at..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "TRUP1 payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn read_trup1<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_trup1(&bytes)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_trup1(t, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_trup1(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut bytes = Vec::new();
        write_trup1(&t, &mut bytes).unwrap();
        let mut want = b"TRUP\x01".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let t = Tensor::ones(&[3]);
        let mut bytes = Vec::new();
        write_trup1(&t, &mut bytes).unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(decode_trup1(&wrong_magic), Err(Error::Checkpoint(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        assert!(decode_trup1(&wrong_version).is_err());
        assert!(decode_trup1(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let mut rng = crate::rng::seeded(seed);
            let t = Tensor::randn(&dims, &mut rng);
            let mut bytes = Vec::new();
            write_trup1(&t, &mut bytes).unwrap();
            let back = decode_trup1(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
