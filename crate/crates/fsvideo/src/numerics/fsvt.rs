//! FSVT tensor container.
//!
//! Little-endian layout: magic bytes `FSVT`, u32 rank, `rank` u64 dims, then
//! the f64 payload in row-major order. The reader is hardened against
//! untrusted input: it never panics, never trusts a header for allocation
//! sizing, and rejects non-finite payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSVT";
pub const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::malformed("FSVT", format!("truncated {what}")))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::malformed("FSVT", "bad magic bytes"));
    }
    let mut b4 = [0u8; 4];
    read_exact_or(r, &mut b4, "rank")?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(Error::malformed("FSVT", format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for i in 0..rank {
        let mut b8 = [0u8; 8];
        read_exact_or(r, &mut b8, "dims")?;
        let d = u64::from_le_bytes(b8);
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= u64::MAX / 8)
            .ok_or_else(|| Error::malformed("FSVT", format!("dimension {i} overflows element count")))?;
        shape.push(d as usize);
    }
    // Read incrementally so a lying header cannot force a huge allocation.
    let mut data: Vec<f64> = Vec::with_capacity((numel as usize).min(1 << 16));
    let mut b8 = [0u8; 8];
    for _ in 0..numel {
        read_exact_or(r, &mut b8, "payload")?;
        let v = f64::from_le_bytes(b8);
        if !v.is_finite() {
            return Err(Error::malformed("FSVT", "non-finite payload value"));
        }
        data.push(v);
    }
    Tensor::new(shape, data)
}

pub fn save_tensor<P: AsRef<Path>>(path: P, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Load a single tensor; trailing bytes after the payload are an error.
pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest)? {
        0 => Ok(t),
        _ => Err(Error::malformed("FSVT", "trailing bytes after payload")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SplitRng;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let mut buf = b"XSVT\x00\x00\x00\x00".to_vec();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
        buf.clear();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_huge_header_without_allocating() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(read_tensor(&mut buf.as_slice()).is_err());

        // plausible product but truncated payload
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1_000_000u64.to_le_bytes());
        buf.extend_from_slice(&7.0f64.to_le_bytes());
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let mut rng = SplitRng::new(0, 0);
        let t = Tensor::randn(&[3, 4, 5], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fsvt");
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(data in proptest::collection::vec(-1e12f64..1e12, 1..64)) {
            let t = Tensor::from_vec(data);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(t, back);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = read_tensor(&mut bytes.as_slice());
        }
    }
}
