//! Flat binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EEGB"            4 bytes magic
//! version           u8 (currently 1)
//! record count      u32
//! per record:
//!   name length     u32
//!   name            UTF-8 bytes
//!   rank            u32
//!   extents         rank x u64
//!   values          product(extents) x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelGraph, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EEGB";
pub const VERSION: u8 = 1;

pub fn write_tensors<W: Write, F: Real>(mut w: W, records: &[(String, Tensor<F>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            let v = v.to_f32().unwrap_or(f32::NAN);
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Container(format!("truncated while reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read, F: Real>(mut r: R) -> Result<Vec<(String, Tensor<F>)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Container(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version, "version")?;
    if version[0] != VERSION {
        return Err(Error::Container(format!("unsupported version {}", version[0])));
    }
    let count = read_u32(&mut r, "record count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Container(format!("record {i}: name is not UTF-8")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "extent")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

impl<F: Real> ModelGraph<F> {
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensors(BufWriter::new(File::create(path)?), &self.state())
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = read_tensors(BufReader::new(File::open(path)?))?;
        self.load_state(&records)
    }

    pub fn weights_to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &self.state()).expect("in-memory write");
        buf
    }

    pub fn load_weights_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let records = read_tensors(bytes)?;
        self.load_state(&records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f32>(), 1..64),
            name in "[a-z_.0-9]{0,20}",
        ) {
            let n = values.len();
            let t = Tensor::<f32>::from_vec(&[1, n], values.clone()).unwrap();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &[(name.clone(), t)]).unwrap();
            let back: Vec<(String, Tensor<f32>)> = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.shape(), &[1, n][..]);
            for (a, b) in back[0].1.data().iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".to_string(), t)]).unwrap();
        let mut want = b"EEGB".to_vec();
        want.push(1);
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'w');
        want.extend(1u32.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensors::<_, f32>(&b"XXXX\x01\0\0\0\0"[..]).is_err());
        let t = Tensor::<f32>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a".into(), t)]).unwrap();
        buf.truncate(buf.len() - 2);
        let err = read_tensors::<_, f32>(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
