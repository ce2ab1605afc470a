//! Binary parameter snapshots.
//!
//! Layout: the magic bytes `FFT1`, then zero or more records of
//! `name_len: u64`, `name: [u8; name_len]` (UTF-8), `rank: u64`,
//! `extents: [u64; rank]`, `values: [f32; Π extents]`, all little-endian.

use std::io::Write;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FFT1";

const MAX_RANK: u64 = 8;

pub fn encode(records: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected FFT1".into(),
        });
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u64("name length")?;
        if name_len > (bytes.len() - r.pos) as u64 {
            return Err(r.fail(format!("name length {name_len} exceeds file")));
        }
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| r.fail("name is not UTF-8"))?
            .to_owned();
        let rank = r.u64("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(r.fail(format!("tensor {name:?} has unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("extent")?;
            if d == 0 {
                return Err(r.fail(format!("tensor {name:?} has a zero extent")));
            }
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= (bytes.len() as u64) / 4)
                .ok_or_else(|| r.fail(format!("tensor {name:?} is larger than the file")))?;
            shape.push(d as usize);
        }
        let raw = r.take(numel as usize * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_file(path: &std::path::Path, records: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(records))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..4),
            seed in any::<u32>(),
        ) {
            let tensors: Vec<Tensor<f32>> = shapes
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    Tensor::from_fn(s, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add((i * 31 + k) as u32) & 0x7f7f_ffff))
                })
                .collect();
            let records: Vec<(String, &Tensor<f32>)> =
                tensors.iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect();
            let bytes = encode(&records);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((name, t), (orig_name, orig)) in back.iter().zip(&records) {
                prop_assert_eq!(name, orig_name);
                prop_assert_eq!(t.shape(), orig.shape());
                let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = orig.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(encode(&back.iter().map(|(n, t)| (n.clone(), t)).collect::<Vec<_>>()), bytes);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::<f32>::ones(&[2, 3]);
        let bytes = encode(&[("w".into(), &t)]);
        for cut in [2, 10, 20, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::<f32>::new(vec![1], vec![1.0]).unwrap();
        let bytes = encode(&[("a".into(), &t)]);
        let mut expected = b"FFT1".to_vec();
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(b'a');
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }
}
