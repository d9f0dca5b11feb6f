// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor archive file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LCGT"  u8 version=1  u32 count
//! per tensor:
//!   u16 name_len  name (UTF-8)  u8 dtype (0 = f32)  u8 rank  u32 dims[rank]
//!   payload: row-major f32 values
//! ```

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LCGT";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("tensor {name:?} not in archive")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("tensor {name:?} not in archive")))?;
        Ok(self.entries.remove(idx).1)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let name_len = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.reserve(t.numel() * 4);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("name not utf-8: {e}")))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("unsupported dtype {dtype} for {name}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut a = TensorArchive::new();
        a.push("w", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let b = a.to_bytes().unwrap();
        assert_eq!(&b[..4], b"LCGT");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..11], &1u16.to_le_bytes());
        assert_eq!(b[11], b'w');
        assert_eq!(b[12], 0); // dtype f32
        assert_eq!(b[13], 2); // rank
        assert_eq!(&b[14..18], &1u32.to_le_bytes());
        assert_eq!(&b[18..22], &2u32.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(TensorArchive::from_bytes(b"XXXX").is_err());
        let mut a = TensorArchive::new();
        a.push("x", Tensor::scalar(1.0));
        let mut b = a.to_bytes().unwrap();
        b.pop();
        assert!(TensorArchive::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                (
                    "[a-z_.0-9]{1,12}",
                    prop::collection::vec(1usize..4, 1..4),
                    any::<u32>(),
                ),
                0..5,
            )
        ) {
            let mut a = TensorArchive::new();
            for (name, shape, seed) in &tensors {
                let t = Tensor::from_fn(shape, |i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff));
                a.push(name.clone(), t);
            }
            let bytes = a.to_bytes().unwrap();
            let back = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            for ((n1, t1), (n2, t2)) in a.entries().iter().zip(back.entries()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
