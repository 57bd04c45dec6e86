//! The DFBP tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DFBP"            magic
//! u32               format version (1)
//! u32 + bytes       header, UTF-8 JSON
//! u32               tensor count
//! per tensor:
//!   u32 + bytes     name, UTF-8
//!   u8              dtype code (0 = f32)
//!   u32             ndim
//!   u64 × ndim      dims
//!   payload         numel × 4 bytes, f32 little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DFBP";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Decoded file: JSON header text plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(header: String) -> Self {
        Container {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let header = r.string("header")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name = r.string(&format!("tensor {i} name"))?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Dtype(dtype));
            }
            let ndim = r.u32("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: dims overflow")))?;
            let bytes_needed = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: size overflow")))?;
            let payload = r.take(bytes_needed, &format!("payload of {name:?}"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

const TENSOR_HEADER: &str = r#"{"kind":"tensor"}"#;

/// Writes a single-tensor container.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor<f32>) -> Result<()> {
    let mut c = Container::new(TENSOR_HEADER.to_string());
    c.push("tensor", tensor.clone());
    c.save(path)
}

/// Reads a single-tensor container.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let c = Container::load(path)?;
    match <[_; 1]>::try_from(c.tensors) {
        Ok([(_, t)]) => Ok(t),
        Err(v) => Err(Error::Format(format!(
            "expected exactly one tensor, found {}",
            v.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new(r#"{"a":1}"#.into());
        c.push("w", Tensor::new([2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30]).unwrap());
        c.push("b", Tensor::new([1], vec![0.125]).unwrap());
        c
    }

    #[test]
    fn exact_layout() {
        let mut c = Container::new("{}".into());
        c.push("x", Tensor::new([1], vec![1.0]).unwrap());
        let bytes = c.encode();
        let mut want = b"DFBP".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"{}");
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(b"x");
        want.push(0);
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let bytes = c.encode();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        for ((_, a), (_, b)) in c.tensors.iter().zip(&back.tensors) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::decode(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Container::decode(&bad), Err(Error::Version(2))));
        assert!(matches!(Container::decode(&[]), Err(Error::Truncated(_))));
        assert!(matches!(
            Container::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        let dtype_at = 4 + 4 + 4 + 7 + 4 + 4 + 1;
        assert_eq!(bad[dtype_at], 0);
        bad[dtype_at] = 3;
        assert!(matches!(Container::decode(&bad), Err(Error::Dtype(3))));
    }

    #[test]
    fn single_tensor_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dfbp");
        let t = Tensor::new([2, 2, 1], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Truncated(_))));
    }

    proptest! {
        #[test]
        fn any_tensor_roundtrips(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let mut c = Container::new("{}".into());
            c.push("t", Tensor::new(dims, data).unwrap());
            let bytes = c.encode();
            prop_assert_eq!(Container::decode(&bytes).unwrap().encode(), bytes);
        }
    }
}
