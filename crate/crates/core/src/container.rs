//! Binary container for named f64 tensors plus string metadata.
//!
//! ```text
//! "ABBC" | version u32 | meta count u32 | (key str, value str)*
//!        | tensor count u32 | (name str, ndim u32, dims u64*, data f64*)*
//!        | checksum u64
//! ```
//!
//! Strings are u32-length-prefixed UTF-8, numbers little-endian, and the
//! checksum covers every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::format::{put_string, FormatError, Reader};
use crate::hash::checksum64;

const MAGIC: &[u8; 4] = b"ABBC";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Result<&str, FormatError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| FormatError::Invalid(format!("container lacks metadata `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_string(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let checksum = checksum64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(FormatError::BadMagic { expected: "ABBC" });
        }
        let version = r.u32("version")?;
        if version != CONTAINER_VERSION {
            return Err(FormatError::VersionMismatch { found: version, expected: CONTAINER_VERSION });
        }
        let n_meta = r.u32("metadata count")?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            meta.insert(k, v);
        }
        let n_tensors = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let ndim = r.u32("tensor rank")?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(r.u64("tensor dim")? as usize);
            }
            let count: usize = shape.iter().product();
            if count.saturating_mul(8) > r.remaining() {
                return Err(FormatError::Truncated(format!("tensor `{name}` data")));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64("tensor data")?);
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        let body_len = r.position();
        let stored = r.u64("checksum")?;
        let computed = checksum64(&bytes[..body_len]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        if r.remaining() != 0 {
            return Err(FormatError::Invalid(format!("{} trailing bytes after checksum", r.remaining())));
        }
        Ok(Container { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| FormatError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::default();
        c.meta.insert("kind".into(), "test".into());
        c.tensors.push(NamedTensor { name: "w".into(), shape: vec![2, 2], data: vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25] });
        c.tensors.push(NamedTensor { name: "b".into(), shape: vec![2], data: vec![0.1, 0.2] });
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let at = flipped.len() - 12;
        flipped[at] ^= 0x40;
        assert!(matches!(Container::from_bytes(&flipped), Err(FormatError::ChecksumMismatch { .. })));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(Container::from_bytes(&version), Err(FormatError::VersionMismatch { found: 2, .. })));
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated(_))));
        assert!(matches!(Container::from_bytes(b"NOPE1234"), Err(FormatError::BadMagic { .. })));
    }
}
