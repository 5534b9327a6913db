//! Frozen option-embedding table.
//!
//! ```text
//! "ABBE" | version u32 | dim u32 | count u64
//!        | (len u32, UTF-8 expansion, dim x f32)*   sorted by expansion
//!        | checksum u64
//! ```
//!
//! The trailing checksum covers every preceding byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::encoder::{Encoder, EncoderError};
use crate::exec::Exec;
use crate::format::{put_string, FormatError, Reader};
use crate::hash::{checksum64, content_hash};
use crate::lexicon::Lexicon;

const MAGIC: &[u8; 4] = b"ABBE";
pub const TABLE_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    records: BTreeMap<String, Vec<f32>>,
}

fn norm32(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl EmbeddingTable {
    /// Builds a table from explicit records; every vector must be unit-norm.
    pub fn from_records(dim: usize, records: BTreeMap<String, Vec<f32>>) -> Result<Self, FormatError> {
        if dim == 0 {
            return Err(FormatError::Invalid("embedding dimension must be positive".into()));
        }
        for (k, v) in &records {
            if v.len() != dim {
                return Err(FormatError::Invalid(format!("record `{k}` has length {}, expected {dim}", v.len())));
            }
            let n = norm32(v);
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(FormatError::Invalid(format!("record `{k}` has norm {n}")));
            }
        }
        Ok(EmbeddingTable { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, expansion: &str) -> bool {
        self.records.contains_key(expansion)
    }

    pub fn get(&self, expansion: &str) -> Option<&[f32]> {
        self.records.get(expansion).map(Vec::as_slice)
    }

    /// Stored vector widened to f64.
    pub fn vector(&self, expansion: &str) -> Option<Vec<f64>> {
        self.get(expansion).map(|v| v.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.records.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (k, v) in &self.records {
            put_string(&mut out, k);
            for x in v {
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
            return Err(FormatError::BadMagic { expected: "ABBE" });
        }
        let version = r.u32("version")?;
        if version != TABLE_VERSION {
            return Err(FormatError::VersionMismatch { found: version, expected: TABLE_VERSION });
        }
        let dim = r.u32("dimension")? as usize;
        let count = r.u64("record count")?;
        let mut records = BTreeMap::new();
        for i in 0..count {
            let key = r.string("expansion")?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.f32("vector")?);
            }
            if records.insert(key, v).is_some() {
                return Err(FormatError::Invalid(format!("duplicate record {i}")));
            }
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
        Self::from_records(dim, records)
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

    pub fn content_hash(&self) -> String {
        content_hash(&self.to_bytes())
    }
}

/// Encodes every string in `options` once.
pub fn build_table_for<'a, I>(options: I, encoder: &Encoder, exec: Exec) -> Result<EmbeddingTable, EncoderError>
where
    I: IntoIterator<Item = &'a str>,
{
    let distinct: Vec<&str> = options.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let vectors = exec.try_map(&distinct, |opt| encoder.encode_option(opt))?;
    let records = distinct
        .into_iter()
        .zip(vectors)
        .map(|(k, e)| (k.to_string(), e.vector.iter().map(|&x| x as f32).collect()))
        .collect();
    EmbeddingTable::from_records(encoder.dim(), records).map_err(EncoderError::Format)
}

/// One record per distinct expansion across `lexicons`.
pub fn build_embedding_table(lexicons: &[&Lexicon], encoder: &Encoder, exec: Exec) -> Result<EmbeddingTable, EncoderError> {
    let all: BTreeSet<&str> = lexicons.iter().flat_map(|l| l.expansions()).collect();
    build_table_for(all, encoder, exec)
}
