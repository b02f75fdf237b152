//! Single-file tensor container shared by corpora, checkpoints and embedding
//! exports.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PDISENT1"
//! u64 manifest length, UTF-8 JSON manifest (object; key "arrays" lists the array names in order)
//! repeated: u32 name length, name, u8 dtype (0 = f32, 1 = i32, 2 = f64),
//!           u32 rank, rank x u64 dims, row-major payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{ContainerError, Result};

pub const MAGIC: &[u8; 8] = b"PDISENT1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn dtype_code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::I32(_) => 1,
            ArrayData::F64(_) => 2,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::I32(_) => "i32",
            ArrayData::F64(_) => "f64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(name, shape, ArrayData::F32(data))
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::new(name, shape, ArrayData::F64(data))
    }

    pub fn i32(name: impl Into<String>, shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self::new(name, shape, ArrayData::I32(data))
    }

    fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Self {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array `{name}`: shape does not match payload");
        Self { name, shape, data }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    /// Caller metadata; must serialize to a JSON object.
    pub manifest: Map<String, Value>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(manifest: Map<String, Value>) -> Self {
        Self { manifest, arrays: Vec::new() }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> std::result::Result<&NamedArray, ContainerError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ContainerError::MissingArray { name: name.into() })
    }

    pub fn get_f32(&self, name: &str, shape: &[usize]) -> std::result::Result<&[f32], ContainerError> {
        let a = self.checked(name, shape)?;
        match &a.data {
            ArrayData::F32(v) => Ok(v),
            other => Err(wrong_dtype(name, "f32", other)),
        }
    }

    pub fn get_f64(&self, name: &str, shape: &[usize]) -> std::result::Result<&[f64], ContainerError> {
        let a = self.checked(name, shape)?;
        match &a.data {
            ArrayData::F64(v) => Ok(v),
            other => Err(wrong_dtype(name, "f64", other)),
        }
    }

    pub fn get_i32(&self, name: &str, shape: &[usize]) -> std::result::Result<&[i32], ContainerError> {
        let a = self.checked(name, shape)?;
        match &a.data {
            ArrayData::I32(v) => Ok(v),
            other => Err(wrong_dtype(name, "i32", other)),
        }
    }

    fn checked(&self, name: &str, shape: &[usize]) -> std::result::Result<&NamedArray, ContainerError> {
        let a = self.get(name)?;
        if a.shape != shape {
            return Err(ContainerError::WrongShape {
                name: name.into(),
                expected: shape.to_vec(),
                found: a.shape.clone(),
            });
        }
        Ok(a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = self.manifest.clone();
        manifest.insert(
            "arrays".into(),
            Value::Array(self.arrays.iter().map(|a| Value::String(a.name.clone())).collect()),
        );
        let json = serde_json::to_vec(&Value::Object(manifest)).expect("manifest serializes");

        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.dtype_code());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(ContainerError::Truncated("magic".into()));
        }
        if r.take(8, "magic")? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let mlen = r.u64("manifest length")? as usize;
        let json = r.take(mlen, "manifest")?;
        let value: Value = serde_json::from_slice(json).map_err(|e| ContainerError::CorruptHeader(format!("manifest json: {e}")))?;
        let Value::Object(mut manifest) = value else {
            return Err(ContainerError::CorruptHeader("manifest is not an object".into()));
        };
        let names: Vec<String> = match manifest.remove("arrays") {
            Some(Value::Array(v)) => v
                .into_iter()
                .map(|n| match n {
                    Value::String(s) => Ok(s),
                    _ => Err(ContainerError::CorruptHeader("array name is not a string".into())),
                })
                .collect::<std::result::Result<_, _>>()?,
            _ => return Err(ContainerError::CorruptHeader("manifest lacks array list".into())),
        };

        let mut arrays = Vec::with_capacity(names.len());
        for expected in &names {
            let nlen = r.u32(expected)? as usize;
            let name = std::str::from_utf8(r.take(nlen, expected)?)
                .map_err(|_| ContainerError::CorruptHeader("array name is not UTF-8".into()))?
                .to_string();
            if &name != expected {
                return Err(ContainerError::ManifestMismatch(format!("expected array `{expected}`, found `{name}`")));
            }
            let dtype = r.take(1, &name)?[0];
            let rank = r.u32(&name)? as usize;
            if rank > 8 {
                return Err(ContainerError::CorruptHeader(format!("array `{name}` rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ContainerError::CorruptHeader(format!("array `{name}` too large")))?;
            let data = match dtype {
                0 => ArrayData::F32(
                    r.take(count.saturating_mul(4), &name)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::I32(
                    r.take(count.saturating_mul(4), &name)?
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::F64(
                    r.take(count.saturating_mul(8), &name)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                d => return Err(ContainerError::CorruptHeader(format!("array `{name}` has unknown dtype {d}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::ManifestMismatch(format!(
                "{} trailing bytes after the last listed array",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn wrong_dtype(name: &str, expected: &'static str, found: &ArrayData) -> ContainerError {
    ContainerError::WrongDtype {
        name: name.into(),
        expected,
        found: found.dtype_name(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ContainerError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Hex SHA-256 of a byte slice; used for determinism and freeze checks.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
