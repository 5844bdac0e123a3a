//! Flat named-tensor container for head parameters: `name -> shape ->
//! row-major little-endian f32 values`. Keeps golden fixtures portable
//! across platforms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RSNT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered name -> tensor map. Iteration (and therefore serialization) is
/// sorted by name, so equal contents produce identical bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    entries: BTreeMap<String, TensorEntry>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Fixture(format!(
                "tensor {name}: shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        self.entries.insert(name.to_string(), TensorEntry { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fetch a rank-2 tensor with the exact shape, widened to f64.
    pub fn require_2d(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Fixture(format!("missing tensor {name}")))?;
        if entry.shape != [rows, cols] {
            return Err(Error::Fixture(format!(
                "tensor {name}: expected shape [{rows}, {cols}], got {:?}",
                entry.shape
            )));
        }
        Ok(Array2::from_shape_vec(
            (rows, cols),
            entry.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape"))
    }

    /// Fetch a rank-1 tensor with the exact length, widened to f64.
    pub fn require_1d(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::Fixture(format!("missing tensor {name}")))?;
        if entry.shape != [len] {
            return Err(Error::Fixture(format!(
                "tensor {name}: expected shape [{len}], got {:?}",
                entry.shape
            )));
        }
        Ok(Array1::from_iter(entry.data.iter().map(|&v| v as f64)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Fixture("truncated tensor container".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let s = take(pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Fixture("bad tensor container magic".into()));
        }
        let version = read_u32(&mut pos)?;
        if version != VERSION {
            return Err(Error::Fixture(format!(
                "unsupported container version {version}"
            )));
        }
        let count = read_u32(&mut pos)? as usize;
        let mut tensors = NamedTensors::new();
        for _ in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Fixture("tensor name is not utf-8".into()))?
                .to_string();
            let ndim = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(&name, shape, data)?;
        }
        Ok(tensors)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
