//! Binary tensor container: `BGTC` magic, a u32 schema version, a u64 header
//! length, a JSON manifest, then 8-byte aligned little-endian payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BGTC";
pub const SCHEMA_VERSION: u32 = 1;
const ALIGN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    /// Complex values as interleaved `f32` (re, im) pairs.
    C64(Vec<[f32; 2]>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I64(_) => "i64",
            TensorData::C64(_) => "c64",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::C64(v) => v.len(),
        }
    }

    fn element_size(dtype: &str) -> Result<usize> {
        match dtype {
            "f32" => Ok(4),
            "f64" | "i64" | "c64" => Ok(8),
            other => Err(Error::Format(format!("unknown dtype '{other}'"))),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::C64(v) => v.iter().for_each(|[re, im]| {
                out.extend_from_slice(&re.to_le_bytes());
                out.extend_from_slice(&im.to_le_bytes());
            }),
        }
    }

    fn read(dtype: &str, bytes: &[u8]) -> Result<Self> {
        let word = |i: usize, n: usize| &bytes[i * n..(i + 1) * n];
        Ok(match dtype {
            "f32" => TensorData::F32(
                (0..bytes.len() / 4)
                    .map(|i| f32::from_le_bytes(word(i, 4).try_into().expect("4 bytes")))
                    .collect(),
            ),
            "f64" => TensorData::F64(
                (0..bytes.len() / 8)
                    .map(|i| f64::from_le_bytes(word(i, 8).try_into().expect("8 bytes")))
                    .collect(),
            ),
            "i64" => TensorData::I64(
                (0..bytes.len() / 8)
                    .map(|i| i64::from_le_bytes(word(i, 8).try_into().expect("8 bytes")))
                    .collect(),
            ),
            "c64" => TensorData::C64(
                (0..bytes.len() / 8)
                    .map(|i| {
                        let w = word(i, 8);
                        [
                            f32::from_le_bytes(w[..4].try_into().expect("4 bytes")),
                            f32::from_le_bytes(w[4..].try_into().expect("4 bytes")),
                        ]
                    })
                    .collect(),
            ),
            other => return Err(Error::Format(format!("unknown dtype '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Self::new(shape, TensorData::I64(data))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arrays: Vec<Entry>,
    metadata: Map<String, Value>,
}

/// Named arrays in insertion order plus free-form JSON metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<(String, Tensor)>,
    pub metadata: Map<String, Value>,
}

fn padded(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name.to_string(), tensor)),
        }
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.insert(name, Tensor::f64(shape, data)?);
        Ok(())
    }

    pub fn insert_i64(&mut self, name: &str, shape: Vec<usize>, data: Vec<i64>) -> Result<()> {
        self.insert(name, Tensor::i64(shape, data)?);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array '{name}'")))
    }

    /// An `f64` array checked against an expected shape.
    pub fn f64_array(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::Shape(format!("'{name}' has shape {:?}, expected {shape:?}", t.shape)));
        }
        match &t.data {
            TensorData::F64(v) => Ok(v),
            other => Err(Error::Format(format!("'{name}' is {}, expected f64", other.dtype()))),
        }
    }

    pub fn f64_any(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::F64(v) => Ok((&t.shape, v)),
            other => Err(Error::Format(format!("'{name}' is {}, expected f64", other.dtype()))),
        }
    }

    pub fn i64_any(&self, name: &str) -> Result<(&[usize], &[i64])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::I64(v) => Ok((&t.shape, v)),
            other => Err(Error::Format(format!("'{name}' is {}, expected i64", other.dtype()))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let nbytes = t.data.len() * TensorData::element_size(t.data.dtype())?;
            arrays.push(Entry {
                name: name.clone(),
                dtype: t.data.dtype().into(),
                shape: t.shape.clone(),
                offset,
                nbytes,
            });
            offset += padded(nbytes);
        }
        let header = serde_json::to_vec(&Header {
            arrays,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + padded(header.len()) + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(padded(out.len()), 0);
        for (_, t) in &self.tensors {
            t.data.write(&mut out);
            out.resize(padded(out.len()), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported schema version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Format("header runs past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = padded(header_end);
        let mut tensors = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let size = TensorData::element_size(&e.dtype)?;
            let count: usize = e.shape.iter().product();
            if count * size != e.nbytes || e.offset % ALIGN != 0 {
                return Err(Error::Format(format!("array '{}' has inconsistent size or offset", e.name)));
            }
            let start = payload + e.offset;
            let end = start
                .checked_add(e.nbytes)
                .filter(|end| *end <= bytes.len())
                .ok_or_else(|| Error::Format(format!("array '{}' runs past end of file", e.name)))?;
            let data = TensorData::read(&e.dtype, &bytes[start..end])?;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("a", Tensor::new(vec![3], TensorData::F32(vec![1.5, -2.0, 3.25])).unwrap());
        c.insert_f64("b", vec![2, 2], vec![0.1, f64::MIN_POSITIVE, -0.0, 1e300]).unwrap();
        c.insert_i64("c", vec![1], vec![-7]).unwrap();
        c.insert("d", Tensor::new(vec![2], TensorData::C64(vec![[1.0, -1.0], [0.5, 2.0]])).unwrap());
        c.metadata.insert("seed".into(), 42.into());
        c
    }

    #[test]
    fn round_trip_every_dtype() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(bytes.len() % 8, 0);
        assert_eq!(&bytes[..4], MAGIC);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(TensorContainer::from_bytes(&bytes).is_err());
        let good = sample().to_bytes().unwrap();
        assert!(TensorContainer::from_bytes(&good[..good.len() - 8]).is_err());
        let mut unknown = good.clone();
        let at = good.windows(5).position(|w| w == b"\"f64\"").unwrap();
        unknown[at + 2..at + 4].copy_from_slice(b"16");
        assert!(matches!(TensorContainer::from_bytes(&unknown), Err(Error::Format(_))));
    }
}
