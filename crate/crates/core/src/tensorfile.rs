//! Named-tensor container.
//!
//! The on-disk layout is an 8-byte little-endian `u64` header length, a UTF-8
//! JSON header mapping tensor name to `{dtype, shape, data_offsets}`, and a
//! raw payload of little-endian `f32` values in row-major order. Offsets are
//! byte positions relative to the start of the payload. A `__metadata__`
//! header key, when present, is ignored. Files written by the widely used
//! safetensors tooling load directly as long as every tensor is f32; files
//! written here load with that tooling.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// One named tensor: a shape and its row-major f32 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn check_finite(&self, name: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteTensor { name: name.into() })
        }
    }
}

/// An in-memory collection of named tensors, readable from and writable to
/// the container format above.
#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), Tensor::new(shape, data));
    }

    pub fn insert_array1(&mut self, name: impl Into<String>, arr: &Array1<f32>) {
        self.insert(name, vec![arr.len()], arr.to_vec());
    }

    pub fn insert_array2(&mut self, name: impl Into<String>, arr: &Array2<f32>) {
        let data = arr.iter().copied().collect();
        self.insert(name, vec![arr.nrows(), arr.ncols()], data);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fetch a tensor, failing with the tensor's name if absent.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor { name: name.into() })
    }

    /// Fetch a rank-1 tensor of exactly `len` finite entries.
    pub fn require_1d(&self, name: &str, len: usize) -> Result<Array1<f32>> {
        let t = self.require(name)?;
        if t.shape != [len] {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: vec![len],
                got: t.shape.clone(),
            });
        }
        t.check_finite(name)?;
        Ok(Array1::from_vec(t.data.clone()))
    }

    /// Fetch a rank-2 tensor of exactly `rows × cols` finite entries.
    pub fn require_2d(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let t = self.require(name)?;
        if t.shape != [rows, cols] {
            return Err(Error::ShapeMismatch {
                name: name.into(),
                expected: vec![rows, cols],
                got: t.shape.clone(),
            });
        }
        t.check_finite(name)?;
        Array2::from_shape_vec((rows, cols), t.data.clone()).map_err(|e| Error::BadTensorFile {
            path: name.into(),
            reason: e.to_string(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::BadTensorFile { reason, .. } => Error::BadTensorFile {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::BadTensorFile {
            path: "<bytes>".into(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 {
            return Err(bad("shorter than the 8-byte header length"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let Some(header_end) = header_len.checked_add(8).filter(|&e| e <= bytes.len()) else {
            return Err(bad("header length exceeds file size"));
        };
        let header_str = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|_| bad("header is not valid UTF-8"))?;
        let header: BTreeMap<String, serde_json::Value> = serde_json::from_str(header_str)?;
        let payload = &bytes[header_end..];

        let mut tensors = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                continue;
            }
            let meta: TensorMeta = serde_json::from_value(value)?;
            if !meta.dtype.eq_ignore_ascii_case("f32") {
                return Err(bad(&format!(
                    "tensor `{name}` has unsupported dtype `{}` (only f32)",
                    meta.dtype
                )));
            }
            let [begin, end] = meta.data_offsets;
            let (begin, end) = (begin as usize, end as usize);
            if begin > end || end > payload.len() {
                return Err(bad(&format!("tensor `{name}` offsets out of bounds")));
            }
            let numel: usize = meta.shape.iter().product();
            if end - begin != numel * 4 {
                return Err(bad(&format!(
                    "tensor `{name}` payload is {} bytes, shape {:?} needs {}",
                    end - begin,
                    meta.shape,
                    numel * 4
                )));
            }
            let data = payload[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(meta.shape, data));
        }
        Ok(TensorFile { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Serialize to the container format. Tensor order, and therefore the
    /// byte stream, is the lexicographic name order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut metas: BTreeMap<&str, TensorMeta> = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.numel() * 4) as u64;
            metas.insert(
                name,
                TensorMeta {
                    dtype: "F32".to_string(),
                    shape: t.shape.clone(),
                    data_offsets: [offset, offset + len],
                },
            );
            offset += len;
        }
        let header = serde_json::to_string(&metas)?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }
}
