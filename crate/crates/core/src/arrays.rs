//! Thin wrapper over the safetensors container used for datasets,
//! checkpoints and replay buffers.

use crate::error::{Error, Result};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            shape,
            data: ArrayData::U8(data),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: HashMap<String, String>,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl Container {
    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn meta(&self, key: &str, path: &Path) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::malformed(path, format!("missing metadata key `{key}`")))
    }

    pub fn array(&self, name: &str, path: &Path) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::malformed(path, format!("missing array `{name}`")))
    }

    pub fn f32(&self, name: &str, path: &Path) -> Result<(&[usize], &[f32])> {
        let a = self.array(name, path)?;
        let v = a
            .as_f32()
            .ok_or_else(|| Error::malformed(path, format!("array `{name}` is not f32")))?;
        Ok((&a.shape, v))
    }

    pub fn u8(&self, name: &str, path: &Path) -> Result<(&[usize], &[u8])> {
        let a = self.array(name, path)?;
        let v = a
            .as_u8()
            .ok_or_else(|| Error::malformed(path, format!("array `{name}` is not u8")))?;
        Ok((&a.shape, v))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Dtype, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(name, a)| {
                let (raw, dtype) = match &a.data {
                    ArrayData::F32(v) => (v.iter().flat_map(|x| x.to_le_bytes()).collect(), Dtype::F32),
                    ArrayData::F64(v) => (v.iter().flat_map(|x| x.to_le_bytes()).collect(), Dtype::F64),
                    ArrayData::U8(v) => (v.clone(), Dtype::U8),
                };
                (name.clone(), raw, dtype, a.shape.clone())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, dtype, shape)| {
                TensorView::new(*dtype, shape.clone(), raw).map(|v| (name.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let meta = if self.metadata.is_empty() {
            None
        } else {
            Some(self.metadata.clone())
        };
        safetensors::serialize_to_file(views, meta, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let st = SafeTensors::deserialize(&buf)
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        let (_, header) =
            SafeTensors::read_metadata(&buf).map_err(|e| Error::malformed(path, e.to_string()))?;
        let mut out = Container {
            metadata: header.metadata().clone().unwrap_or_default(),
            arrays: BTreeMap::new(),
        };
        for name in st.names() {
            let view = st.tensor(name)?;
            let data = match view.dtype() {
                Dtype::F32 => ArrayData::F32(
                    view.data()
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                ),
                Dtype::F64 => ArrayData::F64(
                    view.data()
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                        .collect(),
                ),
                Dtype::U8 => ArrayData::U8(view.data().to_vec()),
                other => {
                    return Err(Error::malformed(
                        path,
                        format!("array `{name}` has unsupported dtype {other:?}"),
                    ))
                }
            };
            out.arrays.insert(
                name.to_string(),
                NamedArray {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(out)
    }
}
