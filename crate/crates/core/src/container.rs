//! Reading and writing the safetensors container.
//!
//! The on-disk layout is an 8-byte little-endian header length, a UTF-8 JSON
//! header mapping tensor names to dtype, shape and byte offsets, then packed
//! row-major data. Tensors are materialized as `f32` in memory; `f16`,
//! `bf16` and `f64` storage is converted on read.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

fn decode(view: &TensorView<'_>) -> Option<Vec<f32>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        _ => return None,
    };
    Some(out)
}

/// Parses every floating-point tensor in a container. Tensors with other
/// dtypes (masks, integer buffers) are skipped.
pub fn read_tensors(bytes: &[u8]) -> Result<TensorMap> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
    let mut out = TensorMap::new();
    for (name, view) in st.tensors() {
        if let Some(data) = decode(&view) {
            out.insert(name, Tensor::new(view.shape().to_vec(), data));
        }
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path)?;
    read_tensors(&bytes)
}

/// Serializes tensors as `f32`.
pub fn write_tensors(tensors: &TensorMap) -> Result<Vec<u8>> {
    let raw: Vec<(&str, Vec<u8>, &[usize])> = tensors
        .iter()
        .map(|(name, t)| {
            let bytes = t.data.iter().flat_map(|x| x.to_le_bytes()).collect();
            (name.as_str(), bytes, t.shape.as_slice())
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, bytes, shape)| {
            TensorView::new(Dtype::F32, shape.to_vec(), bytes)
                .map(|v| (*name, v))
                .map_err(|e| Error::Container(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &None).map_err(|e| Error::Container(e.to_string()))
}

pub fn write_file(path: &Path, tensors: &TensorMap) -> Result<()> {
    std::fs::write(path, write_tensors(tensors)?)?;
    Ok(())
}
