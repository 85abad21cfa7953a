//! Named parameter storage and its on-disk container.
//!
//! The container is two files: a flat blob of little-endian `f64` values and a
//! JSON index mapping each name to its shape and byte offset in the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ContainerIndex {
    pub dtype: String,
    pub entries: Vec<IndexEntry>,
}

const DTYPE: &str = "f64-le";

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Euclidean norm over every element of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn to_bytes(&self) -> (Vec<u8>, ContainerIndex) {
        let mut blob = Vec::with_capacity(self.num_elements() * 8);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(IndexEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (
            blob,
            ContainerIndex {
                dtype: DTYPE.to_string(),
                entries,
            },
        )
    }

    pub fn from_bytes(blob: &[u8], index: &ContainerIndex) -> Result<Self, TensorError> {
        if index.dtype != DTYPE {
            return Err(TensorError::Container(format!(
                "unsupported dtype `{}`",
                index.dtype
            )));
        }
        let mut store = Self::new();
        for e in &index.entries {
            let count: usize = e.shape.iter().product();
            let end = e.offset + count * 8;
            let bytes = blob.get(e.offset..end).ok_or_else(|| {
                TensorError::Container(format!("`{}` extends past end of blob", e.name))
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, blob_path: &Path, index_path: &Path) -> std::io::Result<()> {
        let (blob, index) = self.to_bytes();
        fs::write(blob_path, blob)?;
        let json = serde_json::to_string_pretty(&index).map_err(std::io::Error::other)?;
        fs::write(index_path, json)
    }

    pub fn load(blob_path: &Path, index_path: &Path) -> Result<Self, TensorError> {
        let blob = fs::read(blob_path).map_err(|e| TensorError::Container(e.to_string()))?;
        let text =
            fs::read_to_string(index_path).map_err(|e| TensorError::Container(e.to_string()))?;
        let index: ContainerIndex =
            serde_json::from_str(&text).map_err(|e| TensorError::Container(e.to_string()))?;
        Self::from_bytes(&blob, &index)
    }
}
