use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveIndex {
    schema_version: u32,
    data_file: String,
    meta: serde_json::Value,
    tensors: Vec<ArchiveEntry>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalars under names starting with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Replaces one entry of a tensor.
    pub fn set_entry(&mut self, name: &str, index: usize, value: E) -> Result<()> {
        let t = self.get(name)?;
        let mut data = t.to_vec();
        if index >= data.len() {
            return Err(Error::invalid("set_entry", format!("index {index} out of range for `{name}`")));
        }
        data[index] = value;
        let shape = t.shape().to_vec();
        self.tensors.insert(name.to_string(), Tensor::from_parts(shape, data));
        Ok(())
    }

    /// Merges `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: ParamStore<E>) {
        self.tensors.extend(other.tensors);
    }
}

fn archive_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

impl ParamStore<f32> {
    /// Writes `<stem>.bin` (concatenated `MSTTNSR1` records) and `<stem>.json`
    /// (index of names, offsets and shapes plus caller metadata).
    pub fn save(&self, stem: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let (bin, json) = archive_paths(stem.as_ref());
        let mut w = BufWriter::new(fs::File::create(&bin)?);
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = t.to_bytes();
            w.write_all(&bytes)?;
            entries.push(ArchiveEntry {
                name: name.clone(),
                offset,
                shape: t.shape().to_vec(),
            });
            offset += bytes.len() as u64;
        }
        w.flush()?;
        let index = ArchiveIndex {
            schema_version: 1,
            data_file: bin
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            meta,
            tensors: entries,
        };
        fs::write(json, serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    /// Loads an archive written by [`ParamStore::save`], returning its metadata.
    pub fn load(stem: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let (bin, json) = archive_paths(stem.as_ref());
        let index: ArchiveIndex = serde_json::from_slice(&fs::read(json)?)?;
        if index.schema_version != 1 {
            return Err(Error::Format(format!("unsupported archive schema {}", index.schema_version)));
        }
        let mut r = BufReader::new(fs::File::open(bin)?);
        let mut store = ParamStore::new();
        for e in index.tensors {
            r.seek(SeekFrom::Start(e.offset))?;
            let t = Tensor::read_from(&mut (&mut r).take(u64::MAX))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("`{}` shape {:?} disagrees with index", e.name, t.shape())));
            }
            store.insert(e.name, t);
        }
        Ok((store, index.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("f1.head0.layer3.ssm.A_log", Tensor::new(vec![2, 2], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap());
        p.insert("f1.agg.bias", Tensor::new(vec![3], vec![1.0f32, -1.0, 0.5]).unwrap());
        let stem = dir.path().join("ckpt");
        p.save(&stem, serde_json::json!({"hash": "abc"})).unwrap();
        let (q, meta) = ParamStore::load(&stem).unwrap();
        assert_eq!(meta["hash"], "abc");
        assert_eq!(p, q);
    }
}
