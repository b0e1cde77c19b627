//! Parameter checkpoints: a flat little-endian `f64` blob plus a JSON
//! manifest of names, shapes and byte offsets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save(ps: &ParamStore, stem: &Path) -> Result<()> {
    let (bin, json) = paths(stem);
    let mut blob = Vec::with_capacity(ps.scalar_count() * 8);
    let mut tensors = Vec::with_capacity(ps.len());
    for (_, p) in ps.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        data_file: bin.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors,
    };
    std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    std::fs::write(&json, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&json, e))
}

/// Fills every parameter of `ps` from a checkpoint written by [`save`];
/// names and shapes must match.
pub fn load(ps: &mut ParamStore, stem: &Path) -> Result<()> {
    let (bin, json) = paths(stem);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.get(id).name.clone();
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
        if entry.shape != ps.get(id).value.shape() {
            return Err(Error::Data(format!(
                "checkpoint shape {:?} for {name}, model expects {:?}",
                entry.shape,
                ps.get(id).value.shape()
            )));
        }
        let raw = blob
            .get(entry.offset..entry.offset + entry.bytes)
            .ok_or_else(|| Error::Format {
                offset: blob.len(),
                detail: format!("{name} extends past the end of {}", bin.display()),
            })?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ps.get_mut(id).value = Array::new(entry.shape.clone(), data)?;
    }
    Ok(())
}
