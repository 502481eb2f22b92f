//! Tensor directories: `manifest.json` plus one FSTN file per named tensor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_fstn_as, write_fstn, Element, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest<C> {
    pub format: String,
    pub version: String,
    pub config: C,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<C: Serialize, T: Element>(
    dir: &Path,
    format: &str,
    config: &C,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let file = format!("{name}.fstn");
        write_fstn(dir.join(&file), *t)?;
        entries.push(TensorEntry {
            name: name.clone(),
            file,
            dims: t.dims().to_vec(),
        });
    }
    let manifest = Manifest {
        format: format.to_string(),
        version: crate::VERSION.to_string(),
        config,
        tensors: entries,
    };
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
}

/// Loaded tensors, handed out by name with dims checks.
pub struct Loaded<T: Element> {
    path: PathBuf,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Loaded<T> {
    pub fn take(&mut self, name: &str, dims: &[usize]) -> Result<Tensor<T>> {
        let t = self.tensors.remove(name).ok_or_else(|| Error::Format {
            path: self.path.clone(),
            msg: format!("missing tensor '{name}'"),
        })?;
        if t.dims() != dims {
            return Err(Error::Format {
                path: self.path.clone(),
                msg: format!("tensor '{name}' has dims {:?}, expected {dims:?}", t.dims()),
            });
        }
        Ok(t)
    }
}

pub fn load<C: DeserializeOwned, T: Element>(dir: &Path, format: &str) -> Result<(C, Loaded<T>)> {
    let p = dir.join("manifest.json");
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: Manifest<C> = serde_json::from_slice(&bytes)?;
    if manifest.format != format {
        return Err(Error::Format {
            path: p,
            msg: format!("expected format '{format}', found '{}'", manifest.format),
        });
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let t: Tensor<T> = read_fstn_as(dir.join(&e.file))?;
        if t.dims() != e.dims.as_slice() {
            return Err(Error::Format {
                path: p,
                msg: format!("'{}' dims disagree with the manifest", e.name),
            });
        }
        tensors.insert(e.name.clone(), t);
    }
    Ok((manifest.config, Loaded { path: p, tensors }))
}
