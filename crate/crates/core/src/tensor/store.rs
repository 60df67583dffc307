use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    /// Handles for `vars`, which must follow store order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.len() {
            return Err(Error::shape("bind_vars", format!("{} vars for {} parameters", vars.len(), self.len())));
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Tensors in store order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Graph handles for the contents of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Handles in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

/// `manifest.json` of a weight directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WeightManifest {
    /// Architecture description used for shape validation on load.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` and `weights.bin` (little-endian f64, manifest order).
pub fn save_weights(dir: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::with_capacity(store.num_values() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: bin.len() as u64,
        });
        for v in t.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightManifest { config, tensors };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join("weights.bin");
    fs::write(&bpath, bin).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_weights(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: WeightManifest = serde_json::from_slice(&text)?;
    let bpath = dir.join("weights.bin");
    let bin = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(Error::Format(format!(
                "{}: offset {} but previous tensors end at {expected_offset}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if end > bin.len() {
            return Err(Error::Format(format!("{}: weights.bin truncated", e.name)));
        }
        let data = bin[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?)?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != bin.len() {
        return Err(Error::Format("weights.bin has trailing bytes".into()));
    }
    Ok((store, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip_and_reject_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 1e-300]).unwrap())
            .unwrap();
        s.insert("b", Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        save_weights(dir.path(), &s, serde_json::json!({"k": 3})).unwrap();
        let (back, cfg) = load_weights(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(cfg["k"], 3);

        let bin = dir.path().join("weights.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_weights(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }
}
