//! Named parameter sets and their on-disk bundle form: a directory holding
//! `manifest.json` plus one MTEN file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mten;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Dims(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        Ok(&self.tensors[self.index(name)?])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Insert every tensor as a leaf of `g`, cast to `T`.
    pub fn bind<'a, T: Real>(&'a self, g: &mut Graph<T>, trainable: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let t = t.cast::<T>();
                if trainable {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { store: self, vars }
    }

    /// Check names and shapes against an expected layout.
    pub fn check_layout(&self, expected: &ParamStore) -> Result<()> {
        if self.names != expected.names {
            return Err(Error::Dims(format!(
                "parameter names {:?} do not match expected {:?}",
                self.names, expected.names
            )));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&expected.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Dims(format!(
                    "parameter {n}: shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.store.index(name)?])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_bundle(
    dir: impl AsRef<Path>,
    kind: &str,
    meta: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.names.iter().zip(&store.tensors) {
        let file = format!("{name}.mten");
        mten::write(dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = BundleManifest {
        kind: kind.to_string(),
        meta,
        tensors,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>, kind: &str) -> Result<(serde_json::Value, ParamStore)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Missing {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let manifest: BundleManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if manifest.kind != kind {
        return Err(Error::Dims(format!(
            "{}: bundle kind {:?}, expected {kind:?}",
            dir.display(),
            manifest.kind
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let t = mten::read(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Dims(format!(
                "{}: tensor {} has shape {:?}, manifest says {:?}",
                dir.display(),
                e.name,
                t.shape(),
                e.shape
            )));
        }
        store.push(e.name.clone(), t);
    }
    Ok((manifest.meta, store))
}
