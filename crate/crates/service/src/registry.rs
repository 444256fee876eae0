//! Model registry: ids mapped to immutable, shared bundles.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use spatialgan_core::checkpoint::load_checkpoint;
use spatialgan_core::{Error, ModelBundle, Result};

use crate::wire::ModelSummary;

/// Requests clone an `Arc` out of the map, so a model replaced or removed while a
/// request runs stays alive and unchanged for that request.
#[derive(Debug, Default)]
pub struct Registry {
    models: RwLock<BTreeMap<String, Arc<ModelBundle>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `*.ckpt` holding a full model; the id is the file stem.
    /// Segmentor-only checkpoints are skipped.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let reg = Self::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        for path in paths {
            let ck = load_checkpoint(&path)?;
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if ck.generator.is_none() {
                tracing::info!(%id, "skipping checkpoint without a generator");
                continue;
            }
            reg.insert(id, ck.into_bundle()?);
        }
        Ok(reg)
    }

    pub fn insert(&self, id: impl Into<String>, bundle: ModelBundle) -> Option<Arc<ModelBundle>> {
        self.models.write().expect("registry lock").insert(id.into(), Arc::new(bundle))
    }

    pub fn remove(&self, id: &str) -> Option<Arc<ModelBundle>> {
        self.models.write().expect("registry lock").remove(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<ModelBundle>> {
        self.models.read().expect("registry lock").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.models.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Summaries sorted by id.
    pub fn summaries(&self) -> Vec<ModelSummary> {
        self.models
            .read()
            .expect("registry lock")
            .iter()
            .map(|(id, b)| ModelSummary {
                id: id.clone(),
                arch: b.arch().clone(),
                generator_params: b.generator.params.num_params(),
            })
            .collect()
    }
}
