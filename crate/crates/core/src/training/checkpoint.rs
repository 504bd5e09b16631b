//! Versioned JSON checkpoints with named parameter groups.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::backbone::{BackboneDims, VarianceRanges};
use crate::error::{Error, Result};
use crate::mine::MiEstimator;
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::style_encoder::StyleDims;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Dimension header checked on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDims {
    pub backbone: BackboneDims,
    pub style: Option<StyleDims>,
    pub n_speakers: usize,
    pub n_emotions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: AdamState,
}

impl EstimatorState {
    pub fn of(est: &MiEstimator) -> Self {
        EstimatorState {
            params: snapshot(&est.store, ""),
            optimizer: est.optimizer.state(&est.store),
        }
    }

    pub fn restore(&self, est: &mut MiEstimator) -> Result<()> {
        restore(&mut est.store, &self.params, "mi_estimator")?;
        est.optimizer = Adam::from_state(AdamConfig::default(), &self.optimizer, &est.store)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: u8,
    /// SHA-256 of the resolved configuration.
    pub config_hash: String,
    pub config: TrainConfig,
    pub step: u64,
    pub dims: CheckpointDims,
    pub ranges: VarianceRanges,
    /// Group name → parameter name → value.
    pub groups: BTreeMap<String, BTreeMap<String, Tensor>>,
    pub optimizer: AdamState,
    pub mi_estimator: Option<EstimatorState>,
    /// Measurement-only estimator used when the MI term is ablated.
    pub monitor: Option<EstimatorState>,
}

/// Parameters whose name starts with `prefix` (all when empty).
pub fn snapshot(store: &ParamStore, prefix: &str) -> BTreeMap<String, Tensor> {
    store
        .ids()
        .filter(|&id| {
            prefix.is_empty()
                || store.name(id) == prefix
                || store.name(id).starts_with(&format!("{prefix}."))
        })
        .map(|id| (store.name(id).to_string(), store.get(id).clone()))
        .collect()
}

/// Splits a store by the first name segment.
pub fn group_params(store: &ParamStore) -> BTreeMap<String, BTreeMap<String, Tensor>> {
    let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    for id in store.ids() {
        let name = store.name(id);
        let group = name.split('.').next().unwrap_or(name);
        groups
            .entry(group.to_string())
            .or_default()
            .insert(name.to_string(), store.get(id).clone());
    }
    groups
}

/// Writes every entry of `values` into `store`; names and shapes must match.
pub fn restore(
    store: &mut ParamStore,
    values: &BTreeMap<String, Tensor>,
    what: &str,
) -> Result<()> {
    for (name, t) in values {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("{what}: unknown parameter {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: {name} has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!(
                "{what}: {name} holds non-finite values"
            )));
        }
        store.set(id, t.clone());
    }
    Ok(())
}

impl Checkpoint {
    /// Loads the named groups into `store`. Every parameter of those groups
    /// in the store must be covered.
    pub fn load_groups(&self, store: &mut ParamStore, groups: &[&str]) -> Result<()> {
        for &group in groups {
            let values = self.groups.get(group).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint has no parameter group {group:?}"))
            })?;
            let expected = snapshot(store, group);
            if let Some(missing) = expected.keys().find(|k| !values.contains_key(*k)) {
                return Err(Error::Checkpoint(format!(
                    "group {group:?} lacks {missing}"
                )));
            }
            restore(store, values, group)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}
