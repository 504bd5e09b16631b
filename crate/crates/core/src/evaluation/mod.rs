//! Objective metrics: DTW-aligned MCD, linear-probe accuracy, silhouette
//! and 2-D embedding plots.

pub mod cluster;
pub mod dtw;
pub mod mcd;
pub mod probe;
pub mod projection;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use cluster::cluster_silhouette;
pub use dtw::{dtw_align, DtwPath};
pub use mcd::{mcd, mel_to_cepstra, DEFAULT_ORDER};
pub use probe::{probe_uaa, LogisticProbe, ProbeResult};
pub use projection::{project_embeddings_2d, Projection, ProjectionMethod};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mcd_mean: f64,
    pub mcd_per_utterance: BTreeMap<String, f64>,
    /// Emotion probe on the pooled emotion embeddings.
    pub uaa: f64,
    pub per_class_recall: Vec<f64>,
    /// Speaker probe accuracy on the timbre embeddings.
    pub speaker_accuracy: f64,
    /// Speaker probe accuracy on the pooled emotion embeddings.
    pub speaker_leakage: f64,
    /// Emotion silhouette of the pooled emotion embeddings.
    pub silhouette: f64,
    pub plots: Vec<String>,
}

impl EvalReport {
    /// One level of keys: maps and lists are spread into dotted names.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        out.insert("mcd_mean".into(), Value::from(self.mcd_mean));
        for (id, v) in &self.mcd_per_utterance {
            out.insert(format!("mcd.{id}"), Value::from(*v));
        }
        out.insert("uaa".into(), Value::from(self.uaa));
        for (k, v) in self.per_class_recall.iter().enumerate() {
            out.insert(format!("recall.{k}"), Value::from(*v));
        }
        out.insert(
            "speaker_accuracy".into(),
            Value::from(self.speaker_accuracy),
        );
        out.insert("speaker_leakage".into(), Value::from(self.speaker_leakage));
        out.insert("silhouette".into(), Value::from(self.silhouette));
        for (k, p) in self.plots.iter().enumerate() {
            out.insert(format!("plot.{k}"), Value::from(p.as_str()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_flat())
            .map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
