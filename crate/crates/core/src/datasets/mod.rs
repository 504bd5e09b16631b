//! Corpora: utterance types, the synthetic generator, the manifest loader,
//! prosody-target extraction and batching.

mod batch;
mod manifest;
mod prosody;
mod synthetic;

pub use batch::{
    assign_references, collate_batch, collate_with_pool, masked_sum, Batch, BatchItem,
    ReferenceRule,
};
pub use manifest::{
    load_manifest, load_manifest_with_warnings, read_mel, write_corpus, write_mel, ManifestRecord,
};
pub use prosody::{extract_prosody_targets, normalize_pitch, pitch_centroid};
pub use synthetic::{generate_synthetic_corpus, ContourShape, EmotionProgram, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Emotion label reserved for neutral speech.
pub const NEUTRAL_EMOTION: usize = 0;

pub const DEFAULT_FRAME_HOP_MS: f64 = 12.5;

/// `frames × bins` grid of log-mel energies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub frame_hop_ms: f64,
}

impl MelSpectrogram {
    pub fn new(values: Tensor) -> Self {
        MelSpectrogram {
            values,
            frame_hop_ms: DEFAULT_FRAME_HOP_MS,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames() == 0 || self.n_mels() == 0 {
            return Err(Error::invalid("mel", "empty spectrogram"));
        }
        if !self.values.is_finite() {
            return Err(Error::NonFinite("mel spectrogram".into()));
        }
        Ok(())
    }
}

/// One utterance with its conditioning targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeItem {
    pub id: String,
    pub phoneme_ids: Vec<usize>,
    pub speaker_id: usize,
    pub emotion_id: usize,
    /// Frames per phoneme; zero is allowed and dropped by length regulation.
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub mel: MelSpectrogram,
    pub text_key: String,
}

impl PhonemeItem {
    pub fn n_phonemes(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn n_frames(&self) -> usize {
        self.mel.frames()
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |what: &str| format!("utterance {}: {what}", self.id);
        if self.phoneme_ids.is_empty() {
            return Err(Error::invalid(ctx("phoneme_ids"), "must be non-empty"));
        }
        if self.durations.len() != self.phoneme_ids.len() {
            return Err(Error::invalid(
                ctx("durations"),
                format!(
                    "{} durations for {} phonemes",
                    self.durations.len(),
                    self.phoneme_ids.len()
                ),
            ));
        }
        self.mel.validate()?;
        let total: usize = self.durations.iter().sum();
        if total != self.n_frames() {
            return Err(Error::invalid(
                ctx("durations"),
                format!("sum {total} does not match {} mel frames", self.n_frames()),
            ));
        }
        if self.pitch.len() != total || self.energy.len() != total {
            return Err(Error::invalid(
                ctx("pitch/energy"),
                format!(
                    "lengths {}/{} do not match {total} frames",
                    self.pitch.len(),
                    self.energy.len()
                ),
            ));
        }
        if !self.pitch.iter().chain(&self.energy).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(ctx("prosody targets")));
        }
        Ok(())
    }
}

/// Deterministic train/validation/test partition.
#[derive(Clone, Debug, Default)]
pub struct CorpusSplit {
    pub train: Vec<PhonemeItem>,
    pub val: Vec<PhonemeItem>,
    pub test: Vec<PhonemeItem>,
}

/// Splits every (speaker, emotion) cell separately so each split keeps the
/// label balance of the corpus.
pub fn split_corpus(
    corpus: &[PhonemeItem],
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    if !(0.0..1.0).contains(&val_frac)
        || !(0.0..1.0).contains(&test_frac)
        || val_frac + test_frac >= 1.0
    {
        return Err(Error::invalid(
            "split fractions",
            format!("val {val_frac} + test {test_frac} must lie in [0, 1)"),
        ));
    }
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (i, item) in corpus.iter().enumerate() {
        cells
            .entry((item.speaker_id, item.emotion_id))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = CorpusSplit::default();
    let mut assign = vec![0u8; corpus.len()];
    for idx in cells.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_val = (n * val_frac).round() as usize;
        let n_test = (n * test_frac).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            assign[i] = if k < n_val {
                1
            } else if k < n_val + n_test {
                2
            } else {
                0
            };
        }
    }
    for (item, a) in corpus.iter().zip(assign) {
        match a {
            1 => split.val.push(item.clone()),
            2 => split.test.push(item.clone()),
            _ => split.train.push(item.clone()),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec::new(2, 5, 200, 7)).unwrap();
        let s = split_corpus(&corpus, 0.1, 0.1, 3).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 200);
        assert_eq!(s.test.len(), 20);
        for e in 0..5 {
            assert_eq!(s.test.iter().filter(|i| i.emotion_id == e).count(), 4);
        }
        let mut ids: Vec<_> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .map(|i| &i.id)
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 200);
    }
}
