//! Padding, masks and reference selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, PhonemeItem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which mel an item is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRule {
    /// The item's own mel (training).
    SameUtterance,
    /// Another utterance with the same speaker and emotion but different
    /// text, chosen with a seeded RNG.
    SameSpeakerEmotionDiffText,
}

impl std::str::FromStr for ReferenceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_utterance" => Ok(ReferenceRule::SameUtterance),
            "same_speaker_emotion_diff_text" | "diff_text" => {
                Ok(ReferenceRule::SameSpeakerEmotionDiffText)
            }
            other => Err(Error::invalid(
                "reference_rule",
                format!("unknown rule {other:?}"),
            )),
        }
    }
}

/// Padded batch. Every padded position holds zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub phoneme_ids: Vec<Vec<usize>>,
    pub phoneme_mask: Vec<Vec<bool>>,
    pub mels: Vec<Tensor>,
    pub frame_mask: Vec<Vec<bool>>,
    pub durations: Vec<Vec<usize>>,
    pub pitch: Vec<Vec<f64>>,
    pub energy: Vec<Vec<f64>>,
    pub speaker_ids: Vec<usize>,
    pub emotion_ids: Vec<usize>,
    pub reference_mels: Vec<MelSpectrogram>,
    pub reference_ids: Vec<String>,
}

/// Unpadded view of one batch row.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub phoneme_ids: &'a [usize],
    pub durations: &'a [usize],
    pub pitch: &'a [f64],
    pub energy: &'a [f64],
    pub n_frames: usize,
    pub mel: &'a Tensor,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub reference: &'a MelSpectrogram,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_phonemes(&self) -> usize {
        self.phoneme_ids.first().map_or(0, Vec::len)
    }

    pub fn max_frames(&self) -> usize {
        self.frame_mask.first().map_or(0, Vec::len)
    }

    pub fn n_phonemes(&self, i: usize) -> usize {
        self.phoneme_mask[i].iter().filter(|&&m| m).count()
    }

    pub fn n_frames(&self, i: usize) -> usize {
        self.frame_mask[i].iter().filter(|&&m| m).count()
    }

    /// The `i`th row with padding stripped; the mel stays padded and
    /// `n_frames` gives its valid prefix.
    pub fn item(&self, i: usize) -> BatchItem<'_> {
        let n = self.n_phonemes(i);
        let t = self.n_frames(i);
        BatchItem {
            id: &self.ids[i],
            phoneme_ids: &self.phoneme_ids[i][..n],
            durations: &self.durations[i][..n],
            pitch: &self.pitch[i][..t],
            energy: &self.energy[i][..t],
            n_frames: t,
            mel: &self.mels[i],
            speaker_id: self.speaker_ids[i],
            emotion_id: self.emotion_ids[i],
            reference: &self.reference_mels[i],
        }
    }

    pub fn unpadded_mel(&self, i: usize) -> Tensor {
        self.mels[i].slice_rows(0, self.n_frames(i))
    }
}

/// Sum of `values` over positions where `mask` is set.
pub fn masked_sum(values: &[Vec<f64>], mask: &[Vec<bool>]) -> f64 {
    values
        .iter()
        .zip(mask)
        .flat_map(|(v, m)| v.iter().zip(m))
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum()
}

/// Indices into `pool` of each item's reference. The diff-text rule picks
/// uniformly among eligible pool entries in pool order.
pub fn assign_references(
    items: &[PhonemeItem],
    pool: &[PhonemeItem],
    rule: ReferenceRule,
    seed: u64,
) -> Result<Vec<Option<usize>>> {
    match rule {
        ReferenceRule::SameUtterance => Ok(vec![None; items.len()]),
        ReferenceRule::SameSpeakerEmotionDiffText => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            items
                .iter()
                .map(|item| {
                    let eligible: Vec<usize> = pool
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| {
                            p.speaker_id == item.speaker_id
                                && p.emotion_id == item.emotion_id
                                && p.text_key != item.text_key
                        })
                        .map(|(j, _)| j)
                        .collect();
                    if eligible.is_empty() {
                        return Err(Error::invalid(
                            "reference pool",
                            format!(
                                "no eligible reference for (speaker {}, emotion {}, text_key {:?})",
                                item.speaker_id, item.emotion_id, item.text_key
                            ),
                        ));
                    }
                    Ok(Some(eligible[rng.random_range(0..eligible.len())]))
                })
                .collect()
        }
    }
}

/// Collates `items`, drawing references from the items themselves.
pub fn collate_batch(items: &[PhonemeItem], rule: ReferenceRule, seed: u64) -> Result<Batch> {
    collate_with_pool(items, items, rule, seed)
}

pub fn collate_with_pool(
    items: &[PhonemeItem],
    pool: &[PhonemeItem],
    rule: ReferenceRule,
    seed: u64,
) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::invalid("batch", "no items to collate"));
    }
    let n_mels = items[0].mel.n_mels();
    if let Some(bad) = items.iter().find(|i| i.mel.n_mels() != n_mels) {
        return Err(Error::invalid(
            format!("utterance {}", bad.id),
            format!("has {} mel bins, batch has {n_mels}", bad.mel.n_mels()),
        ));
    }
    let refs = assign_references(items, pool, rule, seed)?;
    let max_n = items.iter().map(PhonemeItem::n_phonemes).max().unwrap_or(0);
    let max_t = items.iter().map(PhonemeItem::n_frames).max().unwrap_or(0);
    let pad = |v: &[usize], len| {
        let mut out = v.to_vec();
        out.resize(len, 0);
        out
    };
    let padf = |v: &[f64], len| {
        let mut out = v.to_vec();
        out.resize(len, 0.0);
        out
    };
    let mask = |n, len| (0..len).map(|k| k < n).collect::<Vec<bool>>();
    let mut batch = Batch {
        ids: Vec::new(),
        phoneme_ids: Vec::new(),
        phoneme_mask: Vec::new(),
        mels: Vec::new(),
        frame_mask: Vec::new(),
        durations: Vec::new(),
        pitch: Vec::new(),
        energy: Vec::new(),
        speaker_ids: Vec::new(),
        emotion_ids: Vec::new(),
        reference_mels: Vec::new(),
        reference_ids: Vec::new(),
    };
    for (item, r) in items.iter().zip(refs) {
        let t = item.n_frames();
        let mut mel = Tensor::zeros(max_t, n_mels);
        mel.data_mut()[..t * n_mels].copy_from_slice(item.mel.values.data());
        batch.ids.push(item.id.clone());
        batch.phoneme_ids.push(pad(&item.phoneme_ids, max_n));
        batch.phoneme_mask.push(mask(item.n_phonemes(), max_n));
        batch.mels.push(mel);
        batch.frame_mask.push(mask(t, max_t));
        batch.durations.push(pad(&item.durations, max_n));
        batch.pitch.push(padf(&item.pitch, max_t));
        batch.energy.push(padf(&item.energy, max_t));
        batch.speaker_ids.push(item.speaker_id);
        batch.emotion_ids.push(item.emotion_id);
        let reference = r.map_or(item, |j| &pool[j]);
        batch.reference_mels.push(reference.mel.clone());
        batch.reference_ids.push(reference.id.clone());
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::datasets::{generate_synthetic_corpus, SyntheticSpec};

    fn corpus(n: usize, seed: u64) -> Vec<PhonemeItem> {
        let mut spec = SyntheticSpec::with_bins(2, 2, n, 6, seed);
        spec.max_phonemes = 6;
        generate_synthetic_corpus(&spec).unwrap()
    }

    #[test]
    fn same_utterance_references_itself() {
        let c = corpus(8, 1);
        let b = collate_batch(&c[..1], ReferenceRule::SameUtterance, 0).unwrap();
        assert_eq!(b.reference_mels[0], c[0].mel);
    }

    #[test]
    fn two_item_pool_swaps() {
        let mut c = corpus(8, 1);
        c.truncate(1);
        let mut other = c[0].clone();
        other.id = "other".into();
        other.text_key = "different".into();
        c.push(other);
        let b = collate_batch(&c, ReferenceRule::SameSpeakerEmotionDiffText, 9).unwrap();
        assert_eq!(b.reference_ids, vec!["other".to_string(), c[0].id.clone()]);
    }

    #[test]
    fn missing_reference_names_triple() {
        let c = corpus(8, 1);
        let err = collate_batch(&c[..1], ReferenceRule::SameSpeakerEmotionDiffText, 0)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("speaker 0") && err.contains(&c[0].text_key),
            "{err}"
        );
    }

    #[test]
    fn assignment_is_seeded() {
        let c = corpus(50, 4);
        let a = assign_references(&c, &c, ReferenceRule::SameSpeakerEmotionDiffText, 17).unwrap();
        let b = assign_references(&c, &c, ReferenceRule::SameSpeakerEmotionDiffText, 17).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn diff_text_never_shares_text(seed in 0u64..1000) {
            let c = corpus(24, seed % 7);
            let b = collate_batch(&c, ReferenceRule::SameSpeakerEmotionDiffText, seed).unwrap();
            for (item, rid) in c.iter().zip(&b.reference_ids) {
                let r = c.iter().find(|p| &p.id == rid).unwrap();
                prop_assert_ne!(&r.text_key, &item.text_key);
                prop_assert_eq!(r.speaker_id, item.speaker_id);
                prop_assert_eq!(r.emotion_id, item.emotion_id);
            }
        }

        #[test]
        fn masked_sums_match_unpadded(seed in 0u64..1000, take in 1usize..6) {
            let c = corpus(8, seed % 11);
            let items = &c[..take];
            let b = collate_batch(items, ReferenceRule::SameUtterance, seed).unwrap();
            let direct: f64 = items.iter().flat_map(|i| &i.pitch).sum();
            prop_assert!((masked_sum(&b.pitch, &b.frame_mask) - direct).abs() < 1e-9);
            let dur: Vec<Vec<f64>> = b.durations.iter().map(|d| d.iter().map(|&x| x as f64).collect()).collect();
            let direct_frames: usize = items.iter().map(|i| i.n_frames()).sum();
            prop_assert_eq!(masked_sum(&dur, &b.phoneme_mask), direct_frames as f64);
            for i in 0..take {
                prop_assert_eq!(b.item(i).phoneme_ids, &items[i].phoneme_ids[..]);
                prop_assert_eq!(b.unpadded_mel(i), items[i].mel.values.clone());
                let t = b.n_frames(i);
                prop_assert!(b.mels[i].data()[t * b.mels[i].cols()..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
