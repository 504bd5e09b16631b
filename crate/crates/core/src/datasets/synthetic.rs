//! Parametric emotional-speech corpus with known generating factors.
//!
//! Each mel frame is the sum of
//! - a frame-constant spectral envelope owned by the speaker,
//! - a spectral pattern owned by the phoneme being spoken,
//! - an emotion-driven prosody contribution: a pitch-tracking spectral peak
//!   and a broadband energy shift, both following the emotion's contour,
//! - small seeded Gaussian noise.
//!
//! Emotion also rescales phoneme durations. Pitch and energy targets are the
//! exact contour values used to draw the spectrogram.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, PhonemeItem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourShape {
    Flat,
    Rising,
    Falling,
    Arch,
    Wave,
}

impl ContourShape {
    /// Value at relative position `u ∈ [0, 1]`, within `[-1, 1]`.
    pub fn at(self, u: f64) -> f64 {
        match self {
            ContourShape::Flat => 0.0,
            ContourShape::Rising => 2.0 * u - 1.0,
            ContourShape::Falling => 1.0 - 2.0 * u,
            ContourShape::Arch => 8.0 * u * (1.0 - u) - 1.0,
            ContourShape::Wave => (4.0 * PI * u).sin(),
        }
    }

    const ALL: [ContourShape; 5] = [
        ContourShape::Flat,
        ContourShape::Rising,
        ContourShape::Falling,
        ContourShape::Arch,
        ContourShape::Wave,
    ];
}

/// Prosody program of one emotion category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionProgram {
    pub pitch_offset: f64,
    pub pitch_amplitude: f64,
    pub pitch_shape: ContourShape,
    pub energy_offset: f64,
    pub energy_amplitude: f64,
    pub energy_shape: ContourShape,
    pub duration_scale: f64,
}

impl EmotionProgram {
    /// Neutral, happy, angry, sad, surprise.
    pub fn presets() -> Vec<EmotionProgram> {
        use ContourShape::*;
        let p = |po, pa, ps, eo, ea, es, ds| EmotionProgram {
            pitch_offset: po,
            pitch_amplitude: pa,
            pitch_shape: ps,
            energy_offset: eo,
            energy_amplitude: ea,
            energy_shape: es,
            duration_scale: ds,
        };
        vec![
            p(0.0, 0.0, Flat, 0.0, 0.0, Flat, 1.0),
            p(1.0, 0.6, Wave, 0.5, 0.3, Arch, 0.8),
            p(0.4, 0.5, Falling, 1.2, 0.2, Flat, 0.9),
            p(-1.0, 0.4, Falling, -0.8, 0.3, Falling, 1.5),
            p(1.4, 0.8, Rising, 0.3, 0.5, Rising, 1.1),
        ]
    }

    fn jittered(&self, jitter: f64, seed: u64, utterance: usize) -> EmotionProgram {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.rotate_left(29) ^ 0x6a09_e667 ^ utterance as u64);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        EmotionProgram {
            pitch_offset: self.pitch_offset + jitter * z(),
            pitch_amplitude: self.pitch_amplitude * (1.0 + jitter * z()).max(0.0),
            pitch_shape: self.pitch_shape,
            energy_offset: self.energy_offset + jitter * z(),
            energy_amplitude: self.energy_amplitude * (1.0 + jitter * z()).max(0.0),
            energy_shape: self.energy_shape,
            duration_scale: self.duration_scale * (0.3 * jitter * z()).exp(),
        }
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> EmotionProgram {
        let shape = |rng: &mut R| ContourShape::ALL[rng.random_range(0..5)];
        EmotionProgram {
            pitch_offset: rng.random_range(-1.5..1.5),
            pitch_amplitude: rng.random_range(0.0..0.8),
            pitch_shape: shape(rng),
            energy_offset: rng.random_range(-1.0..1.2),
            energy_amplitude: rng.random_range(0.0..0.5),
            energy_shape: shape(rng),
            duration_scale: rng.random_range(0.75..1.5),
        }
    }
}

/// Distance between the lowest and highest speaker pitch offsets.
pub const SPEAKER_PITCH_SPREAD: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub n_emotions: usize,
    /// One `n_mels`-long envelope per speaker.
    pub speaker_templates: Vec<Vec<f64>>,
    /// Per-speaker shift of the pitch track, added to every frame.
    pub speaker_pitch_offsets: Vec<f64>,
    pub emotion_programs: Vec<EmotionProgram>,
    pub n_utterances: usize,
    pub phoneme_vocab_size: usize,
    pub n_mels: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub noise_std: f64,
    /// Scale of per-utterance perturbations of the emotion program: the
    /// offsets move by `jitter · N(0, 1)`, the amplitudes by a factor
    /// `1 + jitter · N(0, 1)` and the duration scale by `exp(0.3 · jitter · N(0, 1))`.
    pub prosody_jitter: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Spec with 80 mel bins, a 32-phoneme vocabulary, and templates and
    /// programs drawn from `seed`.
    pub fn new(n_speakers: usize, n_emotions: usize, n_utterances: usize, seed: u64) -> Self {
        Self::with_bins(n_speakers, n_emotions, n_utterances, 80, seed)
    }

    pub fn with_bins(
        n_speakers: usize,
        n_emotions: usize,
        n_utterances: usize,
        n_mels: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e37);
        let speaker_templates = (0..n_speakers)
            .map(|_| speaker_envelope(n_mels, &mut rng))
            .collect();
        let speaker_pitch_offsets = (0..n_speakers)
            .map(|s| SPEAKER_PITCH_SPREAD * (s as f64 / (n_speakers.max(2) - 1) as f64 - 0.5))
            .collect();
        let mut emotion_programs = EmotionProgram::presets();
        emotion_programs.truncate(n_emotions);
        while emotion_programs.len() < n_emotions {
            emotion_programs.push(EmotionProgram::random(&mut rng));
        }
        SyntheticSpec {
            n_speakers,
            n_emotions,
            speaker_templates,
            speaker_pitch_offsets,
            emotion_programs,
            n_utterances,
            phoneme_vocab_size: 32,
            n_mels,
            min_phonemes: 4,
            max_phonemes: 9,
            noise_std: 0.05,
            prosody_jitter: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::invalid("n_speakers", "n_speakers must be ≥ 2"));
        }
        if self.n_emotions < 2 {
            return Err(Error::invalid("n_emotions", "n_emotions must be ≥ 2"));
        }
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels", "n_mels must be ≥ 1"));
        }
        if self.phoneme_vocab_size < 2 {
            return Err(Error::invalid(
                "phoneme_vocab_size",
                "phoneme_vocab_size must be ≥ 2",
            ));
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::invalid(
                "min_phonemes",
                "need 1 ≤ min_phonemes ≤ max_phonemes",
            ));
        }
        let cells = self.n_speakers * self.n_emotions;
        if self.n_utterances < 2 * cells {
            return Err(Error::invalid(
                "n_utterances",
                format!(
                    "n_utterances must be ≥ {} (two texts per speaker/emotion cell)",
                    2 * cells
                ),
            ));
        }
        if self.speaker_templates.len() != self.n_speakers {
            return Err(Error::invalid(
                "speaker_templates",
                "one template per speaker",
            ));
        }
        if self
            .speaker_templates
            .iter()
            .any(|t| t.len() != self.n_mels)
        {
            return Err(Error::invalid(
                "speaker_templates",
                "template length must equal n_mels",
            ));
        }
        for (i, a) in self.speaker_templates.iter().enumerate() {
            for b in &self.speaker_templates[i + 1..] {
                if a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9) {
                    return Err(Error::invalid(
                        "speaker_templates",
                        "templates must be pairwise distinct",
                    ));
                }
            }
        }
        if self.speaker_pitch_offsets.len() != self.n_speakers {
            return Err(Error::invalid(
                "speaker_pitch_offsets",
                "one offset per speaker",
            ));
        }
        if self.speaker_pitch_offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid(
                "speaker_pitch_offsets",
                "offsets must be finite",
            ));
        }
        if self.emotion_programs.len() != self.n_emotions {
            return Err(Error::invalid(
                "emotion_programs",
                "one program per emotion",
            ));
        }
        for (i, a) in self.emotion_programs.iter().enumerate() {
            if self.emotion_programs[i + 1..].contains(a) {
                return Err(Error::invalid(
                    "emotion_programs",
                    "programs must be pairwise distinct",
                ));
            }
            if !(a.duration_scale > 0.0) {
                return Err(Error::invalid(
                    "emotion_programs",
                    "duration_scale must be positive",
                ));
            }
        }
        if !(self.prosody_jitter >= 0.0 && self.prosody_jitter.is_finite()) {
            return Err(Error::invalid(
                "prosody_jitter",
                "prosody_jitter must be finite and ≥ 0",
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std", "noise_std must be ≥ 0"));
        }
        Ok(())
    }
}

fn speaker_envelope<R: Rng + ?Sized>(n_mels: usize, rng: &mut R) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (1..=4)
        .map(|k| {
            (
                k as f64,
                rng.random_range(-0.7..0.7),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let tilt = rng.random_range(-0.8..0.8);
    (0..n_mels)
        .map(|m| {
            let x = m as f64 / n_mels.max(2) as f64;
            tilt * (x - 0.5)
                + comps
                    .iter()
                    .map(|(k, a, ph)| a * (PI * k * x + ph).cos())
                    .sum::<f64>()
        })
        .collect()
}

fn gaussian_bump(m: f64, centre: f64, width: f64) -> f64 {
    let d = (m - centre) / width;
    (-0.5 * d * d).exp()
}

struct PhonemeInventory {
    base_duration: Vec<usize>,
    accent: Vec<f64>,
    patterns: Vec<Vec<f64>>,
}

impl PhonemeInventory {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let m = spec.n_mels as f64;
        let width = (m / 20.0).max(0.8);
        let mut inv = PhonemeInventory {
            base_duration: Vec::new(),
            accent: Vec::new(),
            patterns: Vec::new(),
        };
        for _ in 0..spec.phoneme_vocab_size {
            inv.base_duration.push(rng.random_range(2..=4));
            inv.accent.push(rng.random_range(-1.0..1.0));
            let c1 = rng.random_range(0.3..0.95) * m;
            let c2 = rng.random_range(0.3..0.95) * m;
            let a1 = rng.random_range(0.5..1.0);
            let a2 = rng.random_range(0.3..0.8);
            inv.patterns.push(
                (0..spec.n_mels)
                    .map(|b| {
                        let b = b as f64;
                        a1 * gaussian_bump(b, c1, width) + a2 * gaussian_bump(b, c2, width)
                    })
                    .collect(),
            );
        }
        inv
    }
}

/// Deterministic corpus for `spec`. Utterance `u` has speaker `u mod S`,
/// emotion `(u / S) mod E` and text `u / (S·E)`, so every cell is populated
/// with distinct texts and the same sentences recur across cells.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<PhonemeItem>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inventory = PhonemeInventory::new(spec, &mut rng);
    let cells = spec.n_speakers * spec.n_emotions;
    let n_texts = spec.n_utterances.div_ceil(cells);
    let texts: Vec<Vec<usize>> = (0..n_texts)
        .map(|_| {
            let n = rng.random_range(spec.min_phonemes..=spec.max_phonemes);
            (0..n)
                .map(|_| rng.random_range(0..spec.phoneme_vocab_size))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let m = spec.n_mels as f64;
    let peak_width = (m / 40.0).max(0.7);

    let mut corpus = Vec::with_capacity(spec.n_utterances);
    for u in 0..spec.n_utterances {
        let speaker = u % spec.n_speakers;
        let emotion = (u / spec.n_speakers) % spec.n_emotions;
        let text = u / cells;
        let program = &spec.emotion_programs[emotion].jittered(spec.prosody_jitter, spec.seed, u);
        let phonemes = texts[text].clone();
        let durations: Vec<usize> = phonemes
            .iter()
            .map(|&p| {
                ((inventory.base_duration[p] as f64 * program.duration_scale).round() as usize)
                    .max(1)
            })
            .collect();
        let frames: usize = durations.iter().sum();
        let frame_phoneme: Vec<usize> = phonemes
            .iter()
            .zip(&durations)
            .flat_map(|(&p, &d)| std::iter::repeat_n(p, d))
            .collect();

        let mut pitch = Vec::with_capacity(frames);
        let mut energy = Vec::with_capacity(frames);
        let mut mel = Tensor::zeros(frames, spec.n_mels);
        let template = &spec.speaker_templates[speaker];
        let mut utt_rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_mul(0x9e37_79b9)
                .wrapping_add(u as u64 + 1),
        );
        for (t, &p) in frame_phoneme.iter().enumerate() {
            let pos = if frames > 1 {
                t as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            let f0 = program.pitch_offset
                + spec.speaker_pitch_offsets[speaker]
                + program.pitch_amplitude * program.pitch_shape.at(pos)
                + 0.15 * inventory.accent[p];
            let en =
                program.energy_offset + program.energy_amplitude * program.energy_shape.at(pos);
            pitch.push(f0);
            energy.push(en);
            let centre = m * (0.25 + 0.1 * f0);
            let row = mel.row_mut(t);
            for (b, v) in row.iter_mut().enumerate() {
                let bf = b as f64;
                let eps = if spec.noise_std > 0.0 {
                    noise.sample(&mut utt_rng)
                } else {
                    0.0
                };
                *v = template[b]
                    + inventory.patterns[p][b]
                    + 0.5 * en
                    + 1.2 * gaussian_bump(bf, centre, peak_width)
                    + eps;
            }
        }
        let item = PhonemeItem {
            id: format!("spk{speaker}_emo{emotion}_txt{text:04}"),
            phoneme_ids: phonemes,
            speaker_id: speaker,
            emotion_id: emotion,
            durations,
            pitch,
            energy,
            mel: MelSpectrogram::new(mel),
            text_key: format!("text{text:04}"),
        };
        debug_assert!(item.validate().is_ok());
        corpus.push(item);
    }
    Ok(corpus)
}
