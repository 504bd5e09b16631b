//! Training configuration: TOML on disk, dotted overrides, strict keys.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneDims;
use crate::datasets::SyntheticSpec;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::style_encoder::StyleDims;

/// Loss weights: duration, pitch, energy, emotion, speaker, MI penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub emotion: f64,
    pub speaker: f64,
    pub mi: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            duration: 1.0,
            pitch: 1.0,
            energy: 1.0,
            emotion: 1.0,
            speaker: 1.0,
            mi: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    pub use_predictors: bool,
    pub use_mine: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            use_predictors: true,
            use_mine: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Peak-rate multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub warmup_steps: u64,
    /// Fixed rate of the MI critic.
    pub mine_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            lr_scale: 1.0,
            warmup_steps: 400,
            mine_lr: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub ffn_kernel: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub predictor_filters: usize,
    pub predictor_kernel: usize,
    pub n_bins: usize,
    pub dropout: f64,
    pub d_ref: usize,
    pub ref_channels: Vec<usize>,
    pub ref_time_strides: Vec<usize>,
    pub timbre_tokens: usize,
    pub emotion_tokens: usize,
    pub token_heads: usize,
    pub align_heads: usize,
    pub pepa_kernel: usize,
    pub pooling_heads: usize,
    pub pooling_dim: usize,
    pub pooling_radius: usize,
    pub classifier_hidden: usize,
    pub mine_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneDims::default();
        let s = StyleDims::default();
        ModelConfig {
            d_model: b.d_model,
            heads: b.heads,
            ffn_dim: b.ffn_dim,
            ffn_kernel: b.ffn_kernel,
            encoder_layers: b.encoder_layers,
            decoder_layers: b.decoder_layers,
            predictor_filters: b.predictor_filters,
            predictor_kernel: b.predictor_kernel,
            n_bins: b.n_bins,
            dropout: b.dropout,
            d_ref: s.d_ref,
            ref_channels: s.ref_channels,
            ref_time_strides: s.ref_time_strides,
            timbre_tokens: s.timbre_tokens,
            emotion_tokens: s.emotion_tokens,
            token_heads: s.token_heads,
            align_heads: s.align_heads,
            pepa_kernel: s.pepa_kernel,
            pooling_heads: s.pooling_heads,
            pooling_dim: s.pooling_dim,
            pooling_radius: s.pooling_radius,
            classifier_hidden: 256,
            mine_hidden: crate::mine::DEFAULT_HIDDEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub n_utterances: usize,
    pub n_mels: usize,
    pub phoneme_vocab_size: usize,
    pub noise_std: f64,
    pub prosody_jitter: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_speakers: 2,
            n_emotions: 5,
            n_utterances: 600,
            n_mels: 80,
            phoneme_vocab_size: 32,
            noise_std: 0.05,
            prosody_jitter: 0.0,
            seed: 7,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::with_bins(
            self.n_speakers,
            self.n_emotions,
            self.n_utterances,
            self.n_mels,
            self.seed,
        );
        spec.phoneme_vocab_size = self.phoneme_vocab_size;
        spec.noise_std = self.noise_std;
        spec.prosody_jitter = self.prosody_jitter;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub mine_steps_per_tts_step: usize,
    /// Validation losses are logged every this many steps (0 disables).
    pub eval_every: usize,
    /// Intermediate checkpoints every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub lambdas: Lambdas,
    pub ablations: Ablations,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            seed: 0,
            batch_size: 16,
            total_steps: 2000,
            mine_steps_per_tts_step: 5,
            eval_every: 100,
            checkpoint_every: 0,
            lambdas: Lambdas::default(),
            ablations: Ablations::default(),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small dimensions that train in minutes on one core.
    pub fn desk() -> Self {
        let mut c = TrainConfig::default();
        c.data.n_mels = 20;
        c.data.n_utterances = 2400;
        c.data.prosody_jitter = 0.3;
        c.model = ModelConfig {
            d_model: 32,
            heads: 2,
            ffn_dim: 64,
            ffn_kernel: 3,
            encoder_layers: 4,
            decoder_layers: 6,
            predictor_filters: 32,
            predictor_kernel: 3,
            n_bins: 256,
            dropout: 0.0,
            d_ref: 32,
            ref_channels: vec![8, 8, 16, 16, 16, 16],
            ref_time_strides: vec![2, 2, 1, 1, 1, 1],
            timbre_tokens: 10,
            emotion_tokens: 10,
            token_heads: 4,
            align_heads: 2,
            pepa_kernel: 3,
            pooling_heads: 2,
            pooling_dim: 32,
            pooling_radius: 1,
            classifier_hidden: 32,
            mine_hidden: crate::mine::DEFAULT_HIDDEN,
        };
        c.optimizer.lr_scale = 0.3;
        c.optimizer.mine_lr = 1e-3;
        c
    }

    pub fn backbone_dims(&self) -> BackboneDims {
        let m = &self.model;
        BackboneDims {
            vocab_size: self.data.phoneme_vocab_size,
            n_mels: self.data.n_mels,
            d_model: m.d_model,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            ffn_kernel: m.ffn_kernel,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            predictor_filters: m.predictor_filters,
            predictor_kernel: m.predictor_kernel,
            n_bins: m.n_bins,
            dropout: m.dropout,
        }
    }

    pub fn style_dims(&self) -> StyleDims {
        let m = &self.model;
        StyleDims {
            d_ref: m.d_ref,
            ref_channels: m.ref_channels.clone(),
            ref_time_strides: m.ref_time_strides.clone(),
            timbre_tokens: m.timbre_tokens,
            emotion_tokens: m.emotion_tokens,
            token_heads: m.token_heads,
            align_heads: m.align_heads,
            pepa_kernel: m.pepa_kernel,
            pooling_heads: m.pooling_heads,
            pooling_dim: m.pooling_dim,
            pooling_radius: m.pooling_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!(
                "stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        let l = &self.lambdas;
        for (k, v) in [
            ("duration", l.duration),
            ("pitch", l.pitch),
            ("energy", l.energy),
            ("emotion", l.emotion),
            ("speaker", l.speaker),
            ("mi", l.mi),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "lambdas.{k} must be a non-negative number, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.stage == 2 && self.batch_size < 2 {
            return Err(Error::Config(
                "stage 2 needs batch_size ≥ 2 for the MI estimate".into(),
            ));
        }
        if self.mine_steps_per_tts_step == 0 {
            return Err(Error::Config("mine_steps_per_tts_step must be ≥ 1".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config(
                "optimizer betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(o.lr_scale > 0.0) || !(o.mine_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.model.classifier_hidden == 0 || self.model.mine_hidden == 0 {
            return Err(Error::Config(
                "classifier_hidden and mine_hidden must be ≥ 1".into(),
            ));
        }
        self.backbone_dims()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.style_dims()
            .validate(self.model.d_model)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key=value` overrides in order. Keys are dotted paths into
    /// the document and must already exist; values are TOML literals, with
    /// bare words taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            set_dotted(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let text = toml::to_string(&doc).expect("table serialises");
        TrainConfig::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut parts = key.split('.').peekable();
    let mut table = doc;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            let slot = table.get_mut(part).ok_or_else(unknown)?;
            if slot.is_table() {
                return Err(Error::Config(format!(
                    "{key:?} names a section, not a value"
                )));
            }
            // integers are accepted where floats are expected
            *slot = match (&*slot, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            return Ok(());
        }
        table = table
            .get_mut(part)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(unknown)?;
    }
    Err(unknown())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for c in [TrainConfig::default(), TrainConfig::desk()] {
            c.validate().unwrap();
            assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        let l = Lambdas::default();
        assert_eq!(
            [l.duration, l.pitch, l.energy, l.emotion, l.speaker, l.mi],
            [1.0, 1.0, 1.0, 1.0, 1.0, 0.1]
        );
        let o = OptimizerConfig::default();
        assert_eq!((o.beta1, o.beta2), (0.9, 0.98));
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = TrainConfig::default()
            .with_overrides(&[
                "lambdas.mi=0.5",
                "ablations.use_mine=false",
                "stage=2",
                "lambdas.mi=2",
            ])
            .unwrap();
        assert_eq!(c.lambdas.mi, 2.0);
        assert!(!c.ablations.use_mine);
        assert_eq!(c.stage, 2);
        let c = TrainConfig::default()
            .with_overrides(&["model.ref_time_strides=[2,2,2,2,2,2]"])
            .unwrap();
        assert_eq!(c.model.ref_time_strides, vec![2; 6]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::default()
            .with_overrides(&["lambdas.bogus=1"])
            .is_err());
        assert!(TrainConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["lambdas=1"])
            .is_err());
        let mut text = TrainConfig::default().to_toml();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(TrainConfig::from_toml(&text).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(TrainConfig::default()
            .with_overrides(&["lambdas.pitch=-1"])
            .is_err());
        assert!(TrainConfig::default().with_overrides(&["stage=3"]).is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["model.heads=3"])
            .is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["mine_steps_per_tts_step=0"])
            .is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = a.with_overrides(&["seed=1"]).unwrap();
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
