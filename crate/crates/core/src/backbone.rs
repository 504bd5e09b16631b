//! Non-autoregressive acoustic model: phoneme encoder, variance adaptor,
//! length regulator and mel decoder.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datasets::{Batch, BatchItem, PhonemeItem, NEUTRAL_EMOTION};
use crate::error::{Error, Result};
use crate::nn::{full_mask, sinusoid_table, Conv1d, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub vocab_size: usize,
    pub n_mels: usize,
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
}

impl Default for BackboneDims {
    fn default() -> Self {
        BackboneDims {
            vocab_size: 32,
            n_mels: 80,
            d_model: 256,
            heads: 2,
            ffn_dim: 1024,
            ffn_kernel: 9,
            encoder_layers: 4,
            decoder_layers: 6,
            predictor_filters: 256,
            predictor_kernel: 3,
            n_bins: 256,
            dropout: 0.1,
        }
    }
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_mels", self.n_mels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("ffn_kernel", self.ffn_kernel),
            ("predictor_filters", self.predictor_filters),
            ("predictor_kernel", self.predictor_kernel),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{field}"), "must be ≥ 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(
                "model.d_model",
                format!("{} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.n_bins < 2 {
            return Err(Error::invalid("model.n_bins", "must be ≥ 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Self-attention and a two-layer convolutional feed-forward, each wrapped
/// in a residual connection and post-norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

impl FftBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &BackboneDims,
        rng: &mut R,
    ) -> Self {
        let d = dims.d_model;
        FftBlock {
            attention: MultiHeadAttention::new(
                store,
                &format!("{name}.attention"),
                d,
                d,
                d,
                d,
                dims.heads,
                rng,
            ),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            conv1: Conv1d::new(
                store,
                &format!("{name}.conv1"),
                d,
                dims.ffn_dim,
                dims.ffn_kernel,
                rng,
            ),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), dims.ffn_dim, d, 1, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            dropout: dims.dropout,
        }
    }

    /// `x` is `L × D`; rows where `mask` is false come out as zeros and are
    /// never attended to.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: &Arc<Vec<bool>>) -> Result<Var> {
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite("fft block input".into()));
        }
        let len = mask.len();
        let key_mask: Vec<bool> = (0..len * len).map(|k| mask[k % len]).collect();
        let a = self.attention.forward(g, x, x, Some(&key_mask)).out;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let x = self.attn_norm.forward(g, x);
        let x = g.mask_rows(x, Arc::clone(mask));

        let f = self.conv1.forward(g, x);
        let f = g.relu(f);
        let f = g.mask_rows(f, Arc::clone(mask));
        let f = self.conv2.forward(g, f);
        let f = g.dropout(f, self.dropout);
        let x = g.add(x, f);
        let x = self.ffn_norm.forward(g, x);
        Ok(g.mask_rows(x, Arc::clone(mask)))
    }
}

/// Repeats row `i` of `h` `durations[i]` times.
pub fn length_regulate(g: &mut Graph, h: Var, durations: &[usize]) -> Result<Var> {
    let rows = g.value(h).rows();
    if durations.len() != rows {
        return Err(Error::shape(
            "length_regulate",
            format!("{} durations for {rows} positions", durations.len()),
        ));
    }
    let idx: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    if idx.is_empty() {
        return Err(Error::invalid("durations", "total duration is zero"));
    }
    Ok(g.gather_rows(h, idx))
}

/// Signed-duration entry point for external callers; negative values are
/// rejected before regulation.
pub fn length_regulate_signed(g: &mut Graph, h: Var, durations: &[i64]) -> Result<Var> {
    if let Some(d) = durations.iter().find(|&&d| d < 0) {
        return Err(Error::invalid(
            "durations",
            format!("negative duration {d}"),
        ));
    }
    let d: Vec<usize> = durations.iter().map(|&d| d as usize).collect();
    length_regulate(g, h, &d)
}

/// Frame counts from log-domain predictions: `round(exp(x) − 1)`, clamped
/// at zero, the inverse of the `log(1 + d)` training target. If everything
/// rounds to zero the longest prediction keeps one frame.
pub fn durations_from_log(log_dur: &[f64]) -> Vec<usize> {
    let mut d: Vec<usize> = log_dur
        .iter()
        .map(|&x| (x.exp() - 1.0).round().max(0.0) as usize)
        .collect();
    if d.iter().all(|&v| v == 0) {
        if let Some((i, _)) = log_dur.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
            d[i] = 1;
        }
    }
    d
}

#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    pub embedding: ParamId,
    pub blocks: Vec<FftBlock>,
    pub vocab_size: usize,
}

impl PhonemeEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: &BackboneDims, rng: &mut R) -> Self {
        let embedding = store.add(
            "encoder.embedding",
            Tensor::randn(
                dims.vocab_size,
                dims.d_model,
                (dims.d_model as f64).powf(-0.5),
                rng,
            ),
        );
        let blocks = (0..dims.encoder_layers)
            .map(|i| FftBlock::new(store, &format!("encoder.block{i}"), dims, rng))
            .collect();
        PhonemeEncoder {
            embedding,
            blocks,
            vocab_size: dims.vocab_size,
        }
    }

    /// `ids` may be padded; `mask` marks the real phonemes.
    pub fn forward(&self, g: &mut Graph, ids: &[usize], mask: &Arc<Vec<bool>>) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::invalid(
                "phoneme id",
                format!("{bad} outside vocabulary of {}", self.vocab_size),
            ));
        }
        let table = g.param(self.embedding);
        let x = g.gather_rows(table, ids.to_vec());
        let d = g.value(x).cols();
        let pos = g.constant(sinusoid_table(ids.len(), d));
        let x = g.add(x, pos);
        let mut x = g.mask_rows(x, Arc::clone(mask));
        for block in &self.blocks {
            x = block.forward(g, x, mask)?;
        }
        Ok(x)
    }
}

/// Conv–ReLU–LayerNorm twice, then a scalar per position.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub proj: Linear,
    pub dropout: f64,
}

impl VariancePredictor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &BackboneDims,
        rng: &mut R,
    ) -> Self {
        let (d, f, k) = (dims.d_model, dims.predictor_filters, dims.predictor_kernel);
        VariancePredictor {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), d, f, k, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), f),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), f, f, k, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), f),
            proj: Linear::new(store, &format!("{name}.proj"), f, 1, true, rng),
            dropout: dims.dropout,
        }
    }

    /// `L × D` → `L × 1`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = g.relu(y);
        let y = self.norm1.forward(g, y);
        let y = g.dropout(y, self.dropout);
        let y = self.conv2.forward(g, y);
        let y = g.relu(y);
        let y = self.norm2.forward(g, y);
        let y = g.dropout(y, self.dropout);
        self.proj.forward(g, y)
    }
}

/// Value range covered by the quantised pitch/energy embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    /// Bucket of `v` among `n_bins` equal-width bins, saturating outside.
    pub fn bucket(&self, v: f64, n_bins: usize) -> usize {
        let span = self.max - self.min;
        if !(span > 0.0) || !v.is_finite() {
            return 0;
        }
        let pos = ((v - self.min) / span * (n_bins - 1) as f64).floor();
        pos.clamp(0.0, (n_bins - 1) as f64) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRanges {
    pub pitch: ValueRange,
    pub energy: ValueRange,
}

impl VarianceRanges {
    pub fn from_corpus(corpus: &[PhonemeItem]) -> Self {
        let range = |f: fn(&PhonemeItem) -> &[f64]| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for item in corpus {
                for &v in f(item) {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo > hi {
                ValueRange { min: 0.0, max: 1.0 }
            } else {
                ValueRange { min: lo, max: hi }
            }
        };
        VarianceRanges {
            pitch: range(|i| &i.pitch),
            energy: range(|i| &i.energy),
        }
    }
}

impl Default for VarianceRanges {
    fn default() -> Self {
        VarianceRanges {
            pitch: ValueRange {
                min: -3.0,
                max: 3.0,
            },
            energy: ValueRange {
                min: 0.0,
                max: 10.0,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarianceAdaptor {
    pub duration: VariancePredictor,
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
    pub pitch_embedding: ParamId,
    pub energy_embedding: ParamId,
    pub ranges: VarianceRanges,
    pub n_bins: usize,
}

/// Ground-truth conditioning used in training mode.
#[derive(Clone, Copy, Debug)]
pub struct VarianceTargets<'a> {
    pub durations: &'a [usize],
    pub pitch: &'a [f64],
    pub energy: &'a [f64],
}

#[derive(Clone, Copy, Debug)]
pub enum AdaptorMode<'a> {
    Train(Option<VarianceTargets<'a>>),
    Inference,
}

pub struct AdaptorOutput {
    /// `T × D` frame sequence.
    pub frames: Var,
    /// `N × 1` log-domain durations.
    pub log_duration: Var,
    /// `T × 1` each.
    pub pitch: Var,
    pub energy: Var,
    /// Durations used for regulation.
    pub durations: Vec<usize>,
}

impl VarianceAdaptor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: &BackboneDims,
        ranges: VarianceRanges,
        rng: &mut R,
    ) -> Self {
        let emb_std = (dims.d_model as f64).powf(-0.5);
        VarianceAdaptor {
            duration: VariancePredictor::new(store, "variance_adaptor.duration", dims, rng),
            pitch: VariancePredictor::new(store, "variance_adaptor.pitch", dims, rng),
            energy: VariancePredictor::new(store, "variance_adaptor.energy", dims, rng),
            pitch_embedding: store.add(
                "variance_adaptor.pitch_embedding",
                Tensor::randn(dims.n_bins, dims.d_model, emb_std, rng),
            ),
            energy_embedding: store.add(
                "variance_adaptor.energy_embedding",
                Tensor::randn(dims.n_bins, dims.d_model, emb_std, rng),
            ),
            ranges,
            n_bins: dims.n_bins,
        }
    }

    /// `h` is the unpadded `N × D` phoneme sequence.
    pub fn forward(&self, g: &mut Graph, h: Var, mode: AdaptorMode<'_>) -> Result<AdaptorOutput> {
        let n = g.value(h).rows();
        let targets = match mode {
            AdaptorMode::Train(Some(t)) => Some(t),
            AdaptorMode::Train(None) => {
                return Err(Error::invalid(
                    "variance adaptor",
                    "training mode requires targets",
                ));
            }
            AdaptorMode::Inference => None,
        };
        let log_duration = self.duration.forward(g, h);
        let durations = match targets {
            Some(t) => {
                if t.durations.len() != n {
                    return Err(Error::shape(
                        "variance adaptor",
                        format!("{} target durations for {n} phonemes", t.durations.len()),
                    ));
                }
                t.durations.to_vec()
            }
            None => durations_from_log(g.value(log_duration).data()),
        };
        let frames = length_regulate(g, h, &durations)?;
        let t_len = g.value(frames).rows();
        if let Some(t) = targets {
            if t.pitch.len() != t_len || t.energy.len() != t_len {
                return Err(Error::shape(
                    "variance adaptor",
                    format!(
                        "pitch/energy targets have {}/{} frames, regulated sequence has {t_len}",
                        t.pitch.len(),
                        t.energy.len()
                    ),
                ));
            }
        }

        let pitch = self.pitch.forward(g, frames);
        let pitch_values = match targets {
            Some(t) => t.pitch.to_vec(),
            None => g.value(pitch).data().to_vec(),
        };
        let frames = self.add_embedding(
            g,
            frames,
            self.pitch_embedding,
            &pitch_values,
            self.ranges.pitch,
        );

        let energy = self.energy.forward(g, frames);
        let energy_values = match targets {
            Some(t) => t.energy.to_vec(),
            None => g.value(energy).data().to_vec(),
        };
        let frames = self.add_embedding(
            g,
            frames,
            self.energy_embedding,
            &energy_values,
            self.ranges.energy,
        );

        Ok(AdaptorOutput {
            frames,
            log_duration,
            pitch,
            energy,
            durations,
        })
    }

    fn add_embedding(
        &self,
        g: &mut Graph,
        frames: Var,
        table: ParamId,
        values: &[f64],
        range: ValueRange,
    ) -> Var {
        let idx = values
            .iter()
            .map(|&v| range.bucket(v, self.n_bins))
            .collect();
        let table = g.param(table);
        let emb = g.gather_rows(table, idx);
        g.add(frames, emb)
    }
}

#[derive(Clone, Debug)]
pub struct MelDecoder {
    pub blocks: Vec<FftBlock>,
    pub proj: Linear,
}

impl MelDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: &BackboneDims, rng: &mut R) -> Self {
        MelDecoder {
            blocks: (0..dims.decoder_layers)
                .map(|i| FftBlock::new(store, &format!("decoder.block{i}"), dims, rng))
                .collect(),
            proj: Linear::new(store, "decoder.proj", dims.d_model, dims.n_mels, true, rng),
        }
    }

    /// `T × D` frames → `T × M` mel.
    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let (t, d) = g.value(frames).shape();
        let pos = g.constant(sinusoid_table(t, d));
        let mut x = g.add(frames, pos);
        let mask = full_mask(t);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, &mask)?;
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!("decoder block {i} output")));
            }
        }
        Ok(self.proj.forward(g, x))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub dims: BackboneDims,
    pub encoder: PhonemeEncoder,
    pub adaptor: VarianceAdaptor,
    pub decoder: MelDecoder,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: BackboneDims,
        ranges: VarianceRanges,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let encoder = PhonemeEncoder::new(store, &dims, rng);
        let adaptor = VarianceAdaptor::new(store, &dims, ranges, rng);
        let decoder = MelDecoder::new(store, &dims, rng);
        Ok(Backbone {
            dims,
            encoder,
            adaptor,
            decoder,
        })
    }

    /// Encodes an unpadded phoneme sequence.
    pub fn encode(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.encoder.forward(g, ids, &full_mask(ids.len()))
    }
}

/// Per-batch normalisers so that per-item partial losses sum to batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossNorm {
    /// Valid mel entries (frames × bins).
    pub mel_elements: usize,
    pub phonemes: usize,
    pub frames: usize,
    pub items: usize,
}

impl LossNorm {
    pub fn of(batch: &Batch) -> Self {
        let n_mels = batch.mels.first().map_or(0, Tensor::cols);
        let frames: usize = (0..batch.len()).map(|i| batch.n_frames(i)).sum();
        LossNorm {
            mel_elements: frames * n_mels,
            phonemes: (0..batch.len()).map(|i| batch.n_phonemes(i)).sum(),
            frames,
            items: batch.len(),
        }
    }
}

/// Scalar `Σ|pred − target| / norm`.
pub fn l1_partial(g: &mut Graph, pred: Var, target: &Tensor, norm: usize) -> Var {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t);
    let a = g.abs(d);
    let s = g.sum_all(a);
    g.scale(s, 1.0 / norm.max(1) as f64)
}

/// Scalar `Σ(pred − target)² / norm`.
pub fn l2_partial(g: &mut Graph, pred: Var, target: &Tensor, norm: usize) -> Var {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t);
    let sq = g.square(d);
    let s = g.sum_all(sq);
    g.scale(s, 1.0 / norm.max(1) as f64)
}

pub fn log_duration_targets(durations: &[usize]) -> Tensor {
    Tensor::from_vec(
        durations.len(),
        1,
        durations.iter().map(|&d| (1.0 + d as f64).ln()).collect(),
    )
}

pub struct Stage1ItemOutput {
    pub mel: Var,
    pub log_duration: Var,
    /// This item's share of the batch losses.
    pub recons: Var,
    pub duration: Var,
}

/// Teacher-forced forward of one item without any style conditioning.
pub fn stage1_item(
    g: &mut Graph,
    model: &Backbone,
    item: &BatchItem<'_>,
    norm: &LossNorm,
) -> Result<Stage1ItemOutput> {
    let h = model.encode(g, item.phoneme_ids)?;
    let targets = VarianceTargets {
        durations: item.durations,
        pitch: item.pitch,
        energy: item.energy,
    };
    let va = model
        .adaptor
        .forward(g, h, AdaptorMode::Train(Some(targets)))?;
    let mel = model.decoder.forward(g, va.frames)?;
    let target = item.mel.slice_rows(0, item.n_frames);
    let recons = l1_partial(g, mel, &target, norm.mel_elements);
    let duration = l2_partial(
        g,
        va.log_duration,
        &log_duration_targets(item.durations),
        norm.phonemes,
    );
    Ok(Stage1ItemOutput {
        mel,
        log_duration: va.log_duration,
        recons,
        duration,
    })
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub mel_pred: Vec<Tensor>,
    pub log_dur_pred: Vec<Vec<f64>>,
    pub recons: f64,
    pub dur: f64,
}

/// Deterministic stage-1 forward over a batch of neutral utterances.
pub fn stage1_forward(store: &ParamStore, model: &Backbone, batch: &Batch) -> Result<Stage1Output> {
    ensure_neutral(batch)?;
    let norm = LossNorm::of(batch);
    let mut out = Stage1Output {
        mel_pred: Vec::new(),
        log_dur_pred: Vec::new(),
        recons: 0.0,
        dur: 0.0,
    };
    for i in 0..batch.len() {
        let mut g = Graph::new(store);
        let o = stage1_item(&mut g, model, &batch.item(i), &norm)?;
        out.mel_pred.push(g.value(o.mel).clone());
        out.log_dur_pred
            .push(g.value(o.log_duration).data().to_vec());
        out.recons += g.value(o.recons).data()[0];
        out.dur += g.value(o.duration).data()[0];
    }
    Ok(out)
}

pub fn ensure_neutral(batch: &Batch) -> Result<()> {
    match batch.emotion_ids.iter().position(|&e| e != NEUTRAL_EMOTION) {
        Some(i) => Err(Error::invalid(
            "stage-1 batch",
            format!(
                "utterance {} has non-neutral emotion {}",
                batch.ids[i], batch.emotion_ids[i]
            ),
        )),
        None => Ok(()),
    }
}
