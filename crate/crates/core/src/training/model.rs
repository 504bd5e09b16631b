//! The full acoustic model: backbone, style encoder and label predictors.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{
    l1_partial, l2_partial, log_duration_targets, AdaptorMode, Backbone, BackboneDims, LossNorm,
    VarianceRanges, VarianceTargets,
};
use crate::datasets::BatchItem;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::ParamStore;
use crate::style_encoder::{StyleBundle, StyleDims, StyleEncoder};
use crate::tensor::Tensor;

/// Emotion and speaker classifiers on the pooled emotion vector and the
/// timbre vector.
#[derive(Clone, Debug)]
pub struct Predictors {
    pub emotion: Mlp,
    pub speaker: Mlp,
}

impl Predictors {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_model: usize,
        hidden: usize,
        n_emotions: usize,
        n_speakers: usize,
        rng: &mut R,
    ) -> Self {
        Predictors {
            emotion: Mlp::new(
                store,
                "predictors.emotion",
                &[d_model, hidden, n_emotions],
                Activation::Relu,
                rng,
            ),
            speaker: Mlp::new(
                store,
                "predictors.speaker",
                &[d_model, hidden, n_speakers],
                Activation::Relu,
                rng,
            ),
        }
    }

    pub fn predict_emotion_label(&self, g: &mut Graph, emotion_global: Var) -> Var {
        self.emotion.forward(g, emotion_global)
    }

    pub fn predict_speaker_label(&self, g: &mut Graph, timbre: Var) -> Var {
        self.speaker.forward(g, timbre)
    }
}

#[derive(Clone, Debug)]
pub struct TtsModel {
    pub backbone: Backbone,
    pub style: StyleEncoder,
    pub predictors: Predictors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelCounts {
    pub speakers: usize,
    pub emotions: usize,
}

impl TtsModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: BackboneDims,
        style_dims: StyleDims,
        ranges: VarianceRanges,
        classifier_hidden: usize,
        labels: LabelCounts,
        rng: &mut R,
    ) -> Result<Self> {
        let (d_model, n_mels) = (dims.d_model, dims.n_mels);
        let backbone = Backbone::new(store, dims, ranges, rng)?;
        let style = StyleEncoder::new(store, style_dims, d_model, n_mels, rng)?;
        let predictors = Predictors::new(
            store,
            d_model,
            classifier_hidden,
            labels.emotions,
            labels.speakers,
            rng,
        );
        Ok(TtsModel {
            backbone,
            style,
            predictors,
        })
    }

    /// Style extraction for one reference and one phoneme sequence.
    pub fn extract_style(
        &self,
        g: &mut Graph,
        phoneme_ids: &[usize],
        reference: &Tensor,
    ) -> Result<(Var, StyleBundle)> {
        let h = self.backbone.encode(g, phoneme_ids)?;
        let bundle = self.style.forward(g, reference, h)?;
        Ok((h, bundle))
    }

    /// Mel prediction from phonemes and a reference, with predicted
    /// durations, pitch and energy.
    pub fn synthesize(
        &self,
        g: &mut Graph,
        phoneme_ids: &[usize],
        reference: &Tensor,
    ) -> Result<(Var, StyleBundle)> {
        let (h, bundle) = self.extract_style(g, phoneme_ids, reference)?;
        let fused = self.style.fuse(g, h, &bundle)?;
        let va = self
            .backbone
            .adaptor
            .forward(g, fused, AdaptorMode::Inference)?;
        let mel = self.backbone.decoder.forward(g, va.frames)?;
        Ok((mel, bundle))
    }
}

/// Graph handles for one item's share of the stage-2 batch losses.
pub struct Stage2ItemOutput {
    pub mel: Var,
    pub recons: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
    /// Absent when the predictors are ablated.
    pub emotion: Option<Var>,
    pub speaker: Option<Var>,
    pub bundle: StyleBundle,
}

/// Teacher-forced stage-2 forward of one item.
pub fn stage2_item(
    g: &mut Graph,
    model: &TtsModel,
    item: &BatchItem<'_>,
    norm: &LossNorm,
    use_predictors: bool,
) -> Result<Stage2ItemOutput> {
    let (h, bundle) = model.extract_style(g, item.phoneme_ids, &item.reference.values)?;
    let fused = model.style.fuse(g, h, &bundle)?;
    let targets = VarianceTargets {
        durations: item.durations,
        pitch: item.pitch,
        energy: item.energy,
    };
    let va = model
        .backbone
        .adaptor
        .forward(g, fused, AdaptorMode::Train(Some(targets)))?;
    let mel = model.backbone.decoder.forward(g, va.frames)?;
    let target = item.mel.slice_rows(0, item.n_frames);
    let recons = l1_partial(g, mel, &target, norm.mel_elements);
    let duration = l2_partial(
        g,
        va.log_duration,
        &log_duration_targets(item.durations),
        norm.phonemes,
    );
    let column = |v: &[f64]| Tensor::from_vec(v.len(), 1, v.to_vec());
    let pitch = l2_partial(g, va.pitch, &column(item.pitch), norm.frames);
    let energy = l2_partial(g, va.energy, &column(item.energy), norm.frames);
    let (emotion, speaker) = if use_predictors {
        let scale = 1.0 / norm.items.max(1) as f64;
        let logits = model
            .predictors
            .predict_emotion_label(g, bundle.emotion_global);
        check_classes(g, logits, item.emotion_id, "emotion")?;
        let ce = g.cross_entropy(logits, vec![item.emotion_id]);
        let emotion = g.scale(ce, scale);
        let logits = model.predictors.predict_speaker_label(g, bundle.timbre);
        check_classes(g, logits, item.speaker_id, "speaker")?;
        let ce = g.cross_entropy(logits, vec![item.speaker_id]);
        (Some(emotion), Some(g.scale(ce, scale)))
    } else {
        (None, None)
    };
    Ok(Stage2ItemOutput {
        mel,
        recons,
        duration,
        pitch,
        energy,
        emotion,
        speaker,
        bundle,
    })
}

fn check_classes(g: &Graph, logits: Var, label: usize, what: &str) -> Result<()> {
    let k = g.value(logits).cols();
    if label >= k {
        return Err(Error::invalid(
            format!("{what} label"),
            format!("label {label} out of range for {k} classes"),
        ));
    }
    Ok(())
}
