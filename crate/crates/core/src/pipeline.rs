//! End-to-end runs shared by the command line and the acceptance suite:
//! synthesis, evaluation and the ablation comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::datasets::{
    assign_references, generate_synthetic_corpus, read_mel, split_corpus, write_mel,
    MelSpectrogram, PhonemeItem, ReferenceRule,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    cluster_silhouette, mcd, probe_uaa, project_embeddings_2d, EvalReport, ProjectionMethod,
    DEFAULT_ORDER,
};
use crate::params::ParamStore;
use crate::training::{
    load_model, run_training, Checkpoint, DataConfig, StepMetrics, TrainConfig, TtsModel,
};

/// Which part of a corpus a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
    Test,
    /// Validation and test together, the held-out set used for scoring.
    Heldout,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "heldout" => Ok(Split::Heldout),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

/// The items of `which`, split with the fractions and seed of `data`.
pub fn select_split(
    corpus: &[PhonemeItem],
    which: Split,
    data: &DataConfig,
) -> Result<Vec<PhonemeItem>> {
    if which == Split::All {
        return Ok(corpus.to_vec());
    }
    let split = split_corpus(corpus, data.val_fraction, data.test_fraction, data.seed)?;
    Ok(match which {
        Split::All => unreachable!(),
        Split::Train => split.train,
        Split::Val => split.val,
        Split::Test => split.test,
        Split::Heldout => {
            let mut v = split.val;
            v.extend(split.test);
            v
        }
    })
}

/// One synthesized utterance with the style vectors it was conditioned on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub reference_id: String,
    pub speaker: usize,
    pub emotion: usize,
    pub mel_path: String,
    pub emotion_global: Vec<f64>,
    pub timbre: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub record: SynthRecord,
    pub mel: MelSpectrogram,
}

/// Synthesizes every item of `items`, taking references from `pool` under
/// `rule`.
pub fn synthesize_items(
    store: &ParamStore,
    model: &TtsModel,
    items: &[PhonemeItem],
    pool: &[PhonemeItem],
    rule: ReferenceRule,
    seed: u64,
) -> Result<Vec<Synthesized>> {
    let refs = assign_references(items, pool, rule, seed)?;
    items
        .iter()
        .zip(refs)
        .map(|(item, r)| {
            let reference = r.map_or(item, |j| &pool[j]);
            let mut g = Graph::new(store).with_constant_params();
            let (mel, bundle) =
                model.synthesize(&mut g, &item.phoneme_ids, &reference.mel.values)?;
            let mel = g.value(mel).clone();
            if !mel.is_finite() {
                return Err(Error::NonFinite(format!("synthesized mel for {}", item.id)));
            }
            Ok(Synthesized {
                record: SynthRecord {
                    id: item.id.clone(),
                    reference_id: reference.id.clone(),
                    speaker: item.speaker_id,
                    emotion: item.emotion_id,
                    mel_path: format!("mels/{}.mel", item.id),
                    emotion_global: g.value(bundle.emotion_global).data().to_vec(),
                    timbre: g.value(bundle.timbre).data().to_vec(),
                },
                mel: MelSpectrogram::new(mel),
            })
        })
        .collect()
}

pub const SYNTH_MANIFEST: &str = "synth.jsonl";

/// Writes `dir/synth.jsonl` and one mel file per record under `dir/mels`.
pub fn write_synthesized(dir: &Path, out: &[Synthesized]) -> Result<PathBuf> {
    let mel_dir = dir.join("mels");
    std::fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;
    let mut lines = String::new();
    for s in out {
        write_mel(&dir.join(&s.record.mel_path), &s.mel)?;
        lines.push_str(&serde_json::to_string(&s.record).map_err(|e| Error::Serde(e.to_string()))?);
        lines.push('\n');
    }
    let path = dir.join(SYNTH_MANIFEST);
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_synthesized(manifest: &Path) -> Result<Vec<Synthesized>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let record: SynthRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: manifest.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        let mel = read_mel(&dir.join(&record.mel_path))?;
        out.push(Synthesized { record, mel });
    }
    Ok(out)
}

/// Options for [`evaluate`].
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub probe_seed: u64,
    pub projection: ProjectionMethod,
    pub projection_seed: u64,
    /// Where plots go; none skips plotting.
    pub plot_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            probe_seed: 0,
            projection: ProjectionMethod::Tsne,
            projection_seed: 0,
            plot_dir: None,
        }
    }
}

/// Scores synthesized outputs against their targets. Both lists must
/// describe the same utterances.
pub fn evaluate(
    targets: &[PhonemeItem],
    synthesized: &[Synthesized],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if targets.len() != synthesized.len() {
        return Err(Error::invalid(
            "evaluation inputs",
            format!(
                "{} target utterances but {} synthesized mels",
                targets.len(),
                synthesized.len()
            ),
        ));
    }
    let mut by_id = std::collections::BTreeMap::new();
    for s in synthesized {
        by_id.insert(s.record.id.as_str(), s);
    }
    let mut mcds = std::collections::BTreeMap::new();
    let mut emotion_vecs = Vec::new();
    let mut timbre_vecs = Vec::new();
    let (mut emotions, mut speakers, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for t in targets {
        let s = by_id.get(t.id.as_str()).ok_or_else(|| {
            Error::invalid(
                "evaluation inputs",
                format!("no synthesized mel for {}", t.id),
            )
        })?;
        mcds.insert(t.id.clone(), mcd(&t.mel, &s.mel, DEFAULT_ORDER)?);
        emotion_vecs.push(s.record.emotion_global.clone());
        timbre_vecs.push(s.record.timbre.clone());
        emotions.push(t.emotion_id);
        speakers.push(t.speaker_id);
        ids.push(t.id.clone());
    }
    let emotion_probe = probe_uaa(&emotion_vecs, &emotions, opts.probe_seed)?;
    let speaker_probe = probe_uaa(&timbre_vecs, &speakers, opts.probe_seed)?;
    let leakage = probe_uaa(&emotion_vecs, &speakers, opts.probe_seed)?;
    let silhouette = cluster_silhouette(&emotion_vecs, &emotions)?;
    let mut plots = Vec::new();
    if let Some(dir) = &opts.plot_dir {
        let label = |prefix: &str, v: &[usize]| {
            v.iter().map(|l| format!("{prefix}{l}")).collect::<Vec<_>>()
        };
        for (name, x, labels) in [
            (
                "emotion_embeddings.svg",
                &emotion_vecs,
                label("emotion ", &emotions),
            ),
            (
                "timbre_embeddings.svg",
                &timbre_vecs,
                label("speaker ", &speakers),
            ),
        ] {
            let p = project_embeddings_2d(
                x,
                &labels,
                &ids,
                opts.projection,
                opts.projection_seed,
                &dir.join(name),
            )?;
            plots.push(p.plot.display().to_string());
        }
    }
    let mcd_mean = mcds.values().sum::<f64>() / mcds.len() as f64;
    Ok(EvalReport {
        mcd_mean,
        mcd_per_utterance: mcds,
        uaa: emotion_probe.uaa,
        per_class_recall: emotion_probe.per_class_recall,
        speaker_accuracy: speaker_probe.accuracy,
        speaker_leakage: leakage.accuracy,
        silhouette,
        plots,
    })
}

/// The three stage-2 conditions of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Proposed,
    WithoutPredictors,
    WithoutMine,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Proposed,
        Variant::WithoutPredictors,
        Variant::WithoutMine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::WithoutPredictors => "w/o predictors",
            Variant::WithoutMine => "w/o mine",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::WithoutPredictors => "no_predictors",
            Variant::WithoutMine => "no_mine",
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        c.stage = 2;
        match self {
            Variant::Proposed => {
                c.ablations.use_predictors = true;
                c.ablations.use_mine = true;
            }
            Variant::WithoutPredictors => {
                c.ablations.use_predictors = false;
                c.ablations.use_mine = true;
            }
            Variant::WithoutMine => {
                c.ablations.use_predictors = true;
                c.ablations.use_mine = false;
            }
        }
        c
    }
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mcd: f64,
    pub uaa: f64,
    pub speaker_accuracy: f64,
    pub speaker_leakage: f64,
    pub silhouette: f64,
    /// Mean MI estimate over the last tenth of stage 2.
    pub mi_tail: f64,
    pub val_recons_initial: f64,
    pub val_recons_final: f64,
}

pub struct VariantRun {
    pub variant: Variant,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub report: EvalReport,
    pub row: AblationRow,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

pub struct AblationOutcome {
    pub stage1: Checkpoint,
    pub stage1_metrics: Vec<StepMetrics>,
    pub runs: Vec<VariantRun>,
}

impl AblationOutcome {
    pub fn rows(&self) -> Vec<AblationRow> {
        self.runs.iter().map(|r| r.row.clone()).collect()
    }

    pub fn run(&self, v: Variant) -> &VariantRun {
        self.runs
            .iter()
            .find(|r| r.variant == v)
            .expect("every variant runs")
    }
}

/// Mean of the MI estimates logged over the last `ceil(n / 10)` steps.
pub fn mi_tail_mean(metrics: &[StepMetrics]) -> f64 {
    let values: Vec<f64> = metrics.iter().filter_map(|m| m.mi).collect();
    if values.is_empty() {
        return f64::NAN;
    }
    let k = values.len().div_ceil(10);
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

/// Settings of a full ablation run beyond the training configuration.
#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub eval: EvalOptions,
}

/// Generates the corpus, pretrains once, then trains and evaluates the
/// three stage-2 conditions from the same stage-1 weights and seed.
/// With `out`, every run writes its artifacts beneath it.
pub fn run_ablation(
    config: &TrainConfig,
    plan: &AblationPlan,
    out: Option<&Path>,
) -> Result<AblationOutcome> {
    config.validate()?;
    let corpus = generate_synthetic_corpus(&config.data.synthetic_spec())?;
    let mut c1 = config.clone();
    c1.stage = 1;
    c1.total_steps = plan.stage1_steps;
    let s1 = run_training(c1, &corpus, None, out.map(|d| d.join("stage1")).as_deref())?;
    let eval_items = select_split(&corpus, Split::Heldout, &config.data)?;
    let mut runs = Vec::new();
    for v in Variant::ALL {
        let mut c2 = v.apply(config);
        c2.total_steps = plan.stage2_steps;
        let dir = out.map(|d| d.join(v.dir_name()));
        let s2 = run_training(c2, &corpus, Some(&s1.checkpoint), dir.as_deref())?;
        let (store, model) = load_model(&s2.checkpoint)?;
        let synth = synthesize_items(
            &store,
            &model,
            &eval_items,
            &corpus,
            ReferenceRule::SameSpeakerEmotionDiffText,
            config.seed,
        )?;
        let mut opts = plan.eval.clone();
        if let Some(d) = &dir {
            write_synthesized(&d.join("synth"), &synth)?;
            opts.plot_dir = opts.plot_dir.as_ref().map(|_| d.join("plots"));
        } else {
            opts.plot_dir = None;
        }
        let report = evaluate(&eval_items, &synth, &opts)?;
        if let Some(d) = &dir {
            report.save(&d.join("report.json"))?;
        }
        let row = AblationRow {
            variant: v.name().to_string(),
            mcd: report.mcd_mean,
            uaa: report.uaa,
            speaker_accuracy: report.speaker_accuracy,
            speaker_leakage: report.speaker_leakage,
            silhouette: report.silhouette,
            mi_tail: mi_tail_mean(&s2.metrics),
            val_recons_initial: s2.initial_val_recons.unwrap_or(f64::NAN),
            val_recons_final: s2.final_val_recons.unwrap_or(f64::NAN),
        };
        runs.push(VariantRun {
            variant: v,
            checkpoint: s2.checkpoint,
            metrics: s2.metrics,
            report,
            row,
            encoder_hash_before: s2.encoder_hash_before,
            encoder_hash_after: s2.encoder_hash_after,
        });
    }
    let outcome = AblationOutcome {
        stage1: s1.checkpoint,
        stage1_metrics: s1.metrics,
        runs,
    };
    if let Some(d) = out {
        write_comparison(&d.join("comparison.csv"), &outcome.rows())?;
        std::fs::write(
            d.join("comparison.md"),
            comparison_markdown(&outcome.rows()),
        )
        .map_err(|e| Error::io(d.join("comparison.md"), e))?;
    }
    Ok(outcome)
}

pub fn write_comparison(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Markdown table with the MCD and UAA columns first.
pub fn comparison_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| variant | MCD (dB) | UAA | speaker acc (timbre) | speaker acc (emotion) | silhouette | MI tail |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.4} |\n",
            r.variant, r.mcd, r.uaa, r.speaker_accuracy, r.speaker_leakage, r.silhouette, r.mi_tail
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(mi: &[f64]) -> Vec<StepMetrics> {
        mi.iter()
            .enumerate()
            .map(|(i, &m)| StepMetrics {
                step: i as u64 + 1,
                stage: 2,
                total: 0.0,
                recons: 0.0,
                duration: 0.0,
                pitch: 0.0,
                energy: 0.0,
                emotion: 0.0,
                speaker: 0.0,
                mi: Some(m),
                mi_term: 0.0,
                lr: 0.0,
                val_recons: None,
            })
            .collect()
    }

    #[test]
    fn tail_mean_uses_last_tenth() {
        let v: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(mi_tail_mean(&metrics(&v)), 18.5);
        assert_eq!(mi_tail_mean(&metrics(&[3.0])), 3.0);
        assert!(mi_tail_mean(&[]).is_nan());
    }

    #[test]
    fn variants_toggle_exactly_one_term() {
        let base = TrainConfig::desk();
        let p = Variant::Proposed.apply(&base).ablations;
        assert!(p.use_predictors && p.use_mine);
        let a = Variant::WithoutPredictors.apply(&base).ablations;
        assert!(!a.use_predictors && a.use_mine);
        let b = Variant::WithoutMine.apply(&base).ablations;
        assert!(b.use_predictors && !b.use_mine);
    }

    #[test]
    fn evaluation_rejects_count_mismatch() {
        let err = evaluate(
            &[],
            &[Synthesized {
                record: SynthRecord {
                    id: "x".into(),
                    reference_id: "y".into(),
                    speaker: 0,
                    emotion: 0,
                    mel_path: "mels/x.mel".into(),
                    emotion_global: vec![],
                    timbre: vec![],
                },
                mel: MelSpectrogram::new(crate::tensor::Tensor::zeros(1, 2)),
            }],
            &EvalOptions::default(),
        )
        .unwrap_err();
        assert!(
            err.to_string()
                .contains("0 target utterances but 1 synthesized"),
            "{err}"
        );
    }
}
