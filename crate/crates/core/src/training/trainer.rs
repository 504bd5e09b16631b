//! The training loop: batching, alternating updates, metrics and
//! checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{group_params, Checkpoint, CheckpointDims, EstimatorState, FORMAT_VERSION};
use super::config::TrainConfig;
use super::losses::{compute_stage1_loss, compute_stage2_loss, EffectiveWeights, LossComponents};
use super::model::{stage2_item, LabelCounts, TtsModel};
use crate::autograd::Graph;
use crate::backbone::{ensure_neutral, stage1_item, LossNorm, VarianceRanges};
use crate::datasets::{
    collate_batch, split_corpus, Batch, PhonemeItem, ReferenceRule, NEUTRAL_EMOTION,
};
use crate::error::{Error, Result};
use crate::mine::{dv_bound, marginal_permutation, MiEstimator};
use crate::optim::{Adam, NoamSchedule};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Parameter groups produced by stage 1 and reused by stage 2.
pub const BACKBONE_GROUPS: [&str; 3] = ["encoder", "variance_adaptor", "decoder"];
/// Group frozen during stage 2.
pub const FROZEN_GROUP: &str = "encoder";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: u8,
    pub total: f64,
    pub recons: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub emotion: f64,
    pub speaker: f64,
    /// MI estimate on this batch; absent in stage 1.
    pub mi: Option<f64>,
    /// Weighted and gated MI penalty that entered `total`.
    pub mi_term: f64,
    pub lr: f64,
    /// Validation reconstruction loss after this step's update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_recons: Option<f64>,
}

/// Builds the model and its store from `config`. Only the parameter shapes
/// and the seeded initial values depend on the arguments.
pub fn build_model(
    config: &TrainConfig,
    ranges: VarianceRanges,
    seed: u64,
) -> Result<(ParamStore, TtsModel)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TtsModel::new(
        &mut store,
        config.backbone_dims(),
        config.style_dims(),
        ranges,
        config.model.classifier_hidden,
        labels(config),
        &mut rng,
    )?;
    Ok((store, model))
}

fn labels(config: &TrainConfig) -> LabelCounts {
    LabelCounts {
        speakers: config.data.n_speakers,
        emotions: config.data.n_emotions,
    }
}

/// Rebuilds a trained model from a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(ParamStore, TtsModel)> {
    let (mut store, model) = build_model(&ckpt.config, ckpt.ranges, ckpt.config.seed)?;
    let groups: Vec<&str> = ckpt.groups.keys().map(String::as_str).collect();
    ckpt.load_groups(&mut store, &groups)?;
    Ok((store, model))
}

fn mix(a: u64, b: u64) -> u64 {
    a.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub model: TtsModel,
    pub optimizer: Adam,
    pub schedule: NoamSchedule,
    /// Adversarial critic; stage 2 only.
    pub estimator: Option<MiEstimator>,
    /// Measurement-only critic trained when the MI term is ablated.
    pub monitor: Option<MiEstimator>,
    pub ranges: VarianceRanges,
    /// Completed optimisation steps.
    pub step: u64,
    pub train: Vec<PhonemeItem>,
    pub val: Vec<PhonemeItem>,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Stage 1 starts fresh or resumes a stage-1 checkpoint. Stage 2 needs
    /// a checkpoint: a stage-1 one initialises the backbone, a stage-2 one
    /// is resumed.
    pub fn new(
        config: TrainConfig,
        corpus: &[PhonemeItem],
        init: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        let d = &config.data;
        if let Some(bad) = corpus
            .iter()
            .find(|i| i.speaker_id >= d.n_speakers || i.emotion_id >= d.n_emotions)
        {
            return Err(Error::invalid(
                format!("utterance {}", bad.id),
                format!(
                    "speaker {} / emotion {} outside the configured {} speakers and {} emotions",
                    bad.speaker_id, bad.emotion_id, d.n_speakers, d.n_emotions
                ),
            ));
        }
        if let Some(bad) = corpus.iter().find(|i| i.mel.n_mels() != d.n_mels) {
            return Err(Error::invalid(
                format!("utterance {}", bad.id),
                format!(
                    "has {} mel bins, config expects {}",
                    bad.mel.n_mels(),
                    d.n_mels
                ),
            ));
        }
        let split = split_corpus(corpus, d.val_fraction, d.test_fraction, d.seed)?;
        let (mut train, mut val) = (split.train, split.val);
        if config.stage == 1 {
            train.retain(|i| i.emotion_id == NEUTRAL_EMOTION);
            val.retain(|i| i.emotion_id == NEUTRAL_EMOTION);
        }
        let need = if config.stage == 2 { 2 } else { 1 };
        if train.len() < need {
            return Err(Error::invalid(
                "training split",
                format!(
                    "{} usable utterances for stage {}",
                    train.len(),
                    config.stage
                ),
            ));
        }

        let resume = match (config.stage, init) {
            (2, None) => {
                return Err(Error::Config(
                    "stage 2 requires a stage-1 checkpoint".into(),
                ));
            }
            (1, Some(c)) if c.stage != 1 => {
                return Err(Error::Config(format!(
                    "stage 1 cannot start from a stage-{} checkpoint",
                    c.stage
                )));
            }
            (_, Some(c)) => c.stage == config.stage,
            (_, None) => false,
        };
        if let Some(c) = init {
            if c.dims.backbone != config.backbone_dims() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint backbone dimensions {:?} differ from the configured {:?}",
                    c.dims.backbone,
                    config.backbone_dims()
                )));
            }
            if resume && c.config_hash != config.hash() {
                warn!("resuming from a checkpoint written under a different configuration");
            }
        }
        let ranges = match init {
            Some(c) => c.ranges,
            None => VarianceRanges::from_corpus(&train),
        };

        let (mut store, model) = build_model(&config, ranges, config.seed)?;
        let adam = config.optimizer.adam();
        let mut optimizer = Adam::new(adam);
        let mut step = 0;
        if let Some(c) = init {
            if resume {
                let groups: Vec<&str> = c.groups.keys().map(String::as_str).collect();
                c.load_groups(&mut store, &groups)?;
                optimizer = Adam::from_state(adam, &c.optimizer, &store)?;
                step = c.step;
            } else {
                c.load_groups(&mut store, &BACKBONE_GROUPS)?;
            }
        }
        let mut estimator = None;
        let mut monitor = None;
        if config.stage == 2 {
            store.set_frozen_prefix(FROZEN_GROUP, true);
            let m = &config.model;
            let fresh = |salt| {
                MiEstimator::new(
                    m.d_model,
                    m.d_model,
                    m.mine_hidden,
                    config.optimizer.mine_lr,
                    mix(config.seed, salt),
                )
            };
            let mut est = fresh(1);
            let mut mon = (!config.ablations.use_mine).then(|| fresh(2));
            if resume {
                let c = init.expect("resume implies a checkpoint");
                if let Some(s) = &c.mi_estimator {
                    s.restore(&mut est)?;
                }
                if let (Some(s), Some(mon)) = (&c.monitor, mon.as_mut()) {
                    s.restore(mon)?;
                }
            }
            estimator = Some(est);
            monitor = mon;
        }
        let schedule = NoamSchedule {
            d_model: config.model.d_model,
            warmup: config.optimizer.warmup_steps,
            scale: config.optimizer.lr_scale,
        };
        Ok(Trainer {
            config,
            store,
            model,
            optimizer,
            schedule,
            estimator,
            monitor,
            ranges,
            step,
            train,
            val,
            order: None,
        })
    }

    pub fn effective_batch_size(&self) -> usize {
        self.config.batch_size.min(self.train.len())
    }

    /// Batch for the (1-based) step `step`: epochs are seeded shuffles of
    /// the training split, remainders dropped.
    pub fn batch_for_step(&mut self, step: u64) -> Result<Batch> {
        let b = self.effective_batch_size();
        let per_epoch = (self.train.len() / b) as u64;
        let k = step.saturating_sub(1);
        let epoch = k / per_epoch;
        let pos = (k % per_epoch) as usize;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.train.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch)));
            self.order = Some((epoch, idx));
        }
        let order = &self.order.as_ref().expect("order set").1;
        let items: Vec<PhonemeItem> = order[pos * b..(pos + 1) * b]
            .iter()
            .map(|&i| self.train[i].clone())
            .collect();
        collate_batch(&items, ReferenceRule::SameUtterance, 0)
    }

    /// Runs the next step on its scheduled batch.
    pub fn next_step(&mut self) -> Result<StepMetrics> {
        let batch = self.batch_for_step(self.step + 1)?;
        self.train_step(&batch)
    }

    /// One optimisation step on `batch`. In stage 2 this first runs the
    /// critic ascent steps on the detached embeddings, then one TTS step
    /// through the updated, now fixed, critic.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let step = self.step + 1;
        let (grads, mut metrics) = match self.config.stage {
            1 => self.stage1_grads(batch, step)?,
            _ => self.stage2_grads(batch, step)?,
        };
        if !metrics.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let lr = self.schedule.lr(step);
        self.optimizer
            .step(&mut self.store, &grads, lr)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        self.step = step;
        metrics.lr = lr;
        Ok(metrics)
    }

    fn stage1_grads(
        &self,
        batch: &Batch,
        step: u64,
    ) -> Result<(BTreeMap<ParamId, Tensor>, StepMetrics)> {
        ensure_neutral(batch)?;
        let norm = LossNorm::of(batch);
        let lambda = self.config.lambdas.duration;
        let mut grads = BTreeMap::new();
        let (mut recons, mut duration) = (0.0, 0.0);
        for i in 0..batch.len() {
            let mut g = item_graph(&self.store, &self.config, step, i);
            let out = stage1_item(&mut g, &self.model.backbone, &batch.item(i), &norm)?;
            recons += g.value(out.recons).data()[0];
            duration += g.value(out.duration).data()[0];
            let mut seeds = vec![(out.recons, Tensor::scalar(1.0))];
            if lambda > 0.0 {
                seeds.push((out.duration, Tensor::scalar(lambda)));
            }
            accumulate(&mut grads, g.backward(&seeds).into_params());
        }
        let loss = compute_stage1_loss(recons, duration, lambda);
        Ok((
            grads,
            StepMetrics {
                step,
                stage: 1,
                total: loss.total,
                recons,
                duration,
                pitch: 0.0,
                energy: 0.0,
                emotion: 0.0,
                speaker: 0.0,
                mi: None,
                mi_term: 0.0,
                lr: 0.0,
                val_recons: None,
            },
        ))
    }

    fn stage2_grads(
        &mut self,
        batch: &Batch,
        step: u64,
    ) -> Result<(BTreeMap<ParamId, Tensor>, StepMetrics)> {
        let cfg = &self.config;
        let w = EffectiveWeights::new(&cfg.lambdas, &cfg.ablations);
        let use_predictors = cfg.ablations.use_predictors;
        let use_mine = cfg.ablations.use_mine;
        let norm = LossNorm::of(batch);
        let b = batch.len();
        if b < 2 {
            return Err(Error::invalid(
                "batch size",
                "stage 2 needs at least two items per batch",
            ));
        }
        let critic_seed = mix(mix(cfg.seed, step), 0xC0FFEE);
        let mine_steps = cfg.mine_steps_per_tts_step;

        let mut graphs = Vec::with_capacity(b);
        let mut comps = LossComponents::default();
        for i in 0..b {
            let mut g = item_graph(&self.store, &self.config, step, i);
            let out = stage2_item(&mut g, &self.model, &batch.item(i), &norm, use_predictors)?;
            let v = |x| g.value(x).data()[0];
            comps.add(&LossComponents {
                recons: v(out.recons),
                duration: v(out.duration),
                pitch: v(out.pitch),
                energy: v(out.energy),
                emotion: out.emotion.map_or(0.0, v),
                speaker: out.speaker.map_or(0.0, v),
            });
            graphs.push((g, out));
        }
        let ys: Vec<&Tensor> = graphs
            .iter()
            .map(|(g, o)| g.value(o.bundle.emotion_global))
            .collect();
        let zs: Vec<&Tensor> = graphs
            .iter()
            .map(|(g, o)| g.value(o.bundle.timbre))
            .collect();
        let (y, z) = (Tensor::vstack(&ys), Tensor::vstack(&zs));

        let critic = if use_mine {
            self.estimator.as_mut()
        } else {
            self.monitor.as_mut()
        }
        .expect("stage 2 owns its critics");
        for k in 0..mine_steps {
            critic.update(&y, &z, mix(critic_seed, k as u64))?;
        }
        let perm = marginal_permutation(b, critic_seed)?;
        let mut bg = Graph::new(&critic.store).with_constant_params();
        let (yv, zv) = (bg.input(y), bg.input(z));
        let terms = dv_bound(&critic.net, &mut bg, yv, zv, &perm);
        let mi = bg.value(terms.value).data()[0];
        if !mi.is_finite() {
            return Err(Error::NonFinite(format!("MI estimate at step {step}")));
        }
        let mi_grads = if use_mine && mi > 0.0 && w.mi > 0.0 {
            let gr = bg.backward(&[(terms.value, Tensor::scalar(1.0))]);
            let dy = gr
                .wrt(yv)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(b, cfg.model.d_model));
            let dz = gr
                .wrt(zv)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(b, cfg.model.d_model));
            Some((dy.scale(w.mi), dz.scale(w.mi)))
        } else {
            None
        };

        let mut grads = BTreeMap::new();
        for (i, (g, out)) in graphs.iter().enumerate() {
            let mut seeds = vec![(out.recons, Tensor::scalar(1.0))];
            for (v, wt) in [
                (out.duration, w.duration),
                (out.pitch, w.pitch),
                (out.energy, w.energy),
            ] {
                if wt > 0.0 {
                    seeds.push((v, Tensor::scalar(wt)));
                }
            }
            for (v, wt) in [(out.emotion, w.emotion), (out.speaker, w.speaker)] {
                if let (Some(v), true) = (v, wt > 0.0) {
                    seeds.push((v, Tensor::scalar(wt)));
                }
            }
            if let Some((dy, dz)) = &mi_grads {
                seeds.push((
                    out.bundle.emotion_global,
                    Tensor::row_vector(dy.row(i).to_vec()),
                ));
                seeds.push((out.bundle.timbre, Tensor::row_vector(dz.row(i).to_vec())));
            }
            accumulate(&mut grads, g.backward(&seeds).into_params());
        }
        drop(graphs);

        let loss = compute_stage2_loss(&comps, mi, &cfg.lambdas, &cfg.ablations);
        Ok((
            grads,
            StepMetrics {
                step,
                stage: 2,
                total: loss.total,
                recons: comps.recons,
                duration: comps.duration,
                pitch: comps.pitch,
                energy: comps.energy,
                emotion: comps.emotion,
                speaker: comps.speaker,
                mi: Some(mi),
                mi_term: loss.mi_term,
                lr: 0.0,
                val_recons: None,
            },
        ))
    }

    /// Teacher-forced reconstruction loss over the validation split, as a
    /// mean absolute error per mel entry.
    pub fn validation_recons(&self) -> Result<f64> {
        if self.val.is_empty() {
            return Err(Error::invalid("validation split", "is empty"));
        }
        let batch = collate_batch(&self.val, ReferenceRule::SameUtterance, 0)?;
        let norm = LossNorm::of(&batch);
        let mut total = 0.0;
        for i in 0..batch.len() {
            let mut g = Graph::new(&self.store).with_constant_params();
            let item = batch.item(i);
            let recons = if self.config.stage == 1 {
                stage1_item(&mut g, &self.model.backbone, &item, &norm)?.recons
            } else {
                stage2_item(&mut g, &self.model, &item, &norm, false)?.recons
            };
            total += g.value(recons).data()[0];
        }
        Ok(total)
    }

    pub fn encoder_hash(&self) -> String {
        self.store.group_hash(FROZEN_GROUP)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = group_params(&self.store);
        if self.config.stage == 1 {
            groups.retain(|k, _| BACKBONE_GROUPS.contains(&k.as_str()));
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            stage: self.config.stage,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            step: self.step,
            dims: CheckpointDims {
                backbone: self.config.backbone_dims(),
                style: (self.config.stage == 2).then(|| self.config.style_dims()),
                n_speakers: self.config.data.n_speakers,
                n_emotions: self.config.data.n_emotions,
            },
            ranges: self.ranges,
            groups,
            optimizer: self.optimizer.state(&self.store),
            mi_estimator: self.estimator.as_ref().map(EstimatorState::of),
            monitor: self.monitor.as_ref().map(EstimatorState::of),
        }
    }
}

fn item_graph<'s>(
    store: &'s ParamStore,
    config: &TrainConfig,
    step: u64,
    item: usize,
) -> Graph<'s> {
    let g = Graph::new(store);
    if config.model.dropout > 0.0 {
        g.with_dropout(mix(mix(config.seed, step), item as u64 + 1))
    } else {
        g
    }
}

fn accumulate(into: &mut BTreeMap<ParamId, Tensor>, from: BTreeMap<ParamId, Tensor>) {
    for (id, g) in from {
        match into.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                into.insert(id, g);
            }
        }
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn intermediate(&self, step: u64) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("step{step:06}.json"))
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    /// Validation reconstruction before the first step of this run.
    pub initial_val_recons: Option<f64>,
    pub final_val_recons: Option<f64>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Trains until `config.total_steps`, resuming from `init` when it is a
/// checkpoint of the same stage. With `out`, metrics go to
/// `metrics.jsonl` (appended when resuming) and checkpoints beside it.
pub fn run_training(
    config: TrainConfig,
    corpus: &[PhonemeItem],
    init: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let resuming = init.is_some_and(|c| c.stage == config.stage);
    let mut trainer = Trainer::new(config, corpus, init)?;
    let paths = out.map(|d| RunPaths {
        dir: d.to_path_buf(),
    });
    let mut log_file = match &paths {
        Some(p) => {
            std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(resuming)
                .truncate(!resuming)
                .open(p.metrics())
                .map_err(|e| Error::io(p.metrics(), e))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let has_val = !trainer.val.is_empty();
    let eval_every = trainer.config.eval_every as u64;
    let ckpt_every = trainer.config.checkpoint_every as u64;
    let total = trainer.config.total_steps as u64;
    let initial_val_recons = if has_val {
        Some(trainer.validation_recons()?)
    } else {
        None
    };
    let encoder_hash_before = trainer.encoder_hash();
    let mut final_val_recons = initial_val_recons;
    let mut metrics = Vec::new();
    while trainer.step < total {
        let mut m = trainer.next_step()?;
        let s = m.step;
        if has_val && ((eval_every > 0 && s % eval_every == 0) || s == total) {
            let v = trainer.validation_recons()?;
            m.val_recons = Some(v);
            final_val_recons = Some(v);
            info!(
                "stage {} step {s}: total {:.4} recons {:.4} val {:.4} mi {:?}",
                m.stage, m.total, m.recons, v, m.mi
            );
        }
        if let (Some(w), Some(p)) = (log_file.as_mut(), &paths) {
            let line = serde_json::to_string(&m).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(p.metrics(), e))?;
        }
        if let (true, Some(p)) = (ckpt_every > 0 && s % ckpt_every == 0 && s < total, &paths) {
            trainer.checkpoint().save(&p.intermediate(s))?;
        }
        metrics.push(m);
    }
    if let (Some(w), Some(p)) = (log_file.as_mut(), &paths) {
        w.flush().map_err(|e| Error::io(p.metrics(), e))?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(p) = &paths {
        checkpoint.save(&p.checkpoint())?;
    }
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        initial_val_recons,
        final_val_recons,
        encoder_hash_before,
        encoder_hash_after: trainer.encoder_hash(),
    })
}
