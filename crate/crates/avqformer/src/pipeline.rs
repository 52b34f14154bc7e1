//! LM fixture construction, stage-1 caption pre-training, stage-2
//! instruction fine-tuning, feature preprocessing and gradient checks.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use avqf_core::encoders::FrameTensor;
use avqf_core::gradcheck::{grad_check_params, Coverage, GradCheckReport};
use avqf_core::lm::{decode_text, PromptText, TokenSequence, BOS};
use avqf_core::model::{Example, Media, Model, ModelConfig};
use avqf_core::optim::{cosine_lr, AdamW, AdamWConfig};
use avqf_core::params::ParamStore;
use avqf_core::qformer::Modality;
use avqf_core::synth::{chat_turn, lm_corpus, scenes, SceneKind, SyntheticScene};
use avqf_core::train::{activate_branch, pretrain_lm, training_step, LmPretrainConfig, StepStats};
use avqf_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::CheckpointBundle;
use crate::dataset::{load_media_file, resolve};
use crate::manifest::{load_manifest, ManifestRecord, MediaModality, RecordBody};
use crate::{sig6, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Vision,
    Audio,
}

impl BranchKind {
    pub fn modality(self) -> Modality {
        match self {
            BranchKind::Vision => Modality::Video,
            BranchKind::Audio => Modality::Audio,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::Vision => "vision",
            BranchKind::Audio => "audio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub branch: BranchKind,
    pub stage: Stage,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Log every this many steps (the first and last step always log).
    pub log_every: usize,
    /// Checkpoint the stage starts from: the LM fixture for stage 1, a
    /// stage-1 checkpoint for stage 2. Paths are left out of the
    /// serialized form so checkpoints do not depend on where they ran.
    #[serde(skip)]
    pub base: Option<PathBuf>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Precomputed media features keyed by record id.
    #[serde(skip)]
    pub embeddings: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            branch: BranchKind::Vision,
            stage: Stage::Pretrain,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.0,
            clip_norm: 1.0,
            steps: 1000,
            batch_size: 8,
            seed: 0,
            log_every: 50,
            base: None,
            out: None,
            embeddings: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.optim().validate()?;
        Ok(())
    }

    pub fn optim(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            clip_norm: Some(self.clip_norm),
        }
    }

    /// SHA-256 over the training and model configuration, hex encoded.
    pub fn hash(&self, model: &ModelConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(serde_json::to_vec(model).expect("config serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Wraps a still image as a clip of exactly one frame.
pub fn image_as_video(img: FrameTensor) -> Result<Vec<FrameTensor>> {
    img.validate_range()?;
    Ok(vec![FrameTensor { frame_index: 0, ..img }])
}

/// Rebuilds the model a checkpoint was saved from and loads its values.
pub fn load_model(bundle: &CheckpointBundle) -> Result<(Model, ParamStore<f32>)> {
    let cfg: ModelConfig = serde_json::from_str(
        bundle.meta("model_config").ok_or_else(|| Error::Schema("checkpoint lacks model_config metadata".into()))?,
    )
    .map_err(|e| Error::Schema(format!("model_config: {e}")))?;
    let seed: u64 = bundle
        .meta("model_seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Schema("checkpoint lacks model_seed metadata".into()))?;
    let (model, mut store) = Model::new::<f32>(cfg, seed)?;
    bundle.apply_to(&mut store)?;
    store.set_trainable(|_| false);
    Ok((model, store))
}

fn snapshot(model: &Model, store: &ParamStore<f32>, seed: u64) -> CheckpointBundle {
    let mut b = CheckpointBundle::from_store(store);
    b.set_meta("model_config", serde_json::to_string(&model.cfg).expect("config serializes"));
    b.set_meta("model_seed", seed);
    b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub lm_steps: usize,
    pub lm_batch_size: usize,
    pub lm_lr: f64,
}

impl FixtureConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self { model, seed, lm_steps: 400, lm_batch_size: 16, lm_lr: 3e-3 }
    }
}

/// Seeds every component, pre-trains the LM on the synthetic text corpus
/// and freezes everything. Branch parameters keep their seeded init.
pub fn build_fixture(cfg: &FixtureConfig, log: &mut dyn Write) -> Result<CheckpointBundle> {
    let (model, mut store) = Model::new::<f32>(cfg.model, cfg.seed)?;
    let lm_cfg = LmPretrainConfig {
        steps: cfg.lm_steps,
        batch_size: cfg.lm_batch_size,
        optim: AdamWConfig { lr: cfg.lm_lr, ..AdamWConfig::default() },
        seed: cfg.seed,
    };
    if cfg.lm_steps > 0 {
        let every = (cfg.lm_steps / 10).max(1);
        pretrain_lm(&model.lm, &mut store, &lm_corpus(), &lm_cfg, |s| {
            if s.step == 1 || s.step % every == 0 || s.step == cfg.lm_steps {
                let _ = writeln!(log, "lm step={} loss={} lr={}", s.step, sig6(s.loss), sig6(s.lr));
            }
        })?;
    }
    store.set_trainable(|_| false);
    let mut b = snapshot(&model, &store, cfg.seed);
    b.set_meta("stage", "fixture");
    b.set_meta("step", cfg.lm_steps);
    Ok(b)
}

/// Frozen-encoder features for one media item, as the branch inputs see
/// them. Encoders never change, so these can be computed once.
pub fn encode_media(model: &Model, store: &ParamStore<f32>, media: Media) -> Result<Media> {
    Ok(match media {
        Media::Frames(f) => Media::VideoFeatures(model.encode_video(store, &f)?.v),
        Media::Clips(c) => Media::AudioFeatures(model.encode_audio(store, &c)?.a),
        features => features,
    })
}

/// Record id → feature tensor, from a preprocessed-features checkpoint.
pub fn load_embeddings(path: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    let b = CheckpointBundle::load(path)?;
    b.entries.iter().map(|e| Ok((e.name.clone(), e.to_tensor()?))).collect()
}

fn features_for(
    model: &Model,
    store: &ParamStore<f32>,
    rec: &ManifestRecord,
    root: &Path,
    embeddings: Option<&HashMap<String, Tensor<f32>>>,
    cache: &mut HashMap<PathBuf, Media>,
) -> Result<Media> {
    if let Some(t) = embeddings.and_then(|m| m.get(&rec.id)) {
        return Ok(if rec.modality.is_visual() { Media::VideoFeatures(t.clone()) } else { Media::AudioFeatures(t.clone()) });
    }
    let path = resolve(root, &rec.media_path);
    if let Some(m) = cache.get(&path) {
        return Ok(m.clone());
    }
    let media = encode_media(model, store, load_media_file(&path, rec.modality, &model.cfg)?)?;
    cache.insert(path, media.clone());
    Ok(media)
}

/// Turns manifest records into training examples for `stage`, with media
/// already passed through the frozen encoders.
pub fn prepare_examples(
    model: &Model,
    store: &ParamStore<f32>,
    records: &[ManifestRecord],
    root: &Path,
    stage: Stage,
    branch: BranchKind,
    embeddings: Option<&HashMap<String, Tensor<f32>>>,
) -> Result<Vec<(MediaModality, Example)>> {
    let mut cache = HashMap::new();
    records
        .iter()
        .map(|rec| {
            if branch == BranchKind::Vision && !rec.modality.is_visual() {
                return Err(Error::Dataset(format!("record `{}`: the vision branch cannot train on audio", rec.id)));
            }
            let text = match (&rec.body, stage) {
                (RecordBody::Caption { caption }, Stage::Pretrain) => PromptText::after_media(TokenSequence::caption(caption)),
                (RecordBody::Instruction { instruction, response }, Stage::Finetune) => {
                    let (prefix, suffix) = chat_turn(instruction, Some(response));
                    PromptText { prefix, suffix }
                }
                _ => {
                    return Err(Error::Schema(format!(
                        "record `{}` is of kind {}, but stage {} needs {} records",
                        rec.id,
                        rec.kind(),
                        stage.as_str(),
                        if stage == Stage::Pretrain { "caption" } else { "instruction" }
                    )))
                }
            };
            let media = features_for(model, store, rec, root, embeddings, &mut cache)?;
            Ok((rec.modality, Example { media, text }))
        })
        .collect()
}

/// The deterministic stream of batches for `(seed, epoch = 0, 1, …)`.
pub fn batch_schedule(keys: &[MediaModality], batch_size: usize, seed: u64, steps: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0;
    while out.len() < steps {
        let batches = avqf_core::batch::batch_iter(keys, batch_size, seed, epoch)?;
        out.extend(batches.into_iter().take(steps - out.len()));
        epoch += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub bundle: CheckpointBundle,
    pub history: Vec<StepStats>,
}

impl StageOutcome {
    /// Mean loss over the first and last `window` steps.
    pub fn running_loss(&self, window: usize) -> (f64, f64) {
        let n = self.history.len();
        let w = window.clamp(1, n.max(1));
        let mean = |s: &[StepStats]| s.iter().map(|x| x.loss).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.history[..w.min(n)]), mean(&self.history[n.saturating_sub(w)..]))
    }
}

/// Runs one stage over in-memory records. `base` supplies every parameter;
/// only the selected branch trains.
pub fn train_stage(
    cfg: &TrainConfig,
    records: &[ManifestRecord],
    root: &Path,
    base: &CheckpointBundle,
    log: &mut dyn Write,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Dataset("manifest has no records".into()));
    }
    let (model, mut store) = load_model(base)?;
    let model_seed = base.meta("model_seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let embeddings = cfg.embeddings.as_deref().map(load_embeddings).transpose()?;
    let examples = prepare_examples(&model, &store, records, root, cfg.stage, cfg.branch, embeddings.as_ref())?;
    let keys: Vec<MediaModality> = examples.iter().map(|(k, _)| *k).collect();
    let schedule = batch_schedule(&keys, cfg.batch_size, cfg.seed, cfg.steps)?;

    let m = cfg.branch.modality();
    activate_branch(&mut store, m);
    let mut opt = AdamW::new(cfg.optim(), &store)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for (step, idx) in schedule.iter().enumerate() {
        let batch: Vec<Example> = idx.iter().map(|&i| examples[i].1.clone()).collect();
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let stats = training_step(&model, &mut store, &mut opt, m, &batch, lr)?;
        if stats.step == 1 || stats.step % cfg.log_every.max(1) == 0 || stats.step == cfg.steps {
            writeln!(log, "step={} loss={} lr={}", stats.step, sig6(stats.loss), sig6(stats.lr))
                .map_err(|e| Error::io("<log>", e))?;
        }
        history.push(stats);
    }
    store.zero_grads();
    store.set_trainable(|_| false);
    let mut bundle = snapshot(&model, &store, model_seed);
    bundle.set_meta("stage", cfg.stage.as_str());
    bundle.set_meta("branch", cfg.branch.as_str());
    bundle.set_meta("step", cfg.steps);
    bundle.set_meta("config_hash", cfg.hash(&model.cfg));
    bundle.set_meta("train_config", serde_json::to_string(cfg).expect("config serializes"));
    for (k, v) in &base.metadata {
        if let Some(branch_key) = k.strip_prefix("trained.") {
            bundle.set_meta(&format!("trained.{branch_key}"), v);
        }
    }
    bundle.set_meta(&format!("trained.{}", cfg.branch.as_str()), cfg.stage.as_str());
    if let Some(out) = &cfg.out {
        bundle.save(out)?;
    }
    Ok(StageOutcome { bundle, history })
}

fn stage_from_paths(cfg: &TrainConfig, manifest: &Path, stage: Stage, log: &mut dyn Write) -> Result<StageOutcome> {
    let cfg = TrainConfig { stage, ..cfg.clone() };
    let base_path = cfg.base.as_ref().ok_or_else(|| Error::Config("no base checkpoint given".into()))?;
    let base = CheckpointBundle::load(base_path)?;
    let records = load_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    train_stage(&cfg, &records, root, &base, log)
}

/// Stage 1: caption pre-training of one branch, starting from the LM
/// fixture at `cfg.base`. The audio branch accepts visual caption data,
/// reaching the audio-side Q-Former through the frozen visual adapter.
pub fn pretrain_stage(cfg: &TrainConfig, manifest: &Path, log: &mut dyn Write) -> Result<StageOutcome> {
    stage_from_paths(cfg, manifest, Stage::Pretrain, log)
}

/// Stage 2: instruction fine-tuning from the stage-1 checkpoint at
/// `cfg.base`, loss on response tokens only.
pub fn finetune_stage(cfg: &TrainConfig, manifest: &Path, log: &mut dyn Write) -> Result<StageOutcome> {
    stage_from_paths(cfg, manifest, Stage::Finetune, log)
}

/// Encoder features for every record, keyed by record id, in the format
/// [`load_embeddings`] reads back.
pub fn preprocess(model: &Model, store: &ParamStore<f32>, records: &[ManifestRecord], root: &Path) -> Result<CheckpointBundle> {
    let mut b = CheckpointBundle::default();
    let mut cache = HashMap::new();
    for rec in records {
        if b.entry(&rec.id).is_some() {
            continue;
        }
        let t = match features_for(model, store, rec, root, None, &mut cache)? {
            Media::VideoFeatures(t) | Media::AudioFeatures(t) => t,
            _ => unreachable!("features_for always encodes"),
        };
        b.entries.push(crate::checkpoint::Entry { name: rec.id.clone(), shape: t.shape().to_vec(), frozen: true, data: t.into_data() });
    }
    b.set_meta("kind", "features");
    Ok(b)
}

/// Branch that consumes media of a manifest modality.
pub fn branch_for(modality: MediaModality) -> Modality {
    if modality.is_visual() {
        Modality::Video
    } else {
        Modality::Audio
    }
}

/// Stage-1 style caption: soft prompt(s), then `BOS`, decoded greedily.
pub fn describe(model: &Model, store: &ParamStore<f32>, media: &[(Modality, &Media)], max_len: usize) -> Result<String> {
    let out = model.generate(store, media, &[], &[BOS], max_len)?;
    Ok(decode_text(&out.ids))
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub branch: BranchKind,
    pub report: GradCheckReport,
}

/// Finite-difference check of the whole trainable path (frozen encoders →
/// branch → soft prompt → LM → caption loss) in f64, for each branch.
pub fn gradcheck(cfg: ModelConfig, seed: u64, h: f64, per_tensor: usize) -> Result<Vec<GradCheckOutcome>> {
    let (model, mut store) = Model::new::<f64>(cfg, seed)?;
    let video = match scenes(seed, 1, SceneKind::Video)[0] {
        SyntheticScene::Visual(v) => v,
        SyntheticScene::Tone(_) => unreachable!(),
    };
    let tone = match scenes(seed, 1, SceneKind::Audio)[0] {
        SyntheticScene::Tone(t) => t,
        SyntheticScene::Visual(_) => unreachable!(),
    };
    let frames = video.render(cfg.video_frames, cfg.image.frame_size)?;
    let clips = avqf_core::audio::waveform_to_clips(&tone.render(4.0, cfg.mel.sample_rate)?, cfg.audio_segments, &cfg.mel)?;
    let cases = [
        (BranchKind::Vision, Example { media: Media::Frames(frames), text: PromptText::after_media(TokenSequence::caption(&video.caption())) }),
        (BranchKind::Audio, Example { media: Media::Clips(clips), text: PromptText::after_media(TokenSequence::caption(&tone.caption())) }),
    ];
    cases
        .into_iter()
        .map(|(branch, ex)| {
            let m = branch.modality();
            activate_branch(&mut store, m);
            let report = grad_check_params(
                &store,
                |tape, s| model.example_loss(tape, s, m, &ex),
                h,
                Coverage::Sampled { per_tensor, seed },
            )?;
            Ok(GradCheckOutcome { branch, report })
        })
        .collect()
}

/// Serialized bytes of every entry whose name starts with one of `prefixes`.
pub fn entry_bytes(bundle: &CheckpointBundle, prefixes: &[&str]) -> Vec<(String, Vec<u8>)> {
    bundle
        .entries
        .iter()
        .filter(|e| prefixes.iter().any(|p| e.name.starts_with(p)))
        .map(|e| (e.name.clone(), e.to_bytes()))
        .collect()
}

/// Names of the frozen components' parameter prefixes.
pub const FROZEN_PREFIXES: [&str; 4] = ["image_encoder.", "audio_encoder.", "visual_audio_adapter.", "lm."];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_pixels_are_validated() {
        let bad = FrameTensor::new(vec![1.5; 12], 2, 2, 3, 0).unwrap();
        assert!(matches!(image_as_video(bad), Err(Error::Core(avqf_core::Error::Validation(_)))));
        let ok = FrameTensor::new(vec![0.5; 12], 2, 2, 3, 4).unwrap();
        let v = image_as_video(ok).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].frame_index, 0);
    }

    #[test]
    fn schedule_covers_each_epoch_exactly() {
        let keys = vec![MediaModality::Video; 10];
        let s = batch_schedule(&keys, 4, 3, 6).unwrap();
        let mut first: Vec<usize> = s[..3].iter().flatten().copied().collect();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(s.len(), 6);
    }

    #[test]
    fn config_hash_tracks_changes() {
        let m = ModelConfig::toy();
        let a = TrainConfig::default();
        let b = TrainConfig { lr: 2e-3, ..a.clone() };
        assert_eq!(a.hash(&m), a.hash(&m));
        assert_ne!(a.hash(&m), b.hash(&m));
    }
}
