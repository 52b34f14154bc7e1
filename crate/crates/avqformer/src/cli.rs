//! Command-line front-end.
//!
//! Every subcommand resolves its settings from built-in defaults, then the
//! `AVQF_SEED` environment variable, then an optional `--config` JSON file
//! whose keys mirror the flag names, then explicit flags. The resolved
//! settings and seed are printed before any work starts.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use avqf_core::model::ModelConfig;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chat::{run_repl, ChatSession};
use crate::checkpoint::CheckpointBundle;
use crate::dataset::{load_media_file, sniff_modality, synth_generate, SynthOptions};
use crate::manifest::{load_manifest, MediaModality};
use crate::pipeline::{
    branch_for, build_fixture, describe, encode_media, finetune_stage, gradcheck, load_model, pretrain_stage, preprocess,
    BranchKind, FixtureConfig, TrainConfig,
};
use crate::sig6;

pub const SEED_ENV: &str = "AVQF_SEED";

#[derive(Debug, Parser)]
#[command(name = "avqformer", version, about = "Audio-visual Q-Former fusion: synthesis, training, checking, generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (media files plus caption and instruction manifests).
    Synth(SynthArgs),
    /// Encode a manifest's media with the frozen encoders into a feature checkpoint.
    Preprocess(PreprocessArgs),
    /// Stage 1: caption pre-training of one branch.
    Pretrain(TrainArgs),
    /// Stage 2: instruction fine-tuning of one branch.
    Finetune(TrainArgs),
    /// Finite-difference gradient check of both branches in f64.
    Gradcheck(GradcheckArgs),
    /// Greedy generation from a checkpoint, optionally conditioned on media.
    Generate(GenerateArgs),
    /// Interactive chat over stdin/stdout.
    Chat(ChatArgs),
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthArgs {
    /// JSON file of settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of media files.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// video, image or audio.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Model preset that fixes frame count and size: default or toy.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Audio clip length in seconds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SynthSettings {
    seed: u64,
    n: usize,
    kind: String,
    out: Option<PathBuf>,
    preset: String,
    seconds: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { seed: 0, n: 16, kind: "video".into(), out: None, preset: "default".into(), seconds: 4.0 }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PreprocessArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Feature checkpoint to write.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Checkpoint whose encoders to use.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct PreprocessSettings {
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Starting checkpoint: the LM fixture (pretrain; built here if the
    /// file does not exist) or a stage-1 checkpoint (finetune).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// vision or audio.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
    /// Precomputed features (from `preprocess`) keyed by record id.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Model preset for a newly built fixture: default or toy.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// LM pre-training steps for a newly built fixture.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lm_steps: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainSettings {
    manifest: Option<PathBuf>,
    base: Option<PathBuf>,
    out: Option<PathBuf>,
    branch: BranchKind,
    steps: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    clip_norm: f64,
    seed: u64,
    log_every: usize,
    embeddings: Option<PathBuf>,
    preset: String,
    lm_steps: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            manifest: None,
            base: None,
            out: None,
            branch: t.branch,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            seed: t.seed,
            log_every: t.log_every,
            embeddings: None,
            preset: "default".into(),
            lm_steps: FixtureConfig::new(ModelConfig::toy(), 0).lm_steps,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model preset: toy or default.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Central-difference step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Coordinates sampled per parameter tensor.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_tensor: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct GradcheckSettings {
    preset: String,
    seed: u64,
    h: f64,
    per_tensor: usize,
    tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { preset: "toy".into(), seed: 0, h: 1e-5, per_tensor: 8, tolerance: 1e-4 }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenerateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// AVVF or WAV file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub media: Option<PathBuf>,
    /// Instruction; without one the model captions the media.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    /// Feed visual media to the audio branch too.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct GenerateSettings {
    checkpoint: Option<PathBuf>,
    media: Option<PathBuf>,
    prompt: Option<String>,
    max_len: usize,
    joint: bool,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self { checkpoint: None, media: None, prompt: None, max_len: 64, joint: false }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ChatArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub media: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ChatSettings {
    checkpoint: Option<PathBuf>,
    media: Option<PathBuf>,
    max_len: usize,
    joint: bool,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self { checkpoint: None, media: None, max_len: 64, joint: false }
    }
}

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: exit code 1.
    Usage(String),
    /// The command ran and failed: exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// defaults < `AVQF_SEED` < config file < flags.
fn resolve<S: Serialize + DeserializeOwned + Default>(
    config: Option<&Path>,
    flags: &impl Serialize,
    env_seed: Option<&str>,
) -> std::result::Result<S, Failure> {
    let mut merged = match serde_json::to_value(S::default()).expect("settings serialize") {
        Value::Object(m) => m,
        _ => unreachable!("settings are structs"),
    };
    if let Some(seed) = env_seed {
        if merged.contains_key("seed") {
            let s: u64 = seed.trim().parse().map_err(|_| usage(format!("{SEED_ENV}={seed} is not an unsigned integer")))?;
            merged.insert("seed".into(), Value::from(s));
        }
    }
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let file: Map<String, Value> =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: expected a JSON object: {e}", path.display())))?;
        merged.extend(file);
    }
    if let Value::Object(f) = serde_json::to_value(flags).expect("flags serialize") {
        merged.extend(f);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid settings: {e}")))
}

fn announce(out: &mut dyn Write, settings: &impl Serialize, seed: u64) -> CmdResult {
    writeln!(out, "config: {}", serde_json::to_string(settings).expect("settings serialize"))?;
    writeln!(out, "seed={seed}")?;
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> std::result::Result<&'a T, Failure> {
    v.as_ref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn preset(name: &str) -> std::result::Result<ModelConfig, Failure> {
    ModelConfig::preset(name).map_err(|e| usage(e.to_string()))
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run(argv: &[String], input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{shown}");
                    0
                }
                _ => {
                    let _ = write!(err, "{shown}");
                    1
                }
            };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match dispatch(cli.command, env_seed.as_deref(), input, out) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => {
                    let _ = writeln!(err, "usage error: {m}");
                }
                Failure::Runtime(e) => {
                    let _ = writeln!(err, "error: {e:#}");
                }
            }
            f.exit_code()
        }
    }
}

fn dispatch(cmd: Command, env_seed: Option<&str>, input: &mut dyn BufRead, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Synth(a) => cmd_synth(resolve(a.config.as_deref(), &a, env_seed)?, out),
        Command::Preprocess(a) => cmd_preprocess(resolve(a.config.as_deref(), &a, env_seed)?, out),
        Command::Pretrain(a) => cmd_train(resolve(a.config.as_deref(), &a, env_seed)?, true, out),
        Command::Finetune(a) => cmd_train(resolve(a.config.as_deref(), &a, env_seed)?, false, out),
        Command::Gradcheck(a) => cmd_gradcheck(resolve(a.config.as_deref(), &a, env_seed)?, out),
        Command::Generate(a) => cmd_generate(resolve(a.config.as_deref(), &a, env_seed)?, out),
        Command::Chat(a) => cmd_chat(resolve(a.config.as_deref(), &a, env_seed)?, input, out),
    }
}

fn cmd_synth(s: SynthSettings, out: &mut dyn Write) -> CmdResult {
    announce(out, &s, s.seed)?;
    let kind: MediaModality = s.kind.parse().map_err(|_| usage(format!("--kind must be video, image or audio, not `{}`", s.kind)))?;
    let dir = required(&s.out, "out")?;
    let cfg = preset(&s.preset)?;
    let opts = SynthOptions { seconds: s.seconds, ..SynthOptions::for_model(&cfg, s.seed, s.n, kind) };
    let res = synth_generate(&opts, dir)?;
    writeln!(out, "wrote {} {} files", res.caption_records.len(), kind)?;
    writeln!(out, "captions: {}", res.captions.display())?;
    writeln!(out, "instructions: {}", res.instructions.display())?;
    Ok(())
}

fn cmd_preprocess(s: PreprocessSettings, out: &mut dyn Write) -> CmdResult {
    announce(out, &s, s.seed)?;
    let manifest = required(&s.manifest, "manifest")?;
    let dest = required(&s.out, "out")?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let (model, store) = load_model(&CheckpointBundle::load(ckpt)?)?;
    let records = load_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let b = preprocess(&model, &store, &records, root)?;
    b.save(dest)?;
    writeln!(out, "wrote features for {} records to {}", b.entries.len(), dest.display())?;
    Ok(())
}

fn cmd_train(s: TrainSettings, pretrain: bool, out: &mut dyn Write) -> CmdResult {
    announce(out, &s, s.seed)?;
    let manifest = required(&s.manifest, "manifest")?;
    let base = required(&s.base, "base")?;
    if pretrain && !base.exists() {
        let fixture = FixtureConfig { lm_steps: s.lm_steps, ..FixtureConfig::new(preset(&s.preset)?, s.seed) };
        writeln!(out, "building LM fixture at {}", base.display())?;
        build_fixture(&fixture, out)?.save(base)?;
    }
    let cfg = TrainConfig {
        branch: s.branch,
        stage: if pretrain { crate::pipeline::Stage::Pretrain } else { crate::pipeline::Stage::Finetune },
        lr: s.lr,
        beta1: s.beta1,
        beta2: s.beta2,
        weight_decay: s.weight_decay,
        clip_norm: s.clip_norm,
        steps: s.steps,
        batch_size: s.batch_size,
        seed: s.seed,
        log_every: s.log_every,
        base: Some(base.clone()),
        out: s.out.clone(),
        embeddings: s.embeddings.clone(),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let outcome = if pretrain { pretrain_stage(&cfg, manifest, out)? } else { finetune_stage(&cfg, manifest, out)? };
    let (first, last) = outcome.running_loss(20);
    writeln!(out, "running_loss first={} last={}", sig6(first), sig6(last))?;
    if let Some(p) = &cfg.out {
        writeln!(out, "saved {}", p.display())?;
    }
    Ok(())
}

fn cmd_gradcheck(s: GradcheckSettings, out: &mut dyn Write) -> CmdResult {
    announce(out, &s, s.seed)?;
    let cfg = preset(&s.preset)?;
    let results = gradcheck(cfg, s.seed, s.h, s.per_tensor)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        writeln!(
            out,
            "gradcheck branch={} max_rel_err={} checked={} tensors={} worst={}[{}]",
            r.branch.as_str(),
            sig6(r.report.max_rel_err),
            r.report.checked,
            r.report.tensors,
            r.report.worst_param,
            r.report.worst_index
        )?;
        worst = worst.max(r.report.max_rel_err);
    }
    writeln!(out, "gradcheck max_rel_err={}", sig6(worst))?;
    if worst <= s.tolerance {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("max relative error {} exceeds {}", sig6(worst), sig6(s.tolerance))))
    }
}

fn cmd_generate(s: GenerateSettings, out: &mut dyn Write) -> CmdResult {
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let bundle = CheckpointBundle::load(ckpt)?;
    let seed = bundle.meta("model_seed").and_then(|v| v.parse().ok()).unwrap_or(0);
    announce(out, &s, seed)?;
    let (model, store) = load_model(&bundle)?;
    if let Some(instruction) = &s.prompt {
        let mut session = ChatSession::new(&model, &store);
        session.max_len = s.max_len;
        session.joint = s.joint;
        if let Some(m) = &s.media {
            session.set_media(m)?;
        }
        writeln!(out, "{}", session.reply(instruction)?)?;
        return Ok(());
    }
    let mut media = Vec::new();
    if let Some(path) = &s.media {
        let modality = sniff_modality(path)?;
        let encoded = encode_media(&model, &store, load_media_file(path, modality, &model.cfg)?)?;
        let m = branch_for(modality);
        media.push((m, encoded.clone()));
        if s.joint && m == avqf_core::qformer::Modality::Video {
            media.push((avqf_core::qformer::Modality::Audio, encoded));
        }
    }
    let refs: Vec<_> = media.iter().map(|(m, x)| (*m, x)).collect();
    writeln!(out, "{}", describe(&model, &store, &refs, s.max_len)?)?;
    Ok(())
}

fn cmd_chat(s: ChatSettings, input: &mut dyn BufRead, out: &mut dyn Write) -> CmdResult {
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let bundle = CheckpointBundle::load(ckpt)?;
    let seed = bundle.meta("model_seed").and_then(|v| v.parse().ok()).unwrap_or(0);
    announce(out, &s, seed)?;
    let (model, store) = load_model(&bundle)?;
    let mut session = ChatSession::new(&model, &store);
    session.max_len = s.max_len;
    session.joint = s.joint;
    if let Some(m) = &s.media {
        if let Err(e) = session.set_media(m) {
            writeln!(out, "error: {e}")?;
        }
    }
    run_repl(&mut session, input, out)?;
    Ok(())
}
