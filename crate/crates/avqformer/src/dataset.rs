//! Synthetic corpus generation and media loading for manifest records.

use std::path::{Path, PathBuf};

use avqf_core::audio::waveform_to_clips;
use avqf_core::model::{Media, ModelConfig};
use avqf_core::synth::{scenes, SceneKind, SyntheticScene};

use crate::manifest::{save_manifest, ManifestRecord, MediaModality, RecordBody};
use crate::pipeline::image_as_video;
use crate::{avvf, wav, Error, Result};

pub const CAPTIONS_FILE: &str = "manifest.jsonl";
pub const INSTRUCTIONS_FILE: &str = "instructions.jsonl";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    pub n: usize,
    pub kind: MediaModality,
    pub frames: usize,
    pub size: usize,
    pub sample_rate: u32,
    pub seconds: f64,
}

impl SynthOptions {
    /// Frame count and size taken from a model configuration.
    pub fn for_model(cfg: &ModelConfig, seed: u64, n: usize, kind: MediaModality) -> Self {
        Self {
            seed,
            n,
            kind,
            frames: cfg.video_frames,
            size: cfg.image.frame_size,
            sample_rate: cfg.mel.sample_rate,
            seconds: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub captions: PathBuf,
    pub instructions: PathBuf,
    pub caption_records: Vec<ManifestRecord>,
    pub instruction_records: Vec<ManifestRecord>,
}

/// Writes `n` media files plus a caption manifest and an instruction
/// manifest (one instruction per media file, cycling through the scene's
/// instruction templates) into `out_dir`.
pub fn synth_generate(opts: &SynthOptions, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let kind = match opts.kind {
        MediaModality::Video => SceneKind::Video,
        MediaModality::Image => SceneKind::Image,
        MediaModality::Audio => SceneKind::Audio,
    };
    let mut captions = Vec::with_capacity(opts.n);
    let mut instructions = Vec::with_capacity(opts.n);
    for (i, scene) in scenes(opts.seed, opts.n, kind).into_iter().enumerate() {
        let id = format!("{}-{i:04}", opts.kind);
        let file = match scene {
            SyntheticScene::Visual(v) => {
                let frames = v.render(if opts.kind == MediaModality::Image { 1 } else { opts.frames }, opts.size)?;
                let file = format!("{id}.avvf");
                avvf::save(out.join(&file), &frames)?;
                file
            }
            SyntheticScene::Tone(t) => {
                let file = format!("{id}.wav");
                wav::save_wav(out.join(&file), &t.render(opts.seconds, opts.sample_rate)?)?;
                file
            }
        };
        let templates = scene.instructions();
        let (instruction, response) = templates[i % templates.len()].clone();
        captions.push(ManifestRecord {
            id: id.clone(),
            media_path: file.clone(),
            modality: opts.kind,
            body: RecordBody::Caption { caption: scene.caption() },
        });
        instructions.push(ManifestRecord {
            id: format!("{id}-q"),
            media_path: file,
            modality: opts.kind,
            body: RecordBody::Instruction { instruction, response },
        });
    }
    let cap_path = out.join(CAPTIONS_FILE);
    let ins_path = out.join(INSTRUCTIONS_FILE);
    save_manifest(&cap_path, &captions)?;
    save_manifest(&ins_path, &instructions)?;
    Ok(SynthOutput { captions: cap_path, instructions: ins_path, caption_records: captions, instruction_records: instructions })
}

/// Media paths are relative to the manifest's directory unless absolute.
pub fn resolve(root: &Path, media_path: &str) -> PathBuf {
    let p = Path::new(media_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads a media file, checking it against the record's modality.
pub fn load_media_file(path: &Path, modality: MediaModality, cfg: &ModelConfig) -> Result<Media> {
    match modality {
        MediaModality::Video => {
            let frames = avvf::load(path)?;
            for f in &frames {
                f.validate_range()?;
            }
            Ok(Media::Frames(frames))
        }
        MediaModality::Image => {
            let mut frames = avvf::load(path)?;
            if frames.len() != 1 {
                return Err(Error::Schema(format!("{}: an image holds one frame, found {}", path.display(), frames.len())));
            }
            Ok(Media::Frames(image_as_video(frames.remove(0))?))
        }
        MediaModality::Audio => {
            let w = wav::load_wav(path)?;
            if w.sample_rate() != cfg.mel.sample_rate {
                return Err(Error::Dataset(format!(
                    "{}: sample rate {} Hz, expected {} Hz",
                    path.display(),
                    w.sample_rate(),
                    cfg.mel.sample_rate
                )));
            }
            Ok(Media::Clips(waveform_to_clips(&w, cfg.audio_segments, &cfg.mel)?))
        }
    }
}

/// Infers the modality of a media file from its extension (`.wav` is
/// audio; AVVF files with one frame are images, otherwise video).
pub fn sniff_modality(path: &Path) -> Result<MediaModality> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => Ok(MediaModality::Audio),
        Some("avvf") => {
            let n = avvf::load(path)?.len();
            Ok(if n == 1 { MediaModality::Image } else { MediaModality::Video })
        }
        _ => Err(Error::format(path, "expected a .avvf or .wav file")),
    }
}
