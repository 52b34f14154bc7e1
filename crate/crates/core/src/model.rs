//! The assembled fusion model: frozen encoders, two trainable branches and
//! the frozen language model, all sharing one [`ParamStore`].

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, SpectrogramClip};
use crate::encoders::{
    AudioEncoder, AudioEncoderConfig, AudioSegmentEmbeddings, FrameTensor, ImageEncoder, ImageEncoderConfig,
    VideoEmbedding, VisualAudioAdapter,
};
use crate::lm::{
    assemble_prompt, caption_loss, generate_greedy, LmConfig, PromptText, SegmentOrder, SoftPrompt, TinyCausalLM,
    TokenSequence,
};
use crate::params::ParamStore;
use crate::qformer::{Branch, Modality, QFormerConfig, SoftPromptSegment};
use crate::{Error, Real, Result, RngState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub audio: AudioEncoderConfig,
    pub mel: MelConfig,
    /// Audio segments sampled per clip (M).
    pub audio_segments: usize,
    /// Frames per synthesized video (N).
    pub video_frames: usize,
    pub video_qformer: QFormerConfig,
    pub audio_qformer: QFormerConfig,
    pub max_positions: usize,
    pub lm: LmConfig,
    pub order: SegmentOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mel = MelConfig::default();
        let qf = QFormerConfig { num_queries: 32, d_model: 64, num_layers: 2, num_heads: 4, d_ff: 256 };
        Self {
            image: ImageEncoderConfig { frame_size: 32, channels: 3, patch: 8, k_f: 8, d_f: 64, layers: 2, heads: 4, d_ff: 256 },
            audio: AudioEncoderConfig { n_mels: mel.n_mels, n_frames: mel.n_frames(), hidden: 64, d_pre: 64 },
            mel,
            audio_segments: 4,
            video_frames: 8,
            video_qformer: qf,
            audio_qformer: qf,
            max_positions: 32,
            lm: LmConfig { d_llm: 128, layers: 2, heads: 4, d_ff: 512, context: 256 },
            order: SegmentOrder::VideoFirst,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU training runs and gradient checks.
    pub fn toy() -> Self {
        let mel = MelConfig::default();
        let qf = QFormerConfig { num_queries: 8, d_model: 32, num_layers: 2, num_heads: 4, d_ff: 64 };
        Self {
            image: ImageEncoderConfig { frame_size: 16, channels: 3, patch: 4, k_f: 4, d_f: 32, layers: 2, heads: 4, d_ff: 64 },
            audio: AudioEncoderConfig { n_mels: mel.n_mels, n_frames: mel.n_frames(), hidden: 16, d_pre: 32 },
            mel,
            audio_segments: 4,
            video_frames: 4,
            video_qformer: qf,
            audio_qformer: qf,
            max_positions: 16,
            lm: LmConfig { d_llm: 64, layers: 2, heads: 4, d_ff: 256, context: 128 },
            order: SegmentOrder::VideoFirst,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "default" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or default)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.mel.validate()?;
        self.video_qformer.validate()?;
        self.audio_qformer.validate()?;
        if self.audio.n_mels != self.mel.n_mels || self.audio.n_frames != self.mel.n_frames() {
            return Err(Error::Config("audio encoder input does not match the mel configuration".into()));
        }
        if self.lm.heads == 0 || !self.lm.d_llm.is_multiple_of(self.lm.heads) {
            return Err(Error::Config("LM width not divisible by its head count".into()));
        }
        if self.max_positions == 0 || self.audio_segments == 0 || self.video_frames == 0 {
            return Err(Error::Config("positions, segments and frames must be positive".into()));
        }
        Ok(())
    }
}

/// Raw or pre-encoded media for one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Media {
    Frames(Vec<FrameTensor>),
    Clips(Vec<SpectrogramClip>),
    /// Externally computed `N × K_f × d_f` frame features.
    VideoFeatures(Tensor<f32>),
    /// Externally computed `M × d_pre` segment features.
    AudioFeatures(Tensor<f32>),
}

impl Media {
    pub fn is_visual(&self) -> bool {
        matches!(self, Media::Frames(_) | Media::VideoFeatures(_))
    }
}

/// One training example: media plus the text around its soft prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub media: Media,
    pub text: PromptText,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub audio_encoder: AudioEncoder,
    pub adapter: VisualAudioAdapter,
    pub video: Branch,
    pub audio: Branch,
    pub lm: TinyCausalLM,
}

/// Names of parameters that are never trained by the branch stages.
pub fn is_permanently_frozen(name: &str) -> bool {
    [ImageEncoder::PREFIX, AudioEncoder::PREFIX, VisualAudioAdapter::PREFIX, TinyCausalLM::PREFIX]
        .iter()
        .any(|p| name.starts_with(p) && name.as_bytes().get(p.len()) == Some(&b'.'))
}

impl Model {
    /// Builds every component from one seed. Each component draws from its
    /// own forked stream.
    pub fn new<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut root = RngState::new(seed);
        let mut store = ParamStore::new();
        let image_encoder = ImageEncoder::new(&mut store, cfg.image, &mut root.fork())?;
        let audio_encoder = AudioEncoder::new(&mut store, cfg.audio, &mut root.fork())?;
        let adapter = VisualAudioAdapter::new(&mut store, cfg.image.k_f, cfg.image.d_f, cfg.audio.d_pre, &mut root.fork())?;
        let video = Branch::new(
            &mut store,
            Modality::Video,
            cfg.video_qformer,
            cfg.image.d_f,
            cfg.max_positions,
            cfg.lm.d_llm,
            &mut root.fork(),
        )?;
        let audio = Branch::new(
            &mut store,
            Modality::Audio,
            cfg.audio_qformer,
            cfg.audio.d_pre,
            cfg.max_positions,
            cfg.lm.d_llm,
            &mut root.fork(),
        )?;
        let lm = TinyCausalLM::new(&mut store, cfg.lm, &mut root.fork())?;
        Ok((Self { cfg, image_encoder, audio_encoder, adapter, video, audio, lm }, store))
    }

    pub fn branch(&self, m: Modality) -> &Branch {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
        }
    }

    pub fn encode_video<T: Real>(&self, store: &ParamStore<T>, frames: &[FrameTensor]) -> Result<VideoEmbedding<T>> {
        self.image_encoder.encode_video(store, frames)
    }

    pub fn encode_audio<T: Real>(&self, store: &ParamStore<T>, clips: &[SpectrogramClip]) -> Result<AudioSegmentEmbeddings<T>> {
        self.audio_encoder.encode_segments(store, clips)
    }

    /// Frozen-encoder features feeding branch `m`. Visual media routed to
    /// the audio branch go through the frozen visual→audio adapter.
    pub fn branch_input<T: Real>(&self, store: &ParamStore<T>, m: Modality, media: &Media) -> Result<Tensor<T>> {
        let video = |media: &Media| -> Result<VideoEmbedding<T>> {
            match media {
                Media::Frames(f) => self.encode_video(store, f),
                Media::VideoFeatures(v) => {
                    let s = v.shape();
                    if s.len() != 3 || s[1] != self.cfg.image.k_f || s[2] != self.cfg.image.d_f {
                        return Err(Error::Shape(format!(
                            "video features {s:?} do not match N×{}×{}",
                            self.cfg.image.k_f, self.cfg.image.d_f
                        )));
                    }
                    VideoEmbedding::new(v.cast())
                }
                _ => unreachable!(),
            }
        };
        match (m, media) {
            (Modality::Video, Media::Frames(_) | Media::VideoFeatures(_)) => Ok(video(media)?.v),
            (Modality::Audio, Media::Frames(_) | Media::VideoFeatures(_)) => {
                Ok(self.adapter.adapt(store, &video(media)?)?.a)
            }
            (Modality::Audio, Media::Clips(c)) => Ok(self.encode_audio(store, c)?.a),
            (Modality::Audio, Media::AudioFeatures(a)) => {
                if a.rank() != 2 || a.shape()[1] != self.cfg.audio.d_pre {
                    return Err(Error::Shape(format!("audio features {:?} do not match M×{}", a.shape(), self.cfg.audio.d_pre)));
                }
                Ok(a.cast())
            }
            (Modality::Video, _) => Err(Error::InvalidInput("the video branch cannot consume audio media".into())),
        }
    }

    /// Caption/response loss of one example through branch `m`.
    pub fn example_loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, m: Modality, ex: &Example) -> Result<Var> {
        let x = self.branch_input(store, m, &ex.media)?;
        let x = tape.constant(&x);
        let (seg, _) = self.branch(m).forward_var(tape, store, x)?;
        let (embeds, targets) = assemble_prompt(tape, store, &self.lm, &ex.text, &[seg])?;
        let logits = self.lm.forward(tape, store, embeds)?;
        caption_loss(tape, logits, &targets)
    }

    /// Mean example loss over a batch.
    pub fn batch_loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, m: Modality, batch: &[Example]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let losses = batch.iter().map(|ex| self.example_loss(tape, store, m, ex)).collect::<Result<Vec<_>>>()?;
        let all = if losses.len() == 1 { losses[0] } else { tape.concat(&losses, 0)? };
        Ok(tape.mean(all))
    }

    pub fn segment<T: Real>(&self, store: &ParamStore<T>, m: Modality, media: &Media) -> Result<SoftPromptSegment<T>> {
        let x = self.branch_input(store, m, media)?;
        self.branch(m).forward(store, &x)
    }

    /// Orders segments by the configured segment order.
    pub fn order_segments<T: Real>(&self, mut segs: Vec<SoftPromptSegment<T>>) -> Vec<SoftPromptSegment<T>> {
        let first = match self.cfg.order {
            SegmentOrder::VideoFirst => Modality::Video,
            SegmentOrder::AudioFirst => Modality::Audio,
        };
        segs.sort_by_key(|s| s.modality != first);
        segs
    }

    /// Greedy decoding conditioned on zero or more media inputs.
    pub fn generate<T: Real>(
        &self,
        store: &ParamStore<T>,
        media: &[(Modality, &Media)],
        prefix: &[u32],
        text: &[u32],
        max_len: usize,
    ) -> Result<TokenSequence> {
        let segs = media.iter().map(|(m, md)| self.segment(store, *m, md)).collect::<Result<Vec<_>>>()?;
        let prompt = SoftPrompt { prefix: prefix.to_vec(), segments: self.order_segments(segs), text: text.to_vec() };
        generate_greedy(store, &self.lm, &prompt, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn frozen_partition_names() {
        assert!(is_permanently_frozen("lm.tok_emb"));
        assert!(is_permanently_frozen("image_encoder.readout"));
        assert!(!is_permanently_frozen("video_qformer.query_tokens"));
        assert!(!is_permanently_frozen("lmx.w"));
    }

    #[test]
    fn toy_branches_fit_the_parameter_budget() {
        let (_, mut store) = Model::new::<f32>(ModelConfig::toy(), 1).unwrap();
        store.set_trainable(|n| Branch::owns(Modality::Video, n));
        assert!(store.trainable_count() <= 50_000, "{}", store.trainable_count());
        store.set_trainable(|n| Branch::owns(Modality::Audio, n));
        assert!(store.trainable_count() <= 50_000, "{}", store.trainable_count());
    }

    #[test]
    fn video_branch_rejects_audio_media() {
        let (model, store) = Model::new::<f32>(ModelConfig::toy(), 1).unwrap();
        let media = Media::AudioFeatures(Tensor::zeros(&[2, 32]).unwrap());
        assert!(model.branch_input(&store, Modality::Video, &media).is_err());
    }
}
