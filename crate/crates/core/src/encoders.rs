//! Frozen stand-in media encoders.
//!
//! The image encoder is a tiny ViT: patchify, linear patch embedding plus
//! patch positions, pre-norm transformer blocks, then a fixed learned
//! pooling from the patch tokens down to `K_f` output vectors. The audio
//! encoder standardizes a flattened log-mel clip and runs a two-layer
//! perceptron. Both are seeded at construction and never trained.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramClip;
use crate::nn::{Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Init, Real, Result, RngState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    /// Frame height and width (square frames).
    pub frame_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Output vectors per frame.
    pub k_f: usize,
    pub d_f: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl ImageEncoderConfig {
    pub fn patches(&self) -> usize {
        (self.frame_size / self.patch) * (self.frame_size / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Config(format!("frames must have 3 channels, got {}", self.channels)));
        }
        if self.patch == 0 || self.frame_size == 0 || !self.frame_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "frame size {} not divisible by patch {}",
                self.frame_size, self.patch
            )));
        }
        if self.k_f == 0 || self.d_f == 0 {
            return Err(Error::Config("K_f and d_f must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    pub hidden: usize,
    pub d_pre: usize,
}

/// One `H×W×C` frame with pixels in `[0, 1]`, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frame_index: usize,
}

impl FrameTensor {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize, channels: usize, frame_index: usize) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}×{width}×{channels} frame",
                pixels.len()
            )));
        }
        Ok(Self { pixels, height, width, channels, frame_index })
    }

    /// Errors unless every pixel lies in `[0, 1]`.
    pub fn validate_range(&self) -> Result<()> {
        match self.pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            Some(i) => Err(Error::Validation(format!(
                "pixel {i} of frame {} is {} (outside [0, 1])",
                self.frame_index, self.pixels[i]
            ))),
            None => Ok(()),
        }
    }
}

/// `N × K_f × d_f` frame representations.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding<T> {
    pub v: Tensor<T>,
}

impl<T: Real> VideoEmbedding<T> {
    pub fn new(v: Tensor<T>) -> Result<Self> {
        if v.rank() != 3 {
            return Err(Error::Shape(format!("video embedding must be N×K_f×d_f, got {:?}", v.shape())));
        }
        Ok(Self { v })
    }

    pub fn n_frames(&self) -> usize {
        self.v.shape()[0]
    }
}

/// `M × d_pre` audio segment vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegmentEmbeddings<T> {
    pub a: Tensor<T>,
}

impl<T: Real> AudioSegmentEmbeddings<T> {
    pub fn new(a: Tensor<T>) -> Result<Self> {
        if a.rank() != 2 {
            return Err(Error::Shape(format!("audio embeddings must be M×d_pre, got {:?}", a.shape())));
        }
        Ok(Self { a })
    }

    pub fn n_segments(&self) -> usize {
        self.a.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    patch_embed: Linear,
    patch_pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_out: crate::nn::LayerNorm,
    readout: ParamId,
}

impl ImageEncoder {
    pub const PREFIX: &'static str = "image_encoder";

    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ImageEncoderConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let p = Self::PREFIX;
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let patch_embed = Linear::new(store, &format!("{p}.patch_embed"), patch_dim, cfg.d_f, rng, false)?;
        let patch_pos = store.init(&format!("{p}.patch_pos"), &[cfg.patches(), cfg.d_f], Init::UniformScaled, rng, false)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                TransformerBlock::new(store, &format!("{p}.block{i}"), cfg.d_f, cfg.heads, cfg.d_ff, false, rng, false)
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_out = crate::nn::LayerNorm::new(store, &format!("{p}.ln_out"), cfg.d_f, rng, false)?;
        let readout = store.init(&format!("{p}.readout"), &[cfg.k_f, cfg.patches()], Init::UniformScaled, rng, false)?;
        Ok(Self { cfg, patch_embed, patch_pos, blocks, ln_out, readout })
    }

    fn patchify<T: Real>(&self, f: &FrameTensor) -> Result<Tensor<T>> {
        let c = &self.cfg;
        if f.height != c.frame_size || f.width != c.frame_size || f.channels != c.channels {
            return Err(Error::Shape(format!(
                "frame {}×{}×{} does not match encoder {}×{}×{}",
                f.height, f.width, f.channels, c.frame_size, c.frame_size, c.channels
            )));
        }
        let per_side = c.frame_size / c.patch;
        let mut data = Vec::with_capacity(f.pixels.len());
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..c.patch {
                    let row = (py * c.patch + y) * f.width + px * c.patch;
                    for &v in &f.pixels[row * c.channels..(row + c.patch) * c.channels] {
                        data.push(T::cast(v as f64));
                    }
                }
            }
        }
        Tensor::from_vec(&[c.patches(), c.patch * c.patch * c.channels], data)
    }

    /// `K_f × d_f` embedding of one frame, recorded on `tape`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: &FrameTensor) -> Result<Var> {
        let patches = self.patchify::<T>(f)?;
        let x = tape.constant(&patches);
        let x = self.patch_embed.forward(tape, store, x)?;
        let pos = tape.param(store, self.patch_pos);
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        let x = self.ln_out.forward(tape, store, x)?;
        let r = tape.param(store, self.readout);
        tape.matmul(r, x)
    }

    pub fn encode_frame<T: Real>(&self, store: &ParamStore<T>, f: &FrameTensor) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, store, f)?;
        Ok(tape.tensor(y))
    }

    /// Encodes every frame independently and stacks along a leading axis.
    pub fn encode_video<T: Real>(&self, store: &ParamStore<T>, frames: &[FrameTensor]) -> Result<VideoEmbedding<T>> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("video has no frames".into()));
        }
        let parts = frames.iter().map(|f| self.encode_frame(store, f)).collect::<Result<Vec<_>>>()?;
        let stacked = Tensor::stack_rows(&parts)?;
        VideoEmbedding::new(stacked.reshape(&[frames.len(), self.cfg.k_f, self.cfg.d_f])?)
    }
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    hidden: Linear,
    out: Linear,
}

impl AudioEncoder {
    pub const PREFIX: &'static str = "audio_encoder";

    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: AudioEncoderConfig, rng: &mut RngState) -> Result<Self> {
        let p = Self::PREFIX;
        let d_in = cfg.n_mels * cfg.n_frames;
        Ok(Self {
            cfg,
            hidden: Linear::new(store, &format!("{p}.hidden"), d_in, cfg.hidden, rng, false)?,
            out: Linear::new(store, &format!("{p}.out"), cfg.hidden, cfg.d_pre, rng, false)?,
        })
    }

    /// One `1 × d_pre` vector for a clip.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        clip: &SpectrogramClip,
    ) -> Result<Var> {
        if clip.n_mels != self.cfg.n_mels || clip.n_frames != self.cfg.n_frames {
            return Err(Error::Shape(format!(
                "clip {}×{} does not match encoder {}×{}",
                clip.n_mels, clip.n_frames, self.cfg.n_mels, self.cfg.n_frames
            )));
        }
        let d_in = clip.mel_energies.len();
        let x: Tensor<T> =
            Tensor::from_vec(&[1, d_in], clip.mel_energies.iter().map(|&v| T::cast(v as f64)).collect())?;
        let x = tape.constant(&x);
        let ones = tape.constant(&Tensor::full(&[d_in], T::one())?);
        let zeros = tape.constant(&Tensor::zeros(&[d_in])?);
        let x = tape.layer_norm(x, ones, zeros, crate::nn::LN_EPS)?;
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, store, h)
    }

    pub fn encode_segments<T: Real>(
        &self,
        store: &ParamStore<T>,
        clips: &[SpectrogramClip],
    ) -> Result<AudioSegmentEmbeddings<T>> {
        let first = clips.first().ok_or_else(|| Error::InvalidInput("no audio clips".into()))?;
        if clips.iter().any(|c| c.n_mels != first.n_mels || c.n_frames != first.n_frames) {
            return Err(Error::Shape("audio clips have heterogeneous shapes".into()));
        }
        let rows = clips
            .iter()
            .map(|c| {
                let mut tape = Tape::new();
                let y = self.forward(&mut tape, store, c)?;
                Ok(tape.tensor(y))
            })
            .collect::<Result<Vec<_>>>()?;
        AudioSegmentEmbeddings::new(Tensor::stack_rows(&rows)?)
    }
}

/// Frozen map from frame features to audio-encoder space, used when the
/// audio branch trains on visual caption data: mean over the `K_f` vectors
/// of each frame, then a fixed linear map `d_f → d_pre`.
#[derive(Debug, Clone)]
pub struct VisualAudioAdapter {
    proj: Linear,
    k_f: usize,
}

impl VisualAudioAdapter {
    pub const PREFIX: &'static str = "visual_audio_adapter";

    pub fn new<T: Real>(store: &mut ParamStore<T>, k_f: usize, d_f: usize, d_pre: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self { proj: Linear::new(store, &format!("{}.proj", Self::PREFIX), d_f, d_pre, rng, false)?, k_f })
    }

    pub fn adapt<T: Real>(&self, store: &ParamStore<T>, v: &VideoEmbedding<T>) -> Result<AudioSegmentEmbeddings<T>> {
        let s = v.v.shape();
        if s[1] != self.k_f || s[2] != self.proj.d_in {
            return Err(Error::Shape(format!("adapter expects N×{}×{}, got {s:?}", self.k_f, self.proj.d_in)));
        }
        let (n, k, d) = (s[0], s[1], s[2]);
        let mut pooled = alloc::vec![T::zero(); n * d];
        let inv = T::cast(1.0 / k as f64);
        for i in 0..n {
            for r in 0..k {
                for j in 0..d {
                    pooled[i * d + j] += v.v.data()[(i * k + r) * d + j] * inv;
                }
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(&[n, d], pooled)?);
        let y = self.proj.forward(&mut tape, store, x)?;
        AudioSegmentEmbeddings::new(tape.tensor(y))
    }
}
