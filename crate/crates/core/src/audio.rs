//! Audio front-end: fixed-length segment sampling and log-mel spectrograms.
//!
//! A waveform of duration `D` is cut into `M` segments of `seg_seconds`
//! with evenly spaced starts `i·(D − seg)/(M − 1)`; segments running past
//! the end are zero-padded. Each segment becomes a Hann-windowed STFT
//! power spectrum pooled through an HTK-scale triangular filterbank and
//! mapped through `ln(x + 1e-10)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::fft::power_spectrum;
use crate::{Error, Result};

/// Additive floor inside the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self { samples: self.samples.iter().map(|&s| s * c).collect(), sample_rate: self.sample_rate }
    }
}

/// One sampled segment and where it starts in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_seconds: f64,
    pub wave: Waveform,
}

/// Cuts `m` evenly spaced segments of `seg_seconds` out of `w`.
pub fn sample_segments(w: &Waveform, m: usize, seg_seconds: f64) -> Result<Vec<Segment>> {
    if m == 0 {
        return Err(Error::InvalidCount("segment count must be at least 1".into()));
    }
    if w.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    if !(seg_seconds > 0.0) {
        return Err(Error::Config(format!("segment length must be positive, got {seg_seconds}")));
    }
    let sr = w.sample_rate as f64;
    let seg_len = libm::round(seg_seconds * sr) as usize;
    let span = w.duration() - seg_seconds;
    (0..m)
        .map(|i| {
            let start = if m == 1 { 0.0 } else { (i as f64 * span / (m - 1) as f64).max(0.0) };
            let first = libm::round(start * sr) as usize;
            let mut samples = vec![0.0f32; seg_len];
            let avail = w.samples.len().saturating_sub(first).min(seg_len);
            samples[..avail].copy_from_slice(&w.samples[first..first + avail]);
            Ok(Segment { start_seconds: start, wave: Waveform::new(samples, w.sample_rate)? })
        })
        .collect()
}

/// Spectrogram settings. The window length equals `n_fft`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub seg_seconds: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, n_mels: 128, n_fft: 512, hop: 160, seg_seconds: 2.0 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels < 1 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!("n_fft {} is not a power of two", self.n_fft)));
        }
        if self.hop < 1 || self.n_fft < 2 * self.hop {
            return Err(Error::Config(format!("n_fft {} must be ≥ 2·hop ({})", self.n_fft, self.hop)));
        }
        if self.sample_rate == 0 || !(self.seg_seconds > 0.0) {
            return Err(Error::Config("sample rate and segment length must be positive".into()));
        }
        if self.segment_samples() < self.n_fft {
            return Err(Error::Config("segment shorter than one FFT window".into()));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        libm::round(self.seg_seconds * self.sample_rate as f64) as usize
    }

    /// STFT frames per segment (no centering padding).
    pub fn n_frames(&self) -> usize {
        1 + (self.segment_samples() - self.n_fft) / self.hop
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `0..sample_rate/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz; filter `i` spans
    /// `edges[i]..edges[i + 2]` and peaks at `edges[i + 1]`.
    edges: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> =
            (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let bins: Vec<f64> =
            (0..=n_fft / 2).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();
        let weights = (0..n_mels)
            .map(|i| {
                let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
                bins.iter()
                    .map(|&f| {
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        Self { edges, weights }
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    /// `(low, center, high)` edge frequencies of filter `i`.
    pub fn band(&self, i: usize) -> (f64, f64, f64) {
        (self.edges[i], self.edges[i + 1], self.edges[i + 2])
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    /// Filter energies of one power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(2.0 * core::f64::consts::PI * i as f64 / (n - 1) as f64))
        .collect()
}

/// `n_mels × n_frames` log-mel energies of one segment, row-major by mel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramClip {
    pub mel_energies: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub segment_start: f64,
    pub segment_duration: f64,
}

impl SpectrogramClip {
    pub fn row(&self, mel: usize) -> &[f32] {
        &self.mel_energies[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.mel_energies[mel * self.n_frames + frame]
    }

    /// Index of the mel row with the largest energy in `frame`.
    pub fn dominant_mel(&self, frame: usize) -> usize {
        (0..self.n_mels)
            .fold((0, f32::NEG_INFINITY), |(bi, bv), m| {
                let v = self.get(m, frame);
                if v > bv {
                    (m, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }
}

/// Pre-log mel energies, `n_frames` rows of `n_mels` values.
pub fn mel_power_frames(seg: &Waveform, cfg: &MelConfig, bank: &MelFilterbank) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if seg.sample_rate() != cfg.sample_rate {
        return Err(Error::InvalidInput(format!(
            "sample rate {} does not match configured {} (resampling is not supported)",
            seg.sample_rate(),
            cfg.sample_rate
        )));
    }
    if seg.samples().len() != cfg.segment_samples() {
        return Err(Error::InvalidInput(format!(
            "segment has {} samples, expected {}",
            seg.samples().len(),
            cfg.segment_samples()
        )));
    }
    let window = hann(cfg.n_fft);
    let x = seg.samples();
    let mut frame = vec![0.0; cfg.n_fft];
    (0..cfg.n_frames())
        .map(|t| {
            let start = t * cfg.hop;
            for (i, f) in frame.iter_mut().enumerate() {
                *f = x[start + i] as f64 * window[i];
            }
            Ok(bank.apply(&power_spectrum(&frame)?))
        })
        .collect()
}

pub fn mel_spectrogram(seg: &Waveform, cfg: &MelConfig) -> Result<SpectrogramClip> {
    cfg.validate()?;
    let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, cfg.sample_rate);
    mel_spectrogram_with(seg, cfg, &bank, 0.0)
}

/// As [`mel_spectrogram`] with a prebuilt filterbank and a recorded start.
pub fn mel_spectrogram_with(
    seg: &Waveform,
    cfg: &MelConfig,
    bank: &MelFilterbank,
    segment_start: f64,
) -> Result<SpectrogramClip> {
    let frames = mel_power_frames(seg, cfg, bank)?;
    let n_frames = frames.len();
    let mut mel_energies = vec![0.0f32; cfg.n_mels * n_frames];
    for (t, energies) in frames.iter().enumerate() {
        for (m, &e) in energies.iter().enumerate() {
            mel_energies[m * n_frames + t] = libm::log(e + LOG_FLOOR) as f32;
        }
    }
    Ok(SpectrogramClip {
        mel_energies,
        n_mels: cfg.n_mels,
        n_frames,
        segment_start,
        segment_duration: cfg.seg_seconds,
    })
}

/// Segments a waveform and converts every segment.
pub fn waveform_to_clips(w: &Waveform, m: usize, cfg: &MelConfig) -> Result<Vec<SpectrogramClip>> {
    cfg.validate()?;
    let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, cfg.sample_rate);
    sample_segments(w, m, cfg.seg_seconds)?
        .iter()
        .map(|s| mel_spectrogram_with(&s.wave, cfg, &bank, s.start_seconds))
        .collect()
}
