use std::f64::consts::PI;

use avqf_core::audio::{mel_power_frames, mel_spectrogram, waveform_to_clips, MelConfig, MelFilterbank, Waveform};
use avqf_core::synth::{Contour, ToneScene};
use proptest::prelude::*;

// Reference built from textbook definitions: symmetric Hann window,
// O(n²) DFT, HTK triangles.
mod oracle {
    use super::PI;

    pub fn mel(hz: f64) -> f64 {
        2595.0 * (1.0 + hz / 700.0).log10()
    }

    pub fn inv_mel(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }

    pub fn dft_power(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    pub fn triangle(f: f64, lo: f64, mid: f64, hi: f64) -> f64 {
        if f > lo && f <= mid {
            (f - lo) / (mid - lo)
        } else if f > mid && f < hi {
            (hi - f) / (hi - mid)
        } else {
            0.0
        }
    }

    pub fn edges(n_mels: usize, sr: f64) -> Vec<f64> {
        let top = mel(sr / 2.0);
        (0..n_mels + 2).map(|i| inv_mel(top * i as f64 / (n_mels + 1) as f64)).collect()
    }

    /// Per frame, the index of the mel filter with the largest energy.
    pub fn dominant_filters(x: &[f32], sr: f64, n_fft: usize, hop: usize, n_mels: usize) -> Vec<usize> {
        let e = edges(n_mels, sr);
        let window: Vec<f64> = (0..n_fft).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n_fft - 1) as f64).cos())).collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start + n_fft <= x.len() {
            let frame: Vec<f64> = (0..n_fft).map(|i| x[start + i] as f64 * window[i]).collect();
            let p = dft_power(&frame);
            let energy: Vec<f64> = (0..n_mels)
                .map(|m| {
                    p.iter()
                        .enumerate()
                        .map(|(k, &pk)| pk * triangle(k as f64 * sr / n_fft as f64, e[m], e[m + 1], e[m + 2]))
                        .sum()
                })
                .collect();
            out.push((0..n_mels).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap());
            start += hop;
        }
        out
    }
}

fn sine(hz: f64, seconds: f64, sr: u32, amp: f64) -> Waveform {
    let n = (seconds * sr as f64).round() as usize;
    let s = (0..n).map(|i| (amp * (2.0 * PI * hz * i as f64 / sr as f64).sin()) as f32).collect();
    Waveform::new(s, sr).unwrap()
}

#[test]
fn sine_440_matches_dft_oracle() {
    let cfg = MelConfig::default();
    let w = sine(440.0, cfg.seg_seconds, cfg.sample_rate, 0.5);
    let clip = mel_spectrogram(&w, &cfg).unwrap();
    assert_eq!(clip.n_mels, 128);
    assert_eq!(clip.mel_energies.len(), 128 * clip.n_frames);
    let want = oracle::dominant_filters(w.samples(), cfg.sample_rate as f64, cfg.n_fft, cfg.hop, cfg.n_mels);
    assert_eq!(want.len(), clip.n_frames);
    let agree = (0..clip.n_frames).filter(|&t| clip.dominant_mel(t) == want[t]).count();
    assert!(agree as f64 >= 0.95 * clip.n_frames as f64, "{agree}/{}", clip.n_frames);
}

#[test]
fn filterbank_edges_follow_htk_scale() {
    let bank = MelFilterbank::new(128, 512, 16_000);
    let e = oracle::edges(128, 16_000.0);
    for i in 0..128 {
        let (lo, mid, hi) = bank.band(i);
        assert!((lo - e[i]).abs() < 1e-9 && (mid - e[i + 1]).abs() < 1e-9 && (hi - e[i + 2]).abs() < 1e-9);
    }
}

#[test]
fn rising_tone_is_tracked_by_the_dominant_band() {
    let cfg = MelConfig::default();
    let seconds = 4.0;
    let tone = ToneScene { base_hz: 400.0, contour: Contour::Rising };
    let w = tone.render(seconds, cfg.sample_rate).unwrap();
    let clips = waveform_to_clips(&w, 2, &cfg).unwrap();
    let e = oracle::edges(cfg.n_mels, cfg.sample_rate as f64);
    let mut total = 0;
    let mut close = 0;
    let mut last = 0;
    for clip in &clips {
        for t in 0..clip.n_frames {
            // Centre of the analysis window, in clip-relative seconds.
            let centre = clip.segment_start + (t * cfg.hop + cfg.n_fft / 2) as f64 / cfg.sample_rate as f64;
            let f = tone.frequency_at(centre, seconds);
            let expect = (0..cfg.n_mels)
                .max_by(|&a, &b| {
                    oracle::triangle(f, e[a], e[a + 1], e[a + 2]).total_cmp(&oracle::triangle(f, e[b], e[b + 1], e[b + 2]))
                })
                .unwrap();
            let got = clip.dominant_mel(t);
            total += 1;
            close += usize::from(got.abs_diff(expect) <= 1);
            assert!(got + 1 >= last, "dominant band fell from {last} to {got}");
            last = got;
        }
    }
    assert!(close as f64 >= 0.95 * total as f64, "{close}/{total}");
}

#[test]
fn zero_padding_keeps_segment_count() {
    let cfg = MelConfig::default();
    let w = sine(300.0, 0.5, cfg.sample_rate, 0.3);
    let clips = waveform_to_clips(&w, 4, &cfg).unwrap();
    assert_eq!(clips.len(), 4);
    assert!(clips.iter().all(|c| c.n_frames == cfg.n_frames()));
}

fn small_cfg() -> MelConfig {
    MelConfig { sample_rate: 8_000, n_mels: 16, n_fft: 256, hop: 64, seg_seconds: 0.25 }
}

fn waveform_strategy(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-0.2f32..0.2, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaling_never_lowers_mel_energy(x in waveform_strategy(2000), c in 1.0f32..4.0) {
        let cfg = small_cfg();
        let bank = MelFilterbank::new(cfg.n_mels, cfg.n_fft, cfg.sample_rate);
        let w = Waveform::new(x, cfg.sample_rate).unwrap();
        let a = mel_power_frames(&w, &cfg, &bank).unwrap();
        let b = mel_power_frames(&w.scaled(c), &cfg, &bank).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (ea, eb) in ra.iter().zip(rb) {
                prop_assert!(eb >= ea, "{eb} < {ea}");
            }
        }
    }

    #[test]
    fn one_hop_delay_shifts_columns(x in waveform_strategy(2000)) {
        let cfg = small_cfg();
        let mut delayed = vec![0.0f32; cfg.hop];
        delayed.extend_from_slice(&x[..x.len() - cfg.hop]);
        let a = mel_spectrogram(&Waveform::new(x, cfg.sample_rate).unwrap(), &cfg).unwrap();
        let b = mel_spectrogram(&Waveform::new(delayed, cfg.sample_rate).unwrap(), &cfg).unwrap();
        for t in 0..a.n_frames - 1 {
            for m in 0..cfg.n_mels {
                prop_assert!((a.get(m, t) - b.get(m, t + 1)).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn shape_depends_only_on_config(x in waveform_strategy(2000), m in 1usize..5) {
        let cfg = small_cfg();
        let clips = waveform_to_clips(&Waveform::new(x, cfg.sample_rate).unwrap(), m, &cfg).unwrap();
        prop_assert_eq!(clips.len(), m);
        for c in &clips {
            prop_assert_eq!((c.n_mels, c.n_frames), (cfg.n_mels, cfg.n_frames()));
            prop_assert!(c.mel_energies.iter().all(|e| e.is_finite() && *e as f64 >= (avqf_core::audio::LOG_FLOOR).ln() - 1e-3));
        }
    }
}
