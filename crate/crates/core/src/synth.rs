//! Closed scene grammar for the synthetic corpora: colored shapes moving
//! across a frame, pitch-contoured tones, their captions, and the
//! instruction/response pairs derived from them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::audio::Waveform;
use crate::encoders::FrameTensor;
use crate::lm::{encode_text, TokenSequence, BOS, EOS};
use crate::{Error, Result, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Square,
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Contour {
    Rising,
    Falling,
    Flat,
}

pub const SHAPES: [Shape; 2] = [Shape::Square, Shape::Circle];
pub const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];
pub const MOTIONS: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Static];
pub const CONTOURS: [Contour; 3] = [Contour::Rising, Contour::Falling, Contour::Flat];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.9, 0.1],
            Color::Blue => [0.1, 0.1, 0.9],
        }
    }
}

impl Motion {
    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Static => "still",
        }
    }

    /// Per-frame displacement direction `(dx, dy)` in image coordinates.
    fn direction(self) -> (f32, f32) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
            Motion::Static => (0.0, 0.0),
        }
    }
}

impl Contour {
    pub fn word(self) -> &'static str {
        match self {
            Contour::Rising => "rising",
            Contour::Falling => "falling",
            Contour::Flat => "steady",
        }
    }

    /// Octaves travelled over the whole clip.
    fn octaves(self) -> f64 {
        match self {
            Contour::Rising => 1.0,
            Contour::Falling => -1.0,
            Contour::Flat => 0.0,
        }
    }
}

/// A moving shape (video) or a still one (image, `motion = None`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VisualScene {
    pub shape: Shape,
    pub color: Color,
    pub motion: Option<Motion>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneScene {
    pub base_hz: f64,
    pub contour: Contour,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticScene {
    Visual(VisualScene),
    Tone(ToneScene),
}

impl VisualScene {
    /// Every video scene of the grammar in a fixed order (30 scenes).
    pub fn all_videos() -> Vec<Self> {
        let mut out = Vec::new();
        for motion in MOTIONS {
            for color in COLORS {
                for shape in SHAPES {
                    out.push(Self { shape, color, motion: Some(motion) });
                }
            }
        }
        out
    }

    pub fn all_images() -> Vec<Self> {
        let mut out = Vec::new();
        for color in COLORS {
            for shape in SHAPES {
                out.push(Self { shape, color, motion: None });
            }
        }
        out
    }

    pub fn caption(&self) -> String {
        match self.motion {
            Some(Motion::Static) => format!("a {} {} stays still", self.color.word(), self.shape.word()),
            Some(m) => format!("a {} {} moves {}", self.color.word(), self.shape.word(), m.word()),
            None => format!("a {} {}", self.color.word(), self.shape.word()),
        }
    }

    /// Inverse of [`caption`](Self::caption).
    pub fn parse_caption(s: &str) -> Option<Self> {
        let words: Vec<&str> = s.split(' ').collect();
        let color = *COLORS.iter().find(|c| words.get(1) == Some(&c.word()))?;
        let shape = *SHAPES.iter().find(|c| words.get(2) == Some(&c.word()))?;
        let motion = match words.get(3..) {
            Some([]) => None,
            Some(["stays", "still"]) => Some(Motion::Static),
            Some(["moves", w]) => Some(*MOTIONS.iter().find(|m| m.word() == *w && **m != Motion::Static)?),
            _ => return None,
        };
        (words[0] == "a").then_some(Self { shape, color, motion })
    }

    /// Short content string used to teach the LM to read its context.
    pub fn keywords(&self) -> String {
        match self.motion {
            Some(m) => format!("{} {} {}", self.color.word(), self.shape.word(), m.word()),
            None => format!("{} {}", self.color.word(), self.shape.word()),
        }
    }

    /// Renders `n_frames` frames of `size × size × 3` pixels in `[0, 1]`.
    /// The shape travels half the frame width over the clip.
    pub fn render(&self, n_frames: usize, size: usize) -> Result<Vec<FrameTensor>> {
        if n_frames == 0 || size == 0 {
            return Err(Error::InvalidCount("frames and size must be positive".into()));
        }
        let s = size as f32;
        let radius = s / 5.0;
        let (dx, dy) = self.motion.map_or((0.0, 0.0), Motion::direction);
        let rgb = self.color.rgb();
        (0..n_frames)
            .map(|f| {
                let t = if n_frames > 1 { f as f32 / (n_frames - 1) as f32 - 0.5 } else { 0.0 };
                let cx = s / 2.0 + dx * t * s / 2.0;
                let cy = s / 2.0 + dy * t * s / 2.0;
                let mut px = vec![0.05f32; size * size * 3];
                for y in 0..size {
                    for x in 0..size {
                        let (u, v) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                        let inside = match self.shape {
                            Shape::Square => u.abs() <= radius && v.abs() <= radius,
                            Shape::Circle => u * u + v * v <= radius * radius,
                        };
                        if inside {
                            px[(y * size + x) * 3..][..3].copy_from_slice(&rgb);
                        }
                    }
                }
                FrameTensor::new(px, size, size, 3, f)
            })
            .collect()
    }

    /// Instruction/response pairs answerable from this scene.
    pub fn instructions(&self) -> Vec<(String, String)> {
        let noun = if self.motion.is_some() { "video" } else { "image" };
        let mut out = vec![
            (format!("describe the {noun}"), self.caption()),
            ("what color is the shape?".into(), format!("the shape is {}", self.color.word())),
            ("what shape is it?".into(), format!("it is a {}", self.shape.word())),
        ];
        if let Some(m) = self.motion {
            let resp = match m {
                Motion::Static => "it stays still".into(),
                m => format!("it moves {}", m.word()),
            };
            out.push(("which way does it move?".into(), resp));
        }
        out
    }
}

impl ToneScene {
    pub fn caption(&self) -> String {
        format!("a {} tone", self.contour.word())
    }

    pub fn parse_caption(s: &str) -> Option<Contour> {
        let w = s.strip_prefix("a ")?.strip_suffix(" tone")?;
        CONTOURS.iter().copied().find(|c| c.word() == w)
    }

    pub fn keywords(&self) -> String {
        self.contour.word().into()
    }

    /// Instantaneous frequency at `t` seconds of a clip lasting `duration`.
    pub fn frequency_at(&self, t: f64, duration: f64) -> f64 {
        self.base_hz * libm::exp2(self.contour.octaves() * t / duration)
    }

    /// Phase-continuous sine following the contour, amplitude 0.5.
    pub fn render(&self, seconds: f64, sample_rate: u32) -> Result<Waveform> {
        let n = libm::round(seconds * sample_rate as f64) as usize;
        let dt = 1.0 / sample_rate as f64;
        let mut phase = 0.0f64;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            samples.push((0.5 * libm::sin(phase)) as f32);
            phase += 2.0 * core::f64::consts::PI * self.frequency_at(i as f64 * dt, seconds) * dt;
            phase = libm::fmod(phase, 2.0 * core::f64::consts::PI);
        }
        Waveform::new(samples, sample_rate)
    }

    pub fn instructions(&self) -> Vec<(String, String)> {
        let resp = match self.contour {
            Contour::Rising => "the pitch rises",
            Contour::Falling => "the pitch falls",
            Contour::Flat => "the pitch stays flat",
        };
        vec![("describe the sound".into(), self.caption()), ("what does the pitch do?".into(), resp.into())]
    }
}

impl SyntheticScene {
    pub fn caption(&self) -> String {
        match self {
            SyntheticScene::Visual(v) => v.caption(),
            SyntheticScene::Tone(t) => t.caption(),
        }
    }

    pub fn instructions(&self) -> Vec<(String, String)> {
        match self {
            SyntheticScene::Visual(v) => v.instructions(),
            SyntheticScene::Tone(t) => t.instructions(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Video,
    Image,
    Audio,
}

/// The `n` scenes for `(seed, kind)`. Visual scenes walk a seeded
/// permutation of the grammar so the first 30 (or 6) are distinct.
pub fn scenes(seed: u64, n: usize, kind: SceneKind) -> Vec<SyntheticScene> {
    let mut rng = RngState::new(seed);
    match kind {
        SceneKind::Video | SceneKind::Image => {
            let mut grid = if kind == SceneKind::Video { VisualScene::all_videos() } else { VisualScene::all_images() };
            rng.shuffle(&mut grid);
            (0..n).map(|i| SyntheticScene::Visual(grid[i % grid.len()])).collect()
        }
        SceneKind::Audio => (0..n)
            .map(|i| {
                let base_hz = libm::round(rng.uniform(300.0, 800.0));
                SyntheticScene::Tone(ToneScene { base_hz, contour: CONTOURS[i % 3] })
            })
            .collect(),
    }
}

/// Text-only corpus for pre-training the stand-in LM: every caption and
/// every instruction exchange of the grammar, with a media slot filled by
/// the scene's keywords (so the LM learns to read its context) or by
/// nothing. The slot positions carry no loss.
pub fn lm_corpus() -> Vec<(TokenSequence, TokenSequence, TokenSequence)> {
    let mut out = Vec::new();
    let tones = CONTOURS.map(|contour| ToneScene { base_hz: 440.0, contour });
    let mut items: Vec<(String, String, Vec<(String, String)>)> = Vec::new();
    for v in VisualScene::all_videos().into_iter().chain(VisualScene::all_images()) {
        items.push((v.keywords(), v.caption(), v.instructions()));
    }
    for t in tones {
        items.push((t.keywords(), t.caption(), t.instructions()));
    }
    for (kw, caption, instr) in items {
        let slot = TokenSequence::unmasked(encode_text(&kw));
        out.push((TokenSequence::default(), slot.clone(), TokenSequence::caption(&caption)));
        for (q, a) in instr {
            let (prefix, suffix) = chat_turn(&q, Some(&a));
            out.push((prefix, slot.clone(), suffix));
        }
    }
    out
}

pub const USER_TAG: &str = "USER: ";
pub const ASSISTANT_TAG: &str = "\nASSISTANT: ";

/// `BOS "USER: "` before the media slot, then
/// `instruction "\nASSISTANT: " response EOS` after it. Loss falls on the
/// response bytes and `EOS` only. Without a response the suffix ends at
/// the assistant tag, ready for generation.
pub fn chat_turn(instruction: &str, response: Option<&str>) -> (TokenSequence, TokenSequence) {
    let mut prefix_ids = vec![BOS];
    prefix_ids.extend(encode_text(USER_TAG));
    let prefix = TokenSequence::unmasked(prefix_ids);
    let mut ids = encode_text(instruction);
    ids.extend(encode_text(ASSISTANT_TAG));
    let mut mask = vec![false; ids.len()];
    if let Some(r) = response {
        let r = encode_text(r);
        mask.extend(core::iter::repeat_n(true, r.len() + 1));
        ids.extend(r);
        ids.push(EOS);
    }
    (prefix, TokenSequence { ids, loss_mask: mask })
}
