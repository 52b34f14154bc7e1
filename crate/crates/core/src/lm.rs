//! Tiny decoder-only language model, byte tokenizer, soft-prompt assembly,
//! caption loss and greedy decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::{LayerNorm, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::qformer::SoftPromptSegment;
use crate::{Error, Init, Real, Result, RngState, Tape, Tensor, Var};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB: usize = 259;

/// Byte-level tokenization: one id per UTF-8 byte.
pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

/// Inverse of [`encode_text`]; special tokens are dropped.
pub fn decode_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Token ids with a per-position flag selecting which ids are predicted
/// targets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, loss_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != loss_mask.len() {
            return Err(Error::Shape(format!("{} ids with {} mask flags", ids.len(), loss_mask.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= VOCAB) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
        }
        Ok(Self { ids, loss_mask })
    }

    /// Ids with no loss anywhere.
    pub fn unmasked(ids: Vec<u32>) -> Self {
        let n = ids.len();
        Self { ids, loss_mask: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn extend(&mut self, other: &TokenSequence) {
        self.ids.extend_from_slice(&other.ids);
        self.loss_mask.extend_from_slice(&other.loss_mask);
    }

    /// `BOS text EOS`, loss on the text bytes and on EOS.
    pub fn caption(text: &str) -> Self {
        let mut ids = vec![BOS];
        ids.extend(encode_text(text));
        ids.push(EOS);
        let mut mask = vec![true; ids.len()];
        mask[0] = false;
        Self { ids, loss_mask: mask }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_llm: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context: usize,
}

/// Pre-norm causal transformer with learned absolute positions and an
/// output head tied to the token embedding table.
#[derive(Debug, Clone)]
pub struct TinyCausalLM {
    pub cfg: LmConfig,
    pub tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
}

impl TinyCausalLM {
    pub const PREFIX: &'static str = "lm";

    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: LmConfig, rng: &mut RngState) -> Result<Self> {
        let p = Self::PREFIX;
        let tok_emb = store.init(&format!("{p}.tok_emb"), &[VOCAB, cfg.d_llm], Init::UniformScaled, rng, false)?;
        let pos_emb = store.init(&format!("{p}.pos_emb"), &[cfg.context, cfg.d_llm], Init::UniformScaled, rng, false)?;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("{p}.block{i}"), cfg.d_llm, cfg.heads, cfg.d_ff, true, rng, false))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, &format!("{p}.ln_f"), cfg.d_llm, rng, false)?;
        Ok(Self { cfg, tok_emb, pos_emb, blocks, ln_f })
    }

    pub fn embed_tokens<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[u32]) -> Result<Var> {
        let table = tape.param(store, self.tok_emb);
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.embedding(table, &ids)
    }

    /// Logits `L × VOCAB` for an `L × d_llm` embedding sequence.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, embeds: Var) -> Result<Var> {
        let s = tape.shape(embeds).to_vec();
        if s.len() != 2 || s[1] != self.cfg.d_llm {
            return Err(Error::Shape(format!("LM expects L×{}, got {s:?}", self.cfg.d_llm)));
        }
        let l = s[0];
        if l > self.cfg.context {
            return Err(Error::InvalidInput(format!("sequence of {l} exceeds context {}", self.cfg.context)));
        }
        let pos = tape.param(store, self.pos_emb);
        let pos = tape.slice(pos, 0, 0, l)?;
        let mut x = tape.add(embeds, pos)?;
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        let x = self.ln_f.forward(tape, store, x)?;
        let table = tape.param(store, self.tok_emb);
        let head = tape.transpose(table)?;
        tape.matmul(x, head)
    }

    /// Standalone forward over token ids.
    pub fn logits<T: Real>(&self, store: &ParamStore<T>, ids: &[u32]) -> Result<Tensor<T>> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty input sequence".into()));
        }
        let mut tape = Tape::new();
        let e = self.embed_tokens(&mut tape, store, ids)?;
        let y = self.forward(&mut tape, store, e)?;
        Ok(tape.tensor(y))
    }
}

/// Where soft-prompt segments go relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentOrder {
    #[default]
    VideoFirst,
    AudioFirst,
}

/// Text with a media slot: `prefix ; segments ; suffix`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptText {
    pub prefix: TokenSequence,
    pub suffix: TokenSequence,
}

impl PromptText {
    pub fn after_media(suffix: TokenSequence) -> Self {
        Self { prefix: TokenSequence::default(), suffix }
    }
}

/// Concatenates `prefix text ; segments ; suffix text` into one embedding
/// sequence. Soft-prompt positions get id `PAD` and a false loss flag.
pub fn assemble_prompt<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    lm: &TinyCausalLM,
    text: &PromptText,
    segments: &[Var],
) -> Result<(Var, TokenSequence)> {
    let mut parts = Vec::new();
    let mut seq = TokenSequence::default();
    if !text.prefix.is_empty() {
        parts.push(lm.embed_tokens(tape, store, &text.prefix.ids)?);
        seq.extend(&text.prefix);
    }
    for &s in segments {
        let shape = tape.shape(s);
        if shape.len() != 2 || shape[1] != lm.cfg.d_llm {
            return Err(Error::Shape(format!("soft prompt {shape:?} does not have width {}", lm.cfg.d_llm)));
        }
        let n = shape[0];
        parts.push(s);
        seq.extend(&TokenSequence::unmasked(vec![PAD; n]));
    }
    if !text.suffix.is_empty() {
        parts.push(lm.embed_tokens(tape, store, &text.suffix.ids)?);
        seq.extend(&text.suffix);
    }
    let embeds = match parts.len() {
        0 => return Err(Error::InvalidInput("empty prompt".into())),
        1 => parts[0],
        _ => tape.concat(&parts, 0)?,
    };
    Ok((embeds, seq))
}

/// `[video ; audio ; text]` (or audio first) embedding sequence.
#[allow(clippy::too_many_arguments)]
pub fn build_soft_prompt<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    lm: &TinyCausalLM,
    video: Option<Var>,
    audio: Option<Var>,
    text: &TokenSequence,
    order: SegmentOrder,
) -> Result<(Var, TokenSequence)> {
    let segs: Vec<Var> = match order {
        SegmentOrder::VideoFirst => video.into_iter().chain(audio).collect(),
        SegmentOrder::AudioFirst => audio.into_iter().chain(video).collect(),
    };
    assemble_prompt(tape, store, lm, &PromptText::after_media(text.clone()), &segs)
}

/// Mean next-token cross-entropy: logits row `t` predicts `ids[t + 1]`
/// wherever `loss_mask[t + 1]` is set.
pub fn caption_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &TokenSequence) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if rows != targets.len() {
        return Err(Error::Shape(format!("{rows} logit rows for {} targets", targets.len())));
    }
    let shifted: Vec<Option<usize>> = (0..rows)
        .map(|t| match (targets.ids.get(t + 1), targets.loss_mask.get(t + 1)) {
            (Some(&id), Some(true)) => Some(id as usize),
            _ => None,
        })
        .collect();
    tape.cross_entropy(logits, &shifted)
}

/// Media soft prompt plus surrounding text, with concrete segment values.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt<T> {
    pub prefix: Vec<u32>,
    pub segments: Vec<SoftPromptSegment<T>>,
    pub text: Vec<u32>,
}

impl<T: Real> SoftPrompt<T> {
    pub fn text_only(text: Vec<u32>) -> Self {
        Self { prefix: Vec::new(), segments: Vec::new(), text }
    }

    pub fn len(&self) -> usize {
        self.prefix.len() + self.segments.iter().map(|s| s.vectors.shape()[0]).sum::<usize>() + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Logits for a concrete soft prompt followed by `extra` generated ids.
pub fn prompt_logits<T: Real>(
    store: &ParamStore<T>,
    lm: &TinyCausalLM,
    prompt: &SoftPrompt<T>,
    extra: &[u32],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let segs: Vec<Var> = prompt.segments.iter().map(|s| tape.constant(&s.vectors)).collect();
    let mut suffix = prompt.text.clone();
    suffix.extend_from_slice(extra);
    let text = PromptText {
        prefix: TokenSequence::unmasked(prompt.prefix.clone()),
        suffix: TokenSequence::unmasked(suffix),
    };
    let (e, _) = assemble_prompt(&mut tape, store, lm, &text, &segs)?;
    let y = lm.forward(&mut tape, store, e)?;
    Ok(tape.tensor(y))
}

/// Argmax decoding until `EOS`, `max_len` new tokens, or the context limit.
/// The returned ids exclude `EOS`.
pub fn generate_greedy<T: Real>(
    store: &ParamStore<T>,
    lm: &TinyCausalLM,
    prompt: &SoftPrompt<T>,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(Error::InvalidCount("max_len must be at least 1".into()));
    }
    let mut out = Vec::new();
    while out.len() < max_len && prompt.len() + out.len() < lm.cfg.context {
        let logits = prompt_logits(store, lm, prompt, &out)?;
        let last = &logits.data()[logits.len() - VOCAB..];
        let next = last
            .iter()
            .enumerate()
            .fold((0usize, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0 as u32;
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(TokenSequence::unmasked(out))
}
