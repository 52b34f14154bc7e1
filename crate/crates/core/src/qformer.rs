//! Trainable branches: temporal position tables, the Q-Former, and the
//! projection into the language model's embedding space.
//!
//! A branch adds row `p` of its position table to every vector of temporal
//! index `p`, flattens the result into one key/value sequence, lets a fixed
//! set of learned query tokens attend to it through the Q-Former, and maps
//! the query outputs to `d_llm`. The output length is the number of query
//! tokens regardless of how many frames or segments came in.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{AudioSegmentEmbeddings, VideoEmbedding};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Init, Real, Result, RngState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("a Q-Former needs at least one query".into()));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

/// Learnable `max_positions × width` lookup table.
#[derive(Debug, Clone)]
pub struct PositionTable {
    pub table: ParamId,
    pub max_positions: usize,
    pub width: usize,
}

impl PositionTable {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        max_positions: usize,
        width: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let table = store.init(&format!("{name}.table"), &[max_positions, width], Init::UniformScaled, rng, true)?;
        Ok(Self { table, max_positions, width })
    }

    /// Adds table row `p` to every vector under leading index `p` of `x`
    /// (`P × … × width`).
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let p = shape[0];
        if p > self.max_positions {
            return Err(Error::Capacity { requested: p, capacity: self.max_positions });
        }
        if *shape.last().unwrap() != self.width || shape.len() < 2 {
            return Err(Error::Shape(format!("position table width {} vs input {shape:?}", self.width)));
        }
        let table = tape.param(store, self.table);
        let rows = tape.slice(table, 0, 0, p)?;
        let mut bshape = alloc::vec![1; shape.len()];
        bshape[0] = p;
        bshape[shape.len() - 1] = self.width;
        let rows = tape.reshape(rows, &bshape)?;
        tape.add(x, rows)
    }
}

/// Post-norm layer: query self-attention, cross-attention to the inputs,
/// feed-forward; each with residual and layer norm.
#[derive(Debug, Clone)]
struct QFormerLayer {
    self_attn: MultiHeadAttention,
    ln_self: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ff: FeedForward,
    ln_ff: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct QFormer {
    pub cfg: QFormerConfig,
    pub query_tokens: ParamId,
    input_adapter: Option<Linear>,
    layers: Vec<QFormerLayer>,
    pub d_in: usize,
}

pub struct QFormerOutput {
    pub output: Var,
    /// Softmax matrices of every attention head, self and cross.
    pub attention: Vec<Var>,
}

impl QFormer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: QFormerConfig,
        d_in: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let query_tokens =
            store.init(&format!("{name}.query_tokens"), &[cfg.num_queries, d], Init::UniformScaled, rng, true)?;
        let input_adapter = if d_in != d {
            Some(Linear::new(store, &format!("{name}.input_adapter"), d_in, d, rng, true)?)
        } else {
            None
        };
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                Ok(QFormerLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), d, d, cfg.num_heads, rng, true)?,
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d, rng, true)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), d, d, cfg.num_heads, rng, true)?,
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d, rng, true)?,
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, cfg.d_ff, rng, true)?,
                    ln_ff: LayerNorm::new(store, &format!("{n}.ln_ff"), d, rng, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, query_tokens, input_adapter, layers, d_in })
    }

    /// `num_queries × d_model` from `L_in × d_in` inputs.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: Var) -> Result<QFormerOutput> {
        let s = tape.shape(inputs);
        if s.len() != 2 || s[1] != self.d_in {
            return Err(Error::Shape(format!("Q-Former expects L×{}, got {s:?}", self.d_in)));
        }
        let kv = match &self.input_adapter {
            Some(a) => a.forward(tape, store, inputs)?,
            None => inputs,
        };
        let mut q = tape.param(store, self.query_tokens);
        let mut attention = Vec::new();
        for l in &self.layers {
            let a = l.self_attn.forward(tape, store, q, q, false)?;
            attention.extend(a.weights);
            let h = tape.add(q, a.output)?;
            let h = l.ln_self.forward(tape, store, h)?;
            let c = l.cross_attn.forward(tape, store, h, kv, false)?;
            attention.extend(c.weights);
            let h2 = tape.add(h, c.output)?;
            let h2 = l.ln_cross.forward(tape, store, h2)?;
            let f = l.ff.forward(tape, store, h2)?;
            let h3 = tape.add(h2, f)?;
            q = l.ln_ff.forward(tape, store, h3)?;
        }
        Ok(QFormerOutput { output: q, attention })
    }
}

/// `L × d_llm` soft-prompt vectors produced by one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPromptSegment<T> {
    pub vectors: Tensor<T>,
    pub modality: Modality,
}

/// Position table, Q-Former and output projection of one modality.
#[derive(Debug, Clone)]
pub struct Branch {
    pub modality: Modality,
    pub positions: PositionTable,
    pub qformer: QFormer,
    pub proj: Linear,
}

impl Branch {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        modality: Modality,
        cfg: QFormerConfig,
        d_in: usize,
        max_positions: usize,
        d_llm: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let p = modality.prefix();
        Ok(Self {
            modality,
            positions: PositionTable::new(store, &format!("{p}_pos"), max_positions, d_in, rng)?,
            qformer: QFormer::new(store, &format!("{p}_qformer"), cfg, d_in, rng)?,
            proj: Linear::new(store, &format!("{p}_proj"), cfg.d_model, d_llm, rng, true)?,
        })
    }

    /// Name prefixes of every parameter the branch owns.
    pub fn param_prefixes(modality: Modality) -> [alloc::string::String; 3] {
        let p = modality.prefix();
        [format!("{p}_qformer."), format!("{p}_pos."), format!("{p}_proj.")]
    }

    pub fn owns(modality: Modality, name: &str) -> bool {
        Self::param_prefixes(modality).iter().any(|pre| name.starts_with(pre.as_str()))
    }

    /// `x` is `P × K × d_in` (video) or `P × d_in` (audio segments).
    pub fn forward_var<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, QFormerOutput)> {
        let x = self.positions.apply(tape, store, x)?;
        let s = tape.shape(x).to_vec();
        let rows: usize = s[..s.len() - 1].iter().product();
        let flat = if s.len() == 2 { x } else { tape.reshape(x, &[rows, s[s.len() - 1]])? };
        let q = self.qformer.forward(tape, store, flat)?;
        let out = self.proj.forward(tape, store, q.output)?;
        Ok((out, q))
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<SoftPromptSegment<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (out, _) = self.forward_var(&mut tape, store, xv)?;
        Ok(SoftPromptSegment { vectors: tape.tensor(out), modality: self.modality })
    }
}

pub fn video_branch_forward<T: Real>(
    branch: &Branch,
    store: &ParamStore<T>,
    v: &VideoEmbedding<T>,
) -> Result<SoftPromptSegment<T>> {
    branch.forward(store, &v.v)
}

pub fn audio_branch_forward<T: Real>(
    branch: &Branch,
    store: &ParamStore<T>,
    a: &AudioSegmentEmbeddings<T>,
) -> Result<SoftPromptSegment<T>> {
    branch.forward(store, &a.a)
}
