//! Layers built from tape primitives. Parameters live in a [`ParamStore`];
//! a layer only remembers the ids of its tensors.

use alloc::format;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::{Error, Init, Real, Result, RngState, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: d_in × d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut RngState,
        trainable: bool,
    ) -> Result<Self> {
        let weight = store.init(&format!("{name}.weight"), &[d_in, d_out], Init::UniformScaled, rng, trainable)?;
        let bias = store.init(&format!("{name}.bias"), &[d_out], Init::Zeros, rng, trainable)?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        rng: &mut RngState,
        trainable: bool,
    ) -> Result<Self> {
        let gamma = store.init(&format!("{name}.gamma"), &[d], Init::Ones, rng, trainable)?;
        let beta = store.init(&format!("{name}.beta"), &[d], Init::Zeros, rng, trainable)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Attention output plus the per-head probability matrices.
pub struct AttentionOut {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
        rng: &mut RngState,
        trainable: bool,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng, trainable)?,
            key: Linear::new(store, &format!("{name}.key"), d_kv, d_model, rng, trainable)?,
            value: Linear::new(store, &format!("{name}.value"), d_kv, d_model, rng, trainable)?,
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng, trainable)?,
            heads,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        context: Var,
        causal: bool,
    ) -> Result<AttentionOut> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, context)?;
        let v = self.value.forward(tape, store, context)?;
        let d_model = self.query.d_out;
        let dh = d_model / self.heads;
        let scale = T::cast(1.0 / libm::sqrt(dh as f64));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let s = if causal { tape.causal_mask(s)? } else { s };
            let p = tape.softmax(s, 1)?;
            weights.push(p);
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let output = self.output.forward(tape, store, cat)?;
        Ok(AttentionOut { output, weights })
    }
}

/// Two-layer GELU perceptron.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut RngState,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, rng, trainable)?,
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, rng, trainable)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub causal: bool,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        causal: bool,
        rng: &mut RngState,
        trainable: bool,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d, rng, trainable)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, heads, rng, trainable)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d, rng, trainable)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d_ff, rng, trainable)?,
            causal,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, self.causal)?.output;
        let x = tape.add(x, a)?;
        let h = self.ln_ff.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, h)?;
        tape.add(x, f)
    }
}
