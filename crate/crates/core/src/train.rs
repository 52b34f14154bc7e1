//! Training steps for the branches and for the stand-in LM.

use alloc::format;
use alloc::vec::Vec;

use crate::lm::{caption_loss, TinyCausalLM, TokenSequence};
use crate::model::{is_permanently_frozen, Example, Model};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::qformer::{Branch, Modality};
use crate::{Error, Real, Result, RngState, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Marks exactly the parameters of branch `m` as trainable.
pub fn activate_branch<T: Real>(store: &mut ParamStore<T>, m: Modality) {
    store.set_trainable(|n| Branch::owns(m, n));
}

/// Errors unless the trainable set is exactly branch `m`'s parameters.
pub fn check_partition<T: Real>(store: &ParamStore<T>, m: Modality) -> Result<()> {
    for (_, name, t) in store.iter() {
        let should = Branch::owns(m, name);
        if t.requires_grad() != should {
            return Err(Error::Partition(format!(
                "{name} is {} while training the {} branch",
                if t.requires_grad() { "trainable" } else { "frozen" },
                m.prefix()
            )));
        }
        if should && is_permanently_frozen(name) {
            return Err(Error::Partition(format!("{name} belongs to a frozen component")));
        }
    }
    Ok(())
}

/// One optimizer step of branch `m` on `batch`: forward, zero grads,
/// backward, clip, AdamW. Only trainable parameters move.
pub fn training_step<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    opt: &mut AdamW,
    m: Modality,
    batch: &[Example],
    lr: f64,
) -> Result<StepStats> {
    check_partition(store, m)?;
    opt.check_matches(store)?;
    let step = opt.steps_taken() + 1;
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, store, m, batch)?;
    let value = tape.scalar(loss)?.as_f64();
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    store.zero_grads();
    tape.backward(loss, store)?;
    let grad_norm = match opt.cfg.clip_norm {
        Some(c) => clip_grad_norm(store, c),
        None => crate::optim::grad_norm(store),
    };
    opt.step(store, lr)?;
    Ok(StepStats { step, loss: value, grad_norm, lr })
}

/// A text-only training sequence for the LM, with a media slot filled by
/// token ids instead of soft-prompt vectors.
pub fn lm_sequence(prefix: &TokenSequence, slot: &TokenSequence, suffix: &TokenSequence) -> TokenSequence {
    let mut s = prefix.clone();
    s.extend(slot);
    s.extend(suffix);
    s
}

/// Mean caption loss of the LM over token sequences.
pub fn lm_loss<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, lm: &TinyCausalLM, batch: &[TokenSequence]) -> Result<crate::Var> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for seq in batch {
        let e = lm.embed_tokens(tape, store, &seq.ids)?;
        let logits = lm.forward(tape, store, e)?;
        losses.push(caption_loss(tape, logits, seq)?);
    }
    let all = if losses.len() == 1 { losses[0] } else { tape.concat(&losses, 0)? };
    Ok(tape.mean(all))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, optim: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() }, seed: 0 }
    }
}

/// Pre-trains the LM on `(prefix, slot, suffix)` text triples, then freezes
/// it again. Each draw keeps the slot, blanks it, or replaces it with
/// random bytes, so the LM sees content of varying length and relevance
/// before the caption. Returns the per-step losses.
pub fn pretrain_lm<T: Real>(
    lm: &TinyCausalLM,
    store: &mut ParamStore<T>,
    corpus: &[(TokenSequence, TokenSequence, TokenSequence)],
    cfg: &LmPretrainConfig,
    mut on_step: impl FnMut(&StepStats),
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty LM corpus".into()));
    }
    let prefix = alloc::format!("{}.", TinyCausalLM::PREFIX);
    store.set_trainable(|n| n.starts_with(&prefix));
    let mut opt = AdamW::new(cfg.optim, store)?;
    let mut rng = RngState::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let result = (|| {
        for step in 0..cfg.steps {
            let batch: Vec<TokenSequence> = (0..cfg.batch_size)
                .map(|_| {
                    let (p, slot, s) = &corpus[rng.below(corpus.len())];
                    let slot = match rng.below(5) {
                        0 => TokenSequence::default(),
                        1 => TokenSequence::unmasked((0..1 + rng.below(12)).map(|_| rng.below(256) as u32).collect()),
                        _ => slot.clone(),
                    };
                    lm_sequence(p, &slot, s)
                })
                .collect();
            let lr = crate::optim::cosine_lr(cfg.optim.lr, step, cfg.steps);
            let mut tape = Tape::new();
            let loss = lm_loss(&mut tape, store, lm, &batch)?;
            let value = tape.scalar(loss)?.as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence { step: step + 1, loss: value });
            }
            store.zero_grads();
            tape.backward(loss, store)?;
            let grad_norm = match cfg.optim.clip_norm {
                Some(c) => clip_grad_norm(store, c),
                None => crate::optim::grad_norm(store),
            };
            opt.step(store, lr)?;
            losses.push(value);
            on_step(&StepStats { step: step + 1, loss: value, grad_norm, lr });
        }
        Ok(())
    })();
    store.zero_grads();
    store.set_trainable(|_| false);
    result.map(|()| losses)
}
