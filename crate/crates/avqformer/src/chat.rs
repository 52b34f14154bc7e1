//! Line-oriented chat over a trained checkpoint.

use std::io::{BufRead, Write};
use std::path::Path;

use avqf_core::lm::{decode_text, encode_text, SoftPrompt};
use avqf_core::model::{Media, Model};
use avqf_core::params::ParamStore;
use avqf_core::qformer::Modality;
use avqf_core::synth::{ASSISTANT_TAG, USER_TAG};

use crate::dataset::{load_media_file, sniff_modality};
use crate::pipeline::{branch_for, encode_media};
use crate::{Error, Result};

pub struct ChatSession<'a> {
    model: &'a Model,
    store: &'a ParamStore<f32>,
    media: Vec<(Modality, Media)>,
    /// Completed turns, each `instruction ASSISTANT_TAG reply "\nUSER: "`.
    turns: Vec<Vec<u32>>,
    pub max_len: usize,
    /// Present visual media to the audio branch as well.
    pub joint: bool,
}

impl<'a> ChatSession<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore<f32>) -> Self {
        Self { model, store, media: Vec::new(), turns: Vec::new(), max_len: 64, joint: false }
    }

    /// Loads and encodes a media file, replacing any previous media and
    /// clearing the conversation.
    pub fn set_media(&mut self, path: &Path) -> Result<()> {
        let modality = sniff_modality(path)?;
        let media = encode_media(self.model, self.store, load_media_file(path, modality, &self.model.cfg)?)?;
        let m = branch_for(modality);
        self.media = vec![(m, media.clone())];
        if self.joint && m == Modality::Video {
            self.media.push((Modality::Audio, media));
        }
        self.turns.clear();
        Ok(())
    }

    pub fn clear_media(&mut self) {
        self.media.clear();
        self.turns.clear();
    }

    fn prompt_for(&self, instruction: &str) -> Result<SoftPrompt<f32>> {
        let segs = self
            .media
            .iter()
            .map(|(m, media)| self.model.segment(self.store, *m, media))
            .collect::<avqf_core::Result<Vec<_>>>()?;
        let mut prefix = vec![avqf_core::lm::BOS];
        prefix.extend(encode_text(USER_TAG));
        let mut text: Vec<u32> = self.turns.iter().flatten().copied().collect();
        text.extend(encode_text(instruction));
        text.extend(encode_text(ASSISTANT_TAG));
        Ok(SoftPrompt { prefix, segments: self.model.order_segments(segs), text })
    }

    /// Greedy reply to one user line. Old turns are dropped when the
    /// prompt plus reply budget would overflow the LM context.
    pub fn reply(&mut self, instruction: &str) -> Result<String> {
        let context = self.model.lm.cfg.context;
        let mut prompt = self.prompt_for(instruction)?;
        while prompt.len() + self.max_len > context && !self.turns.is_empty() {
            self.turns.remove(0);
            prompt = self.prompt_for(instruction)?;
        }
        if prompt.len() >= context {
            return Err(Error::Config(format!("message of {} tokens does not fit the {context}-token context", prompt.len())));
        }
        let out = avqf_core::lm::generate_greedy(self.store, &self.model.lm, &prompt, self.max_len)?;
        let reply = decode_text(&out.ids);
        let mut turn = encode_text(instruction);
        turn.extend(encode_text(ASSISTANT_TAG));
        turn.extend(&out.ids);
        turn.extend(encode_text("\n"));
        turn.extend(encode_text(USER_TAG));
        self.turns.push(turn);
        Ok(reply)
    }
}

/// Reads user lines until EOF or `/quit`. `/media <path>` switches media,
/// `/nomedia` drops it. Errors are reported and the session continues.
pub fn run_repl(session: &mut ChatSession<'_>, input: impl BufRead, mut out: impl Write) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line == "/quit" {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        if let Some(path) = line.strip_prefix("/media ") {
            match session.set_media(Path::new(path.trim())) {
                Ok(()) => writeln!(out, "[media loaded: {}]", path.trim())?,
                Err(e) => writeln!(out, "error: {e}")?,
            }
            continue;
        }
        if line == "/nomedia" {
            session.clear_media();
            writeln!(out, "[media cleared]")?;
            continue;
        }
        match session.reply(line) {
            Ok(r) => writeln!(out, "{r}")?,
            Err(e) => writeln!(out, "error: {e}")?,
        }
        out.flush()?;
    }
    Ok(())
}
