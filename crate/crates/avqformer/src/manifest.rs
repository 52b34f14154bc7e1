//! JSONL dataset manifests.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MediaModality {
    Video,
    Image,
    Audio,
}

impl MediaModality {
    pub fn as_str(self) -> &'static str {
        match self {
            MediaModality::Video => "video",
            MediaModality::Image => "image",
            MediaModality::Audio => "audio",
        }
    }

    pub fn is_visual(self) -> bool {
        self != MediaModality::Audio
    }
}

impl FromStr for MediaModality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(MediaModality::Video),
            "image" => Ok(MediaModality::Image),
            "audio" => Ok(MediaModality::Audio),
            other => Err(Error::Schema(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for MediaModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordBody {
    Caption { caption: String },
    Instruction { instruction: String, response: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub media_path: String,
    pub modality: MediaModality,
    pub body: RecordBody,
}

impl ManifestRecord {
    pub fn caption(&self) -> Option<&str> {
        match &self.body {
            RecordBody::Caption { caption } => Some(caption),
            RecordBody::Instruction { .. } => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            RecordBody::Caption { .. } => "caption",
            RecordBody::Instruction { .. } => "instruction",
        }
    }
}

/// On-disk shape of one line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    media_path: String,
    modality: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
}

impl TryFrom<Line> for ManifestRecord {
    type Error = Error;

    fn try_from(l: Line) -> Result<Self> {
        let modality = l.modality.parse()?;
        let body = match (l.kind.as_str(), l.caption, l.instruction, l.response) {
            ("caption", Some(caption), None, None) => RecordBody::Caption { caption },
            ("instruction", None, Some(instruction), Some(response)) => RecordBody::Instruction { instruction, response },
            ("caption" | "instruction", ..) => {
                return Err(Error::Schema(format!("record `{}` does not carry exactly the fields of kind {}", l.id, l.kind)))
            }
            (other, ..) => return Err(Error::Schema(format!("record `{}` has unknown kind `{other}`", l.id))),
        };
        if l.id.is_empty() {
            return Err(Error::Schema("empty record id".into()));
        }
        Ok(Self { id: l.id, media_path: l.media_path, modality, body })
    }
}

impl From<&ManifestRecord> for Line {
    fn from(r: &ManifestRecord) -> Self {
        let (caption, instruction, response) = match &r.body {
            RecordBody::Caption { caption } => (Some(caption.clone()), None, None),
            RecordBody::Instruction { instruction, response } => (None, Some(instruction.clone()), Some(response.clone())),
        };
        Line {
            id: r.id.clone(),
            media_path: r.media_path.clone(),
            modality: r.modality.as_str().into(),
            kind: r.kind().into(),
            caption,
            instruction,
            response,
        }
    }
}

/// Parses manifest text. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: Line = serde_json::from_str(line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        let rec = ManifestRecord::try_from(raw).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("line {}: {m}", i + 1)),
            other => other,
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Schema(format!("line {}: duplicate id `{}`", i + 1, rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn render_manifest(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&Line::from(r)).expect("manifest lines always serialize"));
        s.push('\n');
    }
    s
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(render_manifest(records).as_bytes()).map_err(|e| Error::io(path, e))
}
