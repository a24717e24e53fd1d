//! JSON-Lines manifests.
//!
//! Required keys per line: `audio`, `text`, `speaker`, `lang`. Optional:
//! `emotion` (string) and `attrs` (object). Any other key is preserved in
//! `attributes` rather than rejected, so manifests can carry extra metadata
//! through the pipeline.

use crate::{Error, Result};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub text: String,
    pub speaker_id: String,
    pub language: String,
    pub emotion: Option<String>,
    pub attributes: BTreeMap<String, Value>,
    /// 1-based line number in the source file, for error reporting.
    pub line_no: usize,
}

impl ManifestEntry {
    /// Stable identifier: manifests have no explicit utterance id, so the
    /// audio path serves as one.
    pub fn utterance_id(&self) -> String {
        self.audio_path.to_string_lossy().into_owned()
    }
}

fn required_str(obj: &serde_json::Map<String, Value>, key: &str) -> Option<String> {
    obj.get(key).and_then(Value::as_str).map(str::to_owned)
}

/// Parse a JSON-Lines manifest. Paths are resolved relative to the manifest
/// file's directory. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        reason: format!("cannot read file: {e}"),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("malformed JSON: {e}"),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            reason: "line is not a JSON object".into(),
        })?;
        let missing = |key: &str| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("missing required key \"{key}\""),
        };
        let audio = required_str(obj, "audio").ok_or_else(|| missing("audio"))?;
        let text = required_str(obj, "text").ok_or_else(|| missing("text"))?;
        let speaker = required_str(obj, "speaker").ok_or_else(|| missing("speaker"))?;
        let lang = required_str(obj, "lang").ok_or_else(|| missing("lang"))?;
        if text.is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                reason: "\"text\" must be non-empty".into(),
            });
        }
        if speaker.is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: line_no,
                reason: "\"speaker\" must be non-empty".into(),
            });
        }
        let emotion = required_str(obj, "emotion");
        let mut attributes = BTreeMap::new();
        if let Some(attrs) = obj.get("attrs").and_then(Value::as_object) {
            for (k, v) in attrs {
                attributes.insert(k.clone(), v.clone());
            }
        }
        for (k, v) in obj {
            if !matches!(k.as_str(), "audio" | "text" | "speaker" | "lang" | "emotion" | "attrs") {
                attributes.insert(k.clone(), v.clone());
            }
        }
        entries.push(ManifestEntry {
            audio_path: base.join(audio),
            text,
            speaker_id: speaker,
            language: lang,
            emotion,
            attributes,
            line_no,
        });
    }
    Ok(entries)
}
