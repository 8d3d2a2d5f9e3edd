//! Line-delimited utterance manifests: one JSON record per line with an
//! id, a feature or audio path (relative to the manifest file), and the
//! transcript.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_logmel, FeatureMatrix, Waveform};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl Manifest {
    /// Parses a JSONL manifest; ids must be unique and every referenced
    /// file must exist next to the manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::data(
                    path.display().to_string(),
                    format!("line {}: {e}", lineno + 1),
                )
            })?;
            if !seen.insert(entry.id.clone()) {
                return Err(Error::data(
                    path.display().to_string(),
                    format!("line {}: duplicate id {:?}", lineno + 1, entry.id),
                ));
            }
            let referenced = match (&entry.features, &entry.audio) {
                (Some(f), _) => base_dir.join(f),
                (None, Some(a)) => base_dir.join(a),
                (None, None) => {
                    return Err(Error::data(
                        path.display().to_string(),
                        format!("line {}: entry has neither features nor audio", lineno + 1),
                    ))
                }
            };
            if !referenced.exists() {
                return Err(Error::data(
                    path.display().to_string(),
                    format!(
                        "line {}: referenced file {} does not exist",
                        lineno + 1,
                        referenced.display()
                    ),
                ));
            }
            entries.push(entry);
        }
        Ok(Manifest { entries, base_dir })
    }

    pub fn save(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
        let mut out = String::new();
        for e in entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads the features for an entry, extracting log-mel from WAV when
    /// the entry is audio-backed.
    pub fn load_features(&self, entry: &ManifestEntry) -> Result<FeatureMatrix> {
        match (&entry.features, &entry.audio) {
            (Some(f), _) => FeatureMatrix::load(&self.base_dir.join(f)),
            (None, Some(a)) => extract_logmel(&Waveform::read_wav(&self.base_dir.join(a))?),
            (None, None) => Err(Error::invalid(format!("entry {} has no data", entry.id))),
        }
    }
}
