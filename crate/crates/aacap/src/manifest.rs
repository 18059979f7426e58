//! JSON-lines manifests: an optional `{"refs_per_eval": k}` header followed by
//! one entry per line. Audio paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use aacap_core::dataset::{Manifest, ManifestEntry};

use crate::error::{CliError, CliResult, StageExt};
use crate::fsio;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    refs_per_eval: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
    /// Entries whose audio file does not exist.
    pub missing_audio: Vec<String>,
}

impl LoadedManifest {
    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.audio_path)
    }
}

pub fn parse_manifest(text: &str) -> CliResult<Manifest> {
    let stage = "load-manifest";
    let mut refs = None;
    let mut entries = Vec::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if let Ok(h) = serde_json::from_str::<Header>(line) {
                refs = Some(h.refs_per_eval);
                continue;
            }
        }
        let e: ManifestEntry =
            serde_json::from_str(line).map_err(|e| CliError::data(stage, format!("line {}: {e}", i + 1)))?;
        entries.push(e);
    }
    Manifest::new(refs, entries).stage(stage)
}

pub fn load_manifest(path: &Path) -> CliResult<LoadedManifest> {
    let manifest = parse_manifest(&fsio::read_text("load-manifest", path)?)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let missing_audio: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| !base_dir.join(&e.audio_path).is_file())
        .map(|e| e.id.clone())
        .collect();
    for id in &missing_audio {
        log::warn!("audio for `{id}` is missing");
    }
    Ok(LoadedManifest { manifest, base_dir, missing_audio })
}

pub fn render_manifest(m: &Manifest) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(k) = m.refs_per_eval {
        out.extend(fsio::jsonl(&[Header { refs_per_eval: k }])?);
    }
    out.extend(fsio::jsonl(&m.entries)?);
    Ok(out)
}

pub fn write_manifest(path: &Path, m: &Manifest) -> CliResult<()> {
    fsio::atomic_write(path, &render_manifest(m)?)
}
