//! Checkpoint directories: `metadata.json`, `vocab.json`, and one raw
//! little-endian f32 file per tensor under `tensors/`.
//!
//! Values are stored in single precision, so a reloaded model equals the
//! in-memory one rounded to f32.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use aacap_core::captioner::{Captioner, CaptionerConfig};
use aacap_core::clap::{ClapConfig, ClapModel};
use aacap_core::dataset::Vocab;
use aacap_core::nn::Params;
use aacap_core::Rng;

use crate::error::{CliError, CliResult, StageExt};
use crate::fsio;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata<C> {
    pub format_version: u32,
    pub kind: String,
    pub config: C,
    pub step: usize,
    pub valid_loss: f64,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> CliResult<()> {
    fsio::atomic_write(path, &fsio::pretty_json(&VocabFile { tokens: vocab.tokens().to_vec() })?)
}

pub fn load_vocab(path: &Path) -> CliResult<Vocab> {
    let f: VocabFile = serde_json::from_str(&fsio::read_text("load-vocab", path)?)
        .map_err(|e| CliError::data("load-vocab", format!("{}: {e}", path.display())))?;
    Vocab::from_tokens(f.tokens).stage("load-vocab")
}

fn save<P: Params, C: Serialize>(dir: &Path, kind: &str, model: &P, config: &C, vocab: &Vocab, step: usize, valid_loss: f64) -> CliResult<()> {
    fsio::atomic_dir(dir, |tmp| {
        let mut tensors = Vec::new();
        for (i, (name, t)) in model.named_params().into_iter().enumerate() {
            let file = format!("tensors/{i:04}_{name}.f32");
            let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            fsio::atomic_write(&tmp.join(&file), &bytes)?;
            tensors.push(TensorRecord { name, shape: t.shape().to_vec(), file });
        }
        let meta = Metadata { format_version: FORMAT_VERSION, kind: kind.to_string(), config, step, valid_loss, tensors };
        fsio::atomic_write(&tmp.join("metadata.json"), &fsio::pretty_json(&meta)?)?;
        save_vocab(&tmp.join("vocab.json"), vocab)
    })
}

fn load_into<P: Params>(dir: &Path, model: &mut P, records: &[TensorRecord]) -> CliResult<()> {
    let stage = "load-checkpoint";
    let mut params = model.named_params_mut();
    if params.len() != records.len() {
        return Err(CliError::data(stage, format!("checkpoint has {} tensors, model expects {}", records.len(), params.len())));
    }
    for ((name, t), rec) in params.iter_mut().zip(records) {
        if *name != rec.name || t.shape() != rec.shape.as_slice() {
            return Err(CliError::data(stage, format!("tensor `{}` {:?} does not match model `{name}` {:?}", rec.name, rec.shape, t.shape())));
        }
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| CliError::io(stage, &path, e))?;
        if bytes.len() != 4 * t.len() {
            return Err(CliError::data(stage, format!("{}: expected {} bytes, found {}", path.display(), 4 * t.len(), bytes.len())));
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    Ok(())
}

fn read_meta<C: DeserializeOwned>(dir: &Path, kind: &str) -> CliResult<Metadata<C>> {
    let path = dir.join("metadata.json");
    let meta: Metadata<C> = serde_json::from_str(&fsio::read_text("load-checkpoint", &path)?)
        .map_err(|e| CliError::data("load-checkpoint", format!("{}: {e}", path.display())))?;
    if meta.kind != kind || meta.format_version != FORMAT_VERSION {
        return Err(CliError::data("load-checkpoint", format!("{} holds a `{}` v{} checkpoint, expected `{kind}` v{FORMAT_VERSION}", dir.display(), meta.kind, meta.format_version)));
    }
    Ok(meta)
}

pub struct Loaded<M> {
    pub model: M,
    pub vocab: Vocab,
    pub step: usize,
    pub valid_loss: f64,
}

pub fn save_captioner(dir: &Path, model: &Captioner, vocab: &Vocab, step: usize, valid_loss: f64) -> CliResult<()> {
    save(dir, "captioner", model, &model.config, vocab, step, valid_loss)
}

pub fn load_captioner(dir: &Path) -> CliResult<Loaded<Captioner>> {
    let meta: Metadata<CaptionerConfig> = read_meta(dir, "captioner")?;
    let mut model = Captioner::new(meta.config, &Rng::new(0)).stage("load-checkpoint")?;
    load_into(dir, &mut model, &meta.tensors)?;
    Ok(Loaded { model, vocab: load_vocab(&dir.join("vocab.json"))?, step: meta.step, valid_loss: meta.valid_loss })
}

pub fn save_clap(dir: &Path, model: &ClapModel, vocab: &Vocab, step: usize, valid_loss: f64) -> CliResult<()> {
    save(dir, "clap", model, &model.config, vocab, step, valid_loss)
}

pub fn load_clap(dir: &Path) -> CliResult<Loaded<ClapModel>> {
    let meta: Metadata<ClapConfig> = read_meta(dir, "clap")?;
    let mut model = ClapModel::new(meta.config, &Rng::new(0)).stage("load-checkpoint")?;
    load_into(dir, &mut model, &meta.tensors)?;
    Ok(Loaded { model, vocab: load_vocab(&dir.join("vocab.json"))?, step: meta.step, valid_loss: meta.valid_loss })
}
