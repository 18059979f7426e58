//! Subcommand implementations. Each reads its inputs from the output
//! directory (or explicit paths) and writes its artefacts atomically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use aacap_core::captioner::{Captioner, CaptionerConfig};
use aacap_core::clap::{ClapConfig, ClapModel};
use aacap_core::dataset::{build_vocab, normalize_tokens, Manifest, ManifestEntry, Split, Vocab};
use aacap_core::decoding::{oracle_select, Candidate, CandidateSet};
use aacap_core::frontend::log_mel;
use aacap_core::metrics::{evaluate_corpus, fense, EvalItem, EvaluationReport, HeuristicFluency, NoSpice, Providers};
use aacap_core::pipeline::{self, ClapTextEmbedder, ClipInput};
use aacap_core::synth::generate_corpus;
use aacap_core::{augment, train, Rng};

use crate::checkpoint::{self, Loaded};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, StageExt};
use crate::manifest::{load_manifest, write_manifest, LoadedManifest};
use crate::report::{build_table, render_text, ComparisonTable};
use crate::translate::client_from_config;
use crate::{fsio, wav};

/// Synthetic corpora carry this many references per eval clip.
pub const SYNTH_REFS_PER_EVAL: usize = 5;

pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.jsonl")
    }
    pub fn captioner_dir(&self) -> PathBuf {
        self.out.join("captioner")
    }
    pub fn clap_dir(&self) -> PathBuf {
        self.out.join("clap")
    }
    pub fn candidates_path(&self) -> PathBuf {
        self.out.join("candidates.jsonl")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Beam,
    Nucleus,
    ClapRefine,
}

/// One line of the candidate dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub id: String,
    pub candidates: Vec<Candidate>,
    pub chosen: String,
}

fn ensure_out(ctx: &Context) -> CliResult<()> {
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::io("output", &ctx.out, e))
}

/// Writes a synthetic corpus as 16 kHz WAV files plus a manifest.
pub fn prepare_synthetic(ctx: &Context, n_train: usize, n_valid: usize, n_eval: usize) -> CliResult<Manifest> {
    let stage = "prepare";
    if n_train == 0 || n_valid == 0 || n_eval == 0 {
        return Err(CliError::config(stage, "every split needs at least one clip"));
    }
    ensure_out(ctx)?;
    let audio_dir = ctx.out.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| CliError::io(stage, &audio_dir, e))?;
    let mut entries = Vec::new();
    for item in generate_corpus(n_train, n_valid, n_eval, ctx.cfg.seed) {
        let rel = format!("audio/{}.wav", item.id);
        wav::write_wav(&ctx.out.join(&rel), &item.clip)?;
        entries.push(ManifestEntry { id: item.id, audio_path: rel, captions: item.captions, split: item.split });
    }
    let manifest = Manifest::new(Some(SYNTH_REFS_PER_EVAL), entries).stage(stage)?;
    write_manifest(&ctx.manifest_path(), &manifest)?;
    log::info!("wrote {} clips to {}", manifest.entries.len(), ctx.out.display());
    Ok(manifest)
}

/// Validates an existing manifest and writes its training vocabulary.
pub fn prepare_existing(ctx: &Context, path: &Path) -> CliResult<Vocab> {
    let loaded = load_manifest(path)?;
    if !loaded.missing_audio.is_empty() {
        return Err(CliError::data("prepare", format!("{} entries have no audio file", loaded.missing_audio.len())));
    }
    ensure_out(ctx)?;
    let vocab = training_vocab(&ctx.cfg, &loaded.manifest)?;
    checkpoint::save_vocab(&ctx.out.join("vocab.json"), &vocab)?;
    Ok(vocab)
}

fn training_vocab(cfg: &PipelineConfig, manifest: &Manifest) -> CliResult<Vocab> {
    let mut vocab = build_vocab(manifest, cfg.data.vocab_min_count).stage("vocab")?;
    for w in normalize_tokens(&cfg.captioner.prompt) {
        vocab.insert(&w);
    }
    Ok(vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentSummary {
    pub pairs: usize,
    pub skipped: usize,
    pub stats: augment::VocabStats,
}

/// Back-translates every training caption; writes the augmented manifest next to the input.
pub fn augment(ctx: &Context, manifest_path: &Path) -> CliResult<AugmentSummary> {
    let stage = "augment";
    let loaded = load_manifest(manifest_path)?;
    let client = client_from_config(&ctx.cfg.augment, ctx.cfg.seed)?;
    let a = &ctx.cfg.augment;
    let outcome = augment::augment_manifest(&loaded.manifest, client.as_ref(), &a.pivot_lang, a.max_attempts)
        .map_err(|e| CliError::runtime(stage, e))?;
    let stats = augment::vocab_stats(&loaded.manifest, &outcome.manifest).stage(stage)?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    write_manifest(&dir.join("manifest.augmented.jsonl"), &outcome.manifest)?;
    fsio::atomic_write(&dir.join("paraphrases.jsonl"), &fsio::jsonl(&outcome.pairs)?)?;
    fsio::atomic_write(&dir.join("augment_skipped.jsonl"), &fsio::jsonl(&outcome.skipped)?)?;
    fsio::atomic_write(&dir.join("vocab_stats.json"), &fsio::pretty_json(&stats)?)?;
    for s in &outcome.skipped {
        log::warn!("skipped `{}`: {}", s.caption, s.error);
    }
    Ok(AugmentSummary { pairs: outcome.pairs.len(), skipped: outcome.skipped.len(), stats })
}

/// Decodes the audio of every entry in `split`.
pub fn load_clips(loaded: &LoadedManifest, split: Split) -> CliResult<Vec<ClipInput>> {
    let stage = "load-audio";
    loaded
        .manifest
        .split(split)
        .map(|e| {
            let clip = wav::read_wav(&loaded.audio_path(e))?;
            Ok(ClipInput { id: e.id.clone(), mel: log_mel(&clip).stage(stage)?, captions: e.captions.clone() })
        })
        .collect()
}

fn manifest_for(ctx: &Context, path: Option<&Path>) -> CliResult<LoadedManifest> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| ctx.manifest_path());
    let loaded = load_manifest(&path)?;
    if !loaded.missing_audio.is_empty() {
        return Err(CliError::data("load-manifest", format!("missing audio for {:?}", loaded.missing_audio)));
    }
    Ok(loaded)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub final_train_loss: f64,
}

fn summary<M>(o: &train::TrainOutcome<M>) -> TrainSummary {
    TrainSummary {
        best_step: o.best_step,
        best_valid_loss: o.best_valid_loss,
        final_train_loss: o.train_losses.last().copied().unwrap_or(f64::NAN),
    }
}

/// Trains the captioner and keeps the checkpoint with the lowest validation loss.
pub fn train_captioner(ctx: &Context, manifest: Option<&Path>) -> CliResult<TrainSummary> {
    let stage = "train";
    let loaded = manifest_for(ctx, manifest)?;
    let vocab = training_vocab(&ctx.cfg, &loaded.manifest)?;
    let config = CaptionerConfig { vocab_size: vocab.len(), ..ctx.cfg.captioner.clone() };
    let model = Captioner::new(config, &Rng::new(ctx.cfg.seed).split(100)).map_err(|e| CliError::config(stage, e))?;
    let train_ex = pipeline::caption_examples(&model, &vocab, &load_clips(&loaded, Split::Train)?).stage(stage)?;
    let valid_ex = pipeline::caption_examples(&model, &vocab, &load_clips(&loaded, Split::Valid)?).stage(stage)?;
    let schedule = ctx.cfg.captioner_schedule();
    let outcome = train::train_captioner(&model, &schedule, &model.prompt_ids(&vocab), &train_ex, &valid_ex)
        .map_err(|e| CliError::runtime(stage, e))?;
    ensure_out(ctx)?;
    checkpoint::save_captioner(&ctx.captioner_dir(), &outcome.best, &vocab, outcome.best_step, outcome.best_valid_loss)?;
    fsio::atomic_write(&ctx.out.join("captioner_log.jsonl"), &fsio::jsonl(&outcome.log)?)?;
    Ok(summary(&outcome))
}

/// Trains the contrastive audio-text model used for reranking and FENSE.
pub fn train_clap(ctx: &Context, manifest: Option<&Path>) -> CliResult<TrainSummary> {
    let stage = "train-clap";
    let loaded = manifest_for(ctx, manifest)?;
    let vocab = build_vocab(&loaded.manifest, ctx.cfg.data.vocab_min_count).stage(stage)?;
    let config = ClapConfig { vocab_size: vocab.len(), ..ctx.cfg.clap.clone() };
    let model = ClapModel::new(config, &Rng::new(ctx.cfg.seed).split(200)).map_err(|e| CliError::config(stage, e))?;
    let train_ex = pipeline::clap_examples(&model, &vocab, &load_clips(&loaded, Split::Train)?).stage(stage)?;
    let valid_ex = pipeline::clap_examples(&model, &vocab, &load_clips(&loaded, Split::Valid)?).stage(stage)?;
    let probe = ctx.cfg.clap_schedule(1);
    let steps_per_epoch = train_ex.len().div_ceil(probe.batch_size.max(1)).max(1);
    let schedule = ctx.cfg.clap_schedule(steps_per_epoch);
    let outcome = train::train_clap(&model, &schedule, &train_ex, &valid_ex).map_err(|e| CliError::runtime(stage, e))?;
    ensure_out(ctx)?;
    checkpoint::save_clap(&ctx.clap_dir(), &outcome.best, &vocab, outcome.best_step, outcome.best_valid_loss)?;
    fsio::atomic_write(&ctx.out.join("clap_log.jsonl"), &fsio::jsonl(&outcome.log)?)?;
    Ok(summary(&outcome))
}

fn load_clap_optional(ctx: &Context) -> CliResult<Option<Loaded<ClapModel>>> {
    if ctx.clap_dir().join("metadata.json").is_file() {
        checkpoint::load_clap(&ctx.clap_dir()).map(Some)
    } else {
        Ok(None)
    }
}

/// Stream of the nucleus sampler for the `index`-th clip.
fn nucleus_rng(seed: u64, index: usize) -> Rng {
    Rng::new(seed).split(300 + index as u64)
}

/// Generates captions for every clip of `split` and writes the candidate dump.
pub fn infer(ctx: &Context, manifest: Option<&Path>, split: Split, strategy: Strategy, dump: Option<&Path>) -> CliResult<Vec<CandidateRecord>> {
    let stage = "infer";
    let loaded = manifest_for(ctx, manifest)?;
    let cap = checkpoint::load_captioner(&ctx.captioner_dir())?;
    let clap = match strategy {
        Strategy::ClapRefine => Some(
            load_clap_optional(ctx)?
                .ok_or_else(|| CliError::config(stage, "clap-refine needs a trained CLAP checkpoint (run train-clap)"))?,
        ),
        _ => None,
    };
    let d = &ctx.cfg.decoding;
    let mut records = Vec::new();
    for (i, clip) in load_clips(&loaded, split)?.iter().enumerate() {
        let record = match strategy {
            Strategy::Beam => {
                let g = pipeline::beam_candidates(&clip.id, &cap.model, &cap.vocab, &clip.mel, &[d.baseline_beam], d.max_len)
                    .stage(stage)?;
                let chosen = g.set.candidates[0].caption.clone();
                CandidateRecord { id: clip.id.clone(), candidates: g.set.candidates, chosen }
            }
            Strategy::Nucleus => {
                let mut rng = nucleus_rng(ctx.cfg.seed, i);
                let set = pipeline::nucleus_candidate(&clip.id, &cap.model, &cap.vocab, &clip.mel, (d.temperature, d.top_p, d.max_len), &mut rng)
                    .stage(stage)?;
                let chosen = set.candidates[0].caption.clone();
                CandidateRecord { id: clip.id.clone(), candidates: set.candidates, chosen }
            }
            Strategy::ClapRefine => {
                let clap = clap.as_ref().expect("loaded above");
                let g = pipeline::beam_candidates(&clip.id, &cap.model, &cap.vocab, &clip.mel, &d.beam_sizes, d.max_len).stage(stage)?;
                for (beam, err) in &g.failures {
                    log::warn!("{}: beam {beam} failed: {err}", clip.id);
                }
                let refined = pipeline::refine(&g.set, &clap.model, &clap.vocab, &clip.mel).stage(stage)?;
                CandidateRecord { id: clip.id.clone(), candidates: refined.ranked.candidates, chosen: refined.chosen }
            }
        };
        records.push(record);
    }
    ensure_out(ctx)?;
    let path = dump.map(Path::to_path_buf).unwrap_or_else(|| ctx.candidates_path());
    fsio::atomic_write(&path, &fsio::jsonl(&records)?)?;
    Ok(records)
}

fn read_candidates(path: &Path) -> CliResult<Vec<CandidateRecord>> {
    let stage = "load-candidates";
    fsio::read_text(stage, path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(stage, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Pairs each chosen caption with its references from the manifest.
fn eval_items(manifest: &Manifest, chosen: &[(String, String)]) -> CliResult<Vec<EvalItem>> {
    chosen
        .iter()
        .map(|(id, candidate)| {
            let entry = manifest
                .entries
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| CliError::data("evaluate", format!("no references for `{id}`")))?;
            Ok(EvalItem { id: id.clone(), candidate: candidate.clone(), references: entry.captions.clone() })
        })
        .collect()
}

fn score(ctx: &Context, items: &[EvalItem], clap: Option<&Loaded<ClapModel>>) -> CliResult<EvaluationReport> {
    let embedder = clap.map(|c| ClapTextEmbedder { model: &c.model, vocab: &c.vocab });
    let providers = Providers {
        spice: &NoSpice,
        fluency: &HeuristicFluency,
        embedder: embedder.as_ref().map(|e| e as _),
        gate: ctx.cfg.metrics,
    };
    evaluate_corpus(items, &providers).stage("evaluate")
}

/// Scores the chosen captions of a candidate dump against the manifest references.
pub fn evaluate(ctx: &Context, manifest: Option<&Path>, candidates: Option<&Path>) -> CliResult<EvaluationReport> {
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| ctx.manifest_path());
    let loaded = load_manifest(&path)?;
    let dump = candidates.map(Path::to_path_buf).unwrap_or_else(|| ctx.candidates_path());
    let chosen: Vec<(String, String)> = read_candidates(&dump)?.into_iter().map(|r| (r.id, r.chosen)).collect();
    let items = eval_items(&loaded.manifest, &chosen)?;
    let report = score(ctx, &items, load_clap_optional(ctx)?.as_ref())?;
    ensure_out(ctx)?;
    fsio::atomic_write(&ctx.out.join("evaluation.json"), &fsio::pretty_json(&report)?)?;
    Ok(report)
}

/// CLAP-Refine ranks reported alongside the baselines.
pub const REPORT_RANKS: [usize; 4] = [1, 3, 5, 7];

/// Compares nucleus sampling, plain beam search, each CLAP-Refine rank, and the
/// reference-aware oracle (by FENSE) on one split.
pub fn report(ctx: &Context, manifest: Option<&Path>, split: Split) -> CliResult<ComparisonTable> {
    let stage = "report";
    let loaded = manifest_for(ctx, manifest)?;
    let cap = checkpoint::load_captioner(&ctx.captioner_dir())?;
    let clap = load_clap_optional(ctx)?
        .ok_or_else(|| CliError::config(stage, "report needs a trained CLAP checkpoint (run train-clap)"))?;
    let d = &ctx.cfg.decoding;
    let embedder = ClapTextEmbedder { model: &clap.model, vocab: &clap.vocab };
    let ranks: Vec<usize> = REPORT_RANKS.iter().copied().filter(|&k| k <= d.beam_sizes.len()).collect();
    let mut nucleus = Vec::new();
    let mut beam = Vec::new();
    let mut by_rank: Vec<Vec<(String, String)>> = vec![Vec::new(); ranks.len()];
    let mut oracle = Vec::new();
    for (i, clip) in load_clips(&loaded, split)?.iter().enumerate() {
        let mut rng = nucleus_rng(ctx.cfg.seed, i);
        let n = pipeline::nucleus_candidate(&clip.id, &cap.model, &cap.vocab, &clip.mel, (d.temperature, d.top_p, d.max_len), &mut rng)
            .stage(stage)?;
        nucleus.push((clip.id.clone(), n.candidates[0].caption.clone()));
        let b = pipeline::beam_candidates(&clip.id, &cap.model, &cap.vocab, &clip.mel, &[d.baseline_beam], d.max_len).stage(stage)?;
        beam.push((clip.id.clone(), b.set.candidates[0].caption.clone()));
        let g = pipeline::beam_candidates(&clip.id, &cap.model, &cap.vocab, &clip.mel, &d.beam_sizes, d.max_len).stage(stage)?;
        let refined = pipeline::refine(&g.set, &clap.model, &clap.vocab, &clip.mel).stage(stage)?;
        for (slot, &k) in by_rank.iter_mut().zip(&ranks) {
            slot.push((clip.id.clone(), refined.rank(k).caption.clone()));
        }
        oracle.push((clip.id.clone(), oracle_caption(&g.set, &clip.captions, &embedder, ctx)));
    }
    let mut evaluations = vec![
        ("Nucleus".to_string(), false, score(ctx, &eval_items(&loaded.manifest, &nucleus)?, Some(&clap))?),
        (format!("Beam({})", d.baseline_beam), false, score(ctx, &eval_items(&loaded.manifest, &beam)?, Some(&clap))?),
    ];
    for (k, chosen) in ranks.iter().zip(&by_rank) {
        evaluations.push((format!("CLAP-Refine rank {k}"), false, score(ctx, &eval_items(&loaded.manifest, chosen)?, Some(&clap))?));
    }
    evaluations.push(("Oracle (FENSE)".to_string(), true, score(ctx, &eval_items(&loaded.manifest, &oracle)?, Some(&clap))?));
    let table = build_table(&evaluations);
    ensure_out(ctx)?;
    fsio::atomic_write(&ctx.out.join("report.json"), &fsio::pretty_json(&table)?)?;
    fsio::atomic_write(&ctx.out.join("report.txt"), render_text(&table).as_bytes())?;
    Ok(table)
}

/// Candidate with the highest FENSE against the references; an unscorable candidate counts as 0.
fn oracle_caption(set: &CandidateSet, references: &[String], embedder: &ClapTextEmbedder<'_>, ctx: &Context) -> String {
    let (i, _) = oracle_select(set, references, |c, r| {
        fense(c, r, embedder, &HeuristicFluency, ctx.cfg.metrics).unwrap_or(0.0)
    });
    set.candidates[i].caption.clone()
}
