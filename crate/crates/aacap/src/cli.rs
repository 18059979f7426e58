//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use aacap_core::dataset::Split;

use crate::commands::{self, Context, Strategy};
use crate::config::{PipelineConfig, Preset};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "aacap", version, about = "Audio captioning with CLAP-Refine reranking")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured preset (desk or paper).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Working directory for every artefact.
    #[arg(long, global = true, default_value = "aacap-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Beam,
    Nucleus,
    ClapRefine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, or validate a manifest and write its vocabulary.
    Prepare {
        #[arg(long, conflicts_with = "manifest")]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 16)]
        valid: usize,
        #[arg(long, default_value_t = 16)]
        eval: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Add one back-translated paraphrase per training caption.
    Augment {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the captioner.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the contrastive audio-text model.
    TrainClap {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Caption a split and write the candidate dump.
    Infer {
        #[arg(long, value_enum, default_value = "clap-refine")]
        strategy: StrategyArg,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Candidate dump path (default: <out>/candidates.jsonl).
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Score a candidate dump against the manifest references.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Compare decoding strategies on a split.
    Report {
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn context(cli: &Cli) -> CliResult<Context> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.preset {
        cfg.preset = p.parse::<Preset>()?;
    }
    cfg.validate()?;
    Ok(Context { cfg, out: cli.out.clone() })
}

/// Parses `args` and runs the selected subcommand; `--help` and `--version` succeed.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::config("arguments", e.to_string().trim_end())),
    };
    let ctx = context(&cli)?;
    match &cli.command {
        Command::Prepare { synthetic, valid, eval, manifest } => match (synthetic, manifest) {
            (Some(n), _) => {
                let m = commands::prepare_synthetic(&ctx, *n, *valid, *eval)?;
                println!("prepared {} clips in {}", m.entries.len(), ctx.out.display());
            }
            (None, Some(p)) => {
                let v = commands::prepare_existing(&ctx, p)?;
                println!("manifest ok; vocabulary of {} tokens", v.len());
            }
            (None, None) => return Err(CliError::config("prepare", "pass --synthetic N or --manifest PATH")),
        },
        Command::Augment { manifest } => {
            let path = manifest.clone().unwrap_or_else(|| ctx.manifest_path());
            let s = commands::augment(&ctx, &path)?;
            println!(
                "{} paraphrases, {} skipped; vocabulary {} -> {}",
                s.pairs, s.skipped, s.stats.before, s.stats.after
            );
        }
        Command::Train { manifest } => {
            let s = commands::train_captioner(&ctx, manifest.as_deref())?;
            println!("best step {} valid loss {:.6}", s.best_step, s.best_valid_loss);
        }
        Command::TrainClap { manifest } => {
            let s = commands::train_clap(&ctx, manifest.as_deref())?;
            println!("best step {} valid loss {:.6}", s.best_step, s.best_valid_loss);
        }
        Command::Infer { strategy, split, manifest, dump } => {
            let strategy = match strategy {
                StrategyArg::Beam => Strategy::Beam,
                StrategyArg::Nucleus => Strategy::Nucleus,
                StrategyArg::ClapRefine => Strategy::ClapRefine,
            };
            let r = commands::infer(&ctx, manifest.as_deref(), (*split).into(), strategy, dump.as_deref())?;
            println!("captioned {} clips", r.len());
        }
        Command::Evaluate { manifest, candidates } => {
            let r = commands::evaluate(&ctx, manifest.as_deref(), candidates.as_deref())?;
            for (k, v) in &r.corpus {
                println!("{k:>10} {v:.4}");
            }
        }
        Command::Report { split, manifest } => {
            let t = commands::report(&ctx, manifest.as_deref(), (*split).into())?;
            print!("{}", crate::report::render_text(&t));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_arguments_are_config_errors() {
        assert_eq!(run(["aacap", "frobnicate"]).unwrap_err().exit_code(), 1);
        assert_eq!(run(["aacap", "--preset", "huge", "prepare", "--synthetic", "2"]).unwrap_err().exit_code(), 1);
        assert_eq!(run(["aacap", "prepare"]).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn help_succeeds() {
        run(["aacap", "--help"]).unwrap();
    }
}
