//! TOML pipeline configuration. Every section is optional; unknown keys are
//! rejected. Command-line flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use aacap_core::augment::DEFAULT_PIVOT;
use aacap_core::captioner::CaptionerConfig;
use aacap_core::clap::ClapConfig;
use aacap_core::decoding::{DEFAULT_BEAM_SIZES, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use aacap_core::metrics::FluencyGate;
use aacap_core::train::TrainConfig;

use crate::error::{CliError, CliResult, StageExt};
use crate::fsio;

pub const TOKEN_ENV: &str = "AACAP_TRANSLATE_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(CliError::config("config", format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub beam_sizes: Vec<usize>,
    /// Beam width of the plain beam-search baseline.
    pub baseline_beam: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            beam_sizes: DEFAULT_BEAM_SIZES.to_vec(),
            baseline_beam: 4,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_len: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub client: ClientKind,
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_attempts: usize,
    pub pivot_lang: String,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            client: ClientKind::Stub,
            endpoint: None,
            token_env: TOKEN_ENV.into(),
            timeout_secs: 30,
            max_attempts: 3,
            pivot_lang: DEFAULT_PIVOT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab_min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { vocab_min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: Preset,
    pub data: DataConfig,
    pub captioner: CaptionerConfig,
    pub clap: ClapConfig,
    /// Overrides the preset's captioner schedule when present.
    pub train: Option<TrainConfig>,
    /// Overrides the preset's CLAP schedule when present.
    pub train_clap: Option<TrainConfig>,
    pub decoding: DecodingConfig,
    pub augment: AugmentConfig,
    pub metrics: FluencyGate,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config("config", e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_toml(&fsio::read_text("config", path).map_err(|e| CliError::config("config", e.message))?)
    }

    pub fn validate(&self) -> CliResult<()> {
        let stage = "config";
        let d = &self.decoding;
        if d.beam_sizes.is_empty() || d.beam_sizes.contains(&0) || d.baseline_beam == 0 || d.max_len == 0 {
            return Err(CliError::config(stage, "beam sizes, baseline_beam and max_len must be positive"));
        }
        let mut sizes = d.beam_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        if sizes.len() != d.beam_sizes.len() {
            return Err(CliError::config(stage, "beam_sizes must be unique"));
        }
        if !(d.temperature > 0.0) || !(d.top_p > 0.0 && d.top_p <= 1.0) {
            return Err(CliError::config(stage, "temperature must be > 0 and top_p in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) || !(0.0..=1.0).contains(&self.metrics.penalty) {
            return Err(CliError::config(stage, "fluency threshold and penalty must lie in [0, 1]"));
        }
        if self.augment.max_attempts == 0 {
            return Err(CliError::config(stage, "augment.max_attempts must be positive"));
        }
        if self.augment.client == ClientKind::Http && self.augment.endpoint.is_none() {
            return Err(CliError::config(stage, "augment.client = \"http\" needs augment.endpoint"));
        }
        for t in [&self.train, &self.train_clap].into_iter().flatten() {
            t.validate().stage(stage)?;
        }
        Ok(())
    }

    /// Captioner schedule: explicit section, else the preset.
    pub fn captioner_schedule(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => TrainConfig::desk_captioner(self.seed),
            Preset::Paper => TrainConfig::paper_pretrain(self.seed),
        })
    }

    pub fn clap_schedule(&self, steps_per_epoch: usize) -> TrainConfig {
        self.train_clap.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => TrainConfig::desk_clap(self.seed),
            Preset::Paper => TrainConfig::paper_clap(steps_per_epoch, self.seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        c.validate().unwrap();
        assert_eq!(c.decoding.beam_sizes, vec![2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert_eq!(PipelineConfig::from_toml("sed = 1").unwrap_err().exit_code(), 1);
        assert!(PipelineConfig::from_toml("[decoding]\nbeams = [1]").is_err());
        assert!(PipelineConfig::from_toml("[captioner]\nwidth = 3").is_err());
    }

    #[test]
    fn partial_sections_and_presets() {
        let c = PipelineConfig::from_toml("seed = 9\npreset = \"paper\"\n[captioner]\ndec_dim = 16\n").unwrap();
        assert_eq!(c.captioner.dec_dim, 16);
        assert_eq!(c.captioner.enc_dim, CaptionerConfig::default().enc_dim);
        let t = c.captioner_schedule();
        assert_eq!((t.batch_size, t.peak_lr, t.warmup, t.total_updates), (16, 1e-4, 1000, 100_000));
        assert_eq!(t.lr(1000), 1e-4);
        let clap = c.clap_schedule(10);
        assert_eq!((clap.batch_size, clap.warmup, clap.total_updates), (128, 20, 150));
    }

    #[test]
    fn invalid_values() {
        let mut c = PipelineConfig::default();
        c.decoding.beam_sizes = vec![2, 2];
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.augment.client = ClientKind::Http;
        assert!(c.validate().is_err());
    }
}
