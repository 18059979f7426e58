//! Contrastive audio-text dual encoder used to rerank caption candidates.
//!
//! Both branches mean-pool a small transformer over their inputs and project
//! into a shared `d_clap`-dimensional space. Training uses the symmetric
//! InfoNCE objective over in-batch pairs with a learnable temperature.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::Vocab;
use crate::frontend::{self, AudioClip, MelSpectrogram, PatchEmbed};
use crate::math::{cos, ln, pow, sin, sqrt};
use crate::nn::{self, impl_params, BlockCache, Embedding, Linear, Params, Transformer};
use crate::ops::{self, AttnMask};
use crate::{Error, Result, Rng, Tensor};

pub const MIN_TEMPERATURE: f64 = 1e-3;
pub const MAX_TEMPERATURE: f64 = 1.0;
const NORM_EPS: f64 = 1e-12;

/// `a·b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {}", a.len(), b.len())));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { op: "cosine_similarity" });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClapEmbedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
}

/// Nudges an all-zero projection off the origin so cosine similarity is defined.
fn guard(mut v: Vec<f64>) -> Vec<f64> {
    if norm(&v) < NORM_EPS {
        v[0] += NORM_EPS;
    }
    v
}

/// Symmetric InfoNCE with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub d_audio: Vec<Vec<f64>>,
    pub d_text: Vec<Vec<f64>>,
    pub d_temperature: f64,
}

/// Mean of the audio-to-text and text-to-audio cross-entropies over the
/// `N x N` cosine-similarity matrix divided by `temperature`; pair `i` is the
/// positive for row and column `i`.
pub fn infonce_loss(audio: &[Vec<f64>], text: &[Vec<f64>], temperature: f64) -> Result<f64> {
    infonce_with_grads(audio, text, temperature).map(|o| o.loss)
}

pub fn infonce_with_grads(audio: &[Vec<f64>], text: &[Vec<f64>], temperature: f64) -> Result<InfoNceOutput> {
    let n = audio.len();
    if n < 2 || text.len() != n {
        return Err(Error::Data(format!("InfoNCE needs two equal batches of >= 2, got {n} and {}", text.len())));
    }
    let unit = |v: &Vec<f64>| -> Result<(Vec<f64>, f64)> {
        let l = norm(v);
        if l == 0.0 {
            return Err(Error::ZeroNorm { op: "infonce_loss" });
        }
        Ok((v.iter().map(|x| x / l).collect(), l))
    };
    let ua: Vec<(Vec<f64>, f64)> = audio.iter().map(unit).collect::<Result<_>>()?;
    let ut: Vec<(Vec<f64>, f64)> = text.iter().map(unit).collect::<Result<_>>()?;
    let mut cosm = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            cosm.row_mut(i)[j] = ua[i].0.iter().zip(&ut[j].0).map(|(a, b)| a * b).sum();
        }
    }
    let logits = cosm.scale(1.0 / temperature);
    let rows = ops::softmax(&logits, 1)?;
    let cols = ops::softmax(&logits, 0)?;
    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(&[n, n]);
    for i in 0..n {
        loss -= 0.5 * (ln(rows.at(i, i)) + ln(cols.at(i, i))) / n as f64;
        for j in 0..n {
            let eye = if i == j { 1.0 } else { 0.0 };
            dlogits.row_mut(i)[j] = 0.5 * ((rows.at(i, j) - eye) + (cols.at(i, j) - eye)) / n as f64;
        }
    }
    let mut d_temperature = 0.0;
    let mut du = vec![vec![0.0; ua[0].0.len()]; n];
    let mut dv = vec![vec![0.0; ut[0].0.len()]; n];
    for i in 0..n {
        for j in 0..n {
            let g = dlogits.at(i, j);
            d_temperature -= g * cosm.at(i, j) / (temperature * temperature);
            for (k, d) in du[i].iter_mut().enumerate() {
                *d += g * ut[j].0[k] / temperature;
            }
            for (k, d) in dv[j].iter_mut().enumerate() {
                *d += g * ua[i].0[k] / temperature;
            }
        }
    }
    let unnormalize = |(u, l): &(Vec<f64>, f64), du: &[f64]| -> Vec<f64> {
        let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        u.iter().zip(du).map(|(a, g)| (g - a * dot) / l).collect()
    };
    let d_audio = ua.iter().zip(&du).map(|(u, g)| unnormalize(u, g)).collect();
    let d_text = ut.iter().zip(&dv).map(|(u, g)| unnormalize(u, g)).collect();
    Ok(InfoNceOutput { loss, d_audio, d_text, d_temperature })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClapConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub audio_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub d_clap: usize,
    pub max_text_len: usize,
    pub init_temperature: f64,
    pub mel_mean: f64,
    pub mel_std: f64,
}

impl Default for ClapConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            dim: 32,
            audio_layers: 1,
            text_layers: 1,
            heads: 2,
            ff: 64,
            d_clap: 32,
            max_text_len: 32,
            init_temperature: 0.07,
            mel_mean: -8.0,
            mel_std: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClapModel {
    pub config: ClapConfig,
    pub audio_patch: PatchEmbed,
    pub audio_encoder: Transformer,
    pub audio_proj: Linear,
    pub text_embedding: Embedding,
    pub text_pos: Tensor,
    pub text_encoder: Transformer,
    pub text_proj: Linear,
    /// Single-element tensor, clamped to `[1e-3, 1]`.
    pub temperature: Tensor,
}
impl_params!(ClapModel {
    audio_patch,
    audio_encoder,
    audio_proj,
    text_embedding,
    text_pos,
    text_encoder,
    text_proj,
    temperature
});

/// Forward state of one audio branch pass.
#[derive(Debug, Clone)]
pub struct AudioPass {
    patches: Tensor,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    rows: usize,
    pub embedding: Vec<f64>,
}

/// Forward state of one text branch pass.
#[derive(Debug, Clone)]
pub struct TextPass {
    ids: Vec<u32>,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    rows: usize,
    pub embedding: Vec<f64>,
}

impl ClapModel {
    /// Everything trainable except the fixed position table.
    pub fn new(config: ClapConfig, rng: &Rng) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("CLAP width {} not divisible by {} heads", config.dim, config.heads)));
        }
        let mut pos = Tensor::zeros(&[config.max_text_len, config.dim]);
        for p in 0..config.max_text_len {
            for i in 0..config.dim {
                let a = p as f64 / pow(10_000.0, (2 * (i / 2)) as f64 / config.dim as f64);
                pos.row_mut(p)[i] = if i % 2 == 0 { sin(a) } else { cos(a) };
            }
        }
        let t0 = config.init_temperature.clamp(MIN_TEMPERATURE, MAX_TEMPERATURE);
        let mut model = Self {
            audio_patch: PatchEmbed::new(config.dim, &mut rng.split(11)),
            audio_encoder: Transformer::new(config.audio_layers, config.dim, config.heads, config.ff, None, &mut rng.split(12))?,
            audio_proj: Linear::new(config.dim, config.d_clap, &mut rng.split(13)),
            text_embedding: Embedding::new(config.vocab_size, config.dim, &mut rng.split(14)),
            text_pos: pos,
            text_encoder: Transformer::new(config.text_layers, config.dim, config.heads, config.ff, None, &mut rng.split(15))?,
            text_proj: Linear::new(config.dim, config.d_clap, &mut rng.split(16)),
            temperature: Tensor::filled(&[1], t0),
            config,
        };
        model.set_trainable(true);
        model.text_pos.set_requires_grad(false);
        Ok(model)
    }

    pub fn temperature_value(&self) -> f64 {
        self.temperature.data()[0]
    }

    pub fn clamp_temperature(&mut self) {
        let t = &mut self.temperature.data_mut()[0];
        *t = t.clamp(MIN_TEMPERATURE, MAX_TEMPERATURE);
    }

    /// Normalised patch matrix for a clip; cacheable across epochs.
    pub fn audio_patches(&self, mel: &MelSpectrogram) -> Result<Tensor> {
        let mut p = PatchEmbed::patches(mel)?;
        let (m, s) = (self.config.mel_mean, self.config.mel_std);
        p.data_mut().iter_mut().for_each(|v| *v = (*v - m) / s);
        Ok(p)
    }

    pub fn audio_forward(&self, patches: &Tensor) -> Result<AudioPass> {
        let x = self.audio_patch.forward_patches(patches)?;
        let (h, blocks) = self.audio_encoder.forward(&x, AttnMask::Full)?;
        let pooled = nn::mean_pool(&h);
        let embedding = self.project(&self.audio_proj, &pooled)?;
        Ok(AudioPass { patches: patches.clone(), blocks, pooled, rows: h.rows(), embedding })
    }

    pub fn audio_backward(&mut self, pass: &AudioPass, d_embedding: &[f64]) -> Result<()> {
        let dpooled = Self::project_backward(&mut self.audio_proj, &pass.pooled, d_embedding)?;
        let dh = nn::mean_pool_backward(&dpooled, pass.rows);
        let dx = self.audio_encoder.backward(&pass.blocks, &dh)?;
        self.audio_patch.backward(&pass.patches, &dx)
    }

    pub fn text_forward(&self, ids: &[u32]) -> Result<TextPass> {
        if ids.is_empty() {
            return Err(Error::Data("cannot embed an empty caption".into()));
        }
        let ids = &ids[..ids.len().min(self.config.max_text_len)];
        let x = self.text_embedding.forward(ids)?.add(&self.text_pos.slice_rows(0, ids.len()))?;
        let (h, blocks) = self.text_encoder.forward(&x, AttnMask::Full)?;
        let pooled = nn::mean_pool(&h);
        let embedding = self.project(&self.text_proj, &pooled)?;
        Ok(TextPass { ids: ids.to_vec(), blocks, pooled, rows: h.rows(), embedding })
    }

    pub fn text_backward(&mut self, pass: &TextPass, d_embedding: &[f64]) -> Result<()> {
        let dpooled = Self::project_backward(&mut self.text_proj, &pass.pooled, d_embedding)?;
        let dh = nn::mean_pool_backward(&dpooled, pass.rows);
        let dx = self.text_encoder.backward(&pass.blocks, &dh)?;
        self.text_embedding.backward(&pass.ids, &dx);
        Ok(())
    }

    fn project(&self, proj: &Linear, pooled: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::from_vec(&[1, pooled.len()], pooled.to_vec())?;
        Ok(proj.forward(&x)?.into_data())
    }

    fn project_backward(proj: &mut Linear, pooled: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::from_vec(&[1, pooled.len()], pooled.to_vec())?;
        let dy = Tensor::from_vec(&[1, d.len()], d.to_vec())?;
        Ok(proj.backward(&x, &dy)?.into_data())
    }

    pub fn embed_mel(&self, mel: &MelSpectrogram) -> Result<ClapEmbedding> {
        let pass = self.audio_forward(&self.audio_patches(mel)?)?;
        Ok(ClapEmbedding { vector: guard(pass.embedding), modality: Modality::Audio })
    }

    pub fn embed_audio(&self, clip: &AudioClip) -> Result<ClapEmbedding> {
        self.embed_mel(&frontend::log_mel(clip)?)
    }

    pub fn embed_text(&self, caption: &str, vocab: &Vocab) -> Result<ClapEmbedding> {
        let pass = self.text_forward(&vocab.ids(caption))?;
        Ok(ClapEmbedding { vector: guard(pass.embedding), modality: Modality::Text })
    }
}

/// `S[i][j] = cos(audio_i, text_j)`.
pub fn similarity_matrix(audio: &[Vec<f64>], text: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    audio
        .iter()
        .map(|a| text.iter().map(|t| cosine_similarity(a, t)).collect())
        .collect()
}

/// Fraction of texts whose most similar clip is their own.
pub fn text_to_audio_recall_at_1(sim: &[Vec<f64>]) -> f64 {
    let n = sim.len();
    let hits = (0..n)
        .filter(|&j| {
            let best = (0..n).fold(0, |b, i| if sim[i][j] > sim[b][j] { i } else { b });
            best == j
        })
        .count();
    hits as f64 / n as f64
}

/// Mean diagonal and mean off-diagonal similarity.
pub fn diagonal_contrast(sim: &[Vec<f64>]) -> (f64, f64) {
    let n = sim.len();
    let diag = (0..n).map(|i| sim[i][i]).sum::<f64>() / n as f64;
    let off = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| sim[i][j])
        .sum::<f64>()
        / (n * n - n).max(1) as f64;
    (diag, off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn infonce_uniform_is_ln_n() {
        let a = vec![vec![1.0, 0.0]; 4];
        let t = vec![vec![2.0, 0.0]; 4];
        let l = infonce_loss(&a, &t, 0.07).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-12);
        assert!(infonce_loss(&a[..1], &t[..1], 0.07).is_err());
    }

    #[test]
    fn infonce_sharp_diagonal_goes_to_zero() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = infonce_loss(&a, &a, 1e-3).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn infonce_two_by_two_hand_case() {
        // cos matrix [[1, 0], [0.6, 0.8]] at temperature 1
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
        let e = libm::exp;
        let ln = libm::log;
        // rows: softmax over texts
        let r0 = ln(e(1.0) / (e(1.0) + e(0.6)));
        let r1 = ln(e(0.8) / (e(0.0) + e(0.8)));
        // cols: softmax over audio
        let c0 = ln(e(1.0) / (e(1.0) + e(0.0)));
        let c1 = ln(e(0.8) / (e(0.6) + e(0.8)));
        let expect = -0.5 * ((r0 + r1) / 2.0 + (c0 + c1) / 2.0);
        let got = infonce_loss(&a, &t, 1.0).unwrap();
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }

    #[test]
    fn recall_and_contrast() {
        let sim = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(text_to_audio_recall_at_1(&sim), 1.0);
        let (d, o) = diagonal_contrast(&sim);
        assert!((d - 0.85).abs() < 1e-12 && (o - 0.15).abs() < 1e-12);
    }

    #[test]
    fn embeddings_are_deterministic_and_sized() {
        let vocab = Vocab::from_words(["a", "dog", "barks"].map(String::from));
        let cfg = ClapConfig { vocab_size: vocab.len(), d_clap: 12, ..ClapConfig::default() };
        let m = ClapModel::new(cfg, &Rng::new(3)).unwrap();
        let clip = crate::synth::tone_clip(500.0, 0.5);
        let a = m.embed_audio(&clip).unwrap();
        assert_eq!(a, m.embed_audio(&clip).unwrap());
        assert_eq!(a.vector.len(), 12);
        assert_eq!(m.embed_text("a dog barks", &vocab).unwrap().vector.len(), 12);
        assert!(m.embed_text("", &vocab).is_err());
    }
}
