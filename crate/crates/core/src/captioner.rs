//! Audio captioner: frozen audio encoder, trainable 5x downsampling projector
//! and a frozen decoder-only language model adapted through LoRA on its
//! query/value projections.
//!
//! The decoder reads the joint sequence `[audio; prompt; target]` during
//! training and `[audio; prompt]` at inference. Audio and prompt rows are
//! visible to every position; target rows attend causally among themselves.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{TokenSeq, Vocab};
use crate::frontend::{self, AudioClip, FeatureSeq, MelSpectrogram, PatchEmbed};
use crate::math::{cos, pow, sin};
use crate::nn::{impl_params, BlockCache, Embedding, LayerNorm, Linear, Mlp, MlpCache, Params, Transformer};
use crate::ops::{self, AttnMask};
use crate::{Error, Result, Rng, Tensor};

pub use crate::frontend::FeatureSeq as AudioFeatures;
pub use crate::nn::{lora_apply, LoraAdapter};

pub const DEFAULT_PROMPT: &str = "Describe the audio you hear";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub vocab_size: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_ff: usize,
    /// Frames merged by the projector.
    pub downsample: usize,
    pub proj_hidden: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_ff: usize,
    pub max_positions: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Whether the output head joins the trainable partition.
    pub train_head: bool,
    /// Log-mel normalisation applied before the patch embedding.
    pub mel_mean: f64,
    pub mel_std: f64,
    pub prompt: String,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            enc_dim: 32,
            enc_layers: 1,
            enc_heads: 2,
            enc_ff: 64,
            downsample: 5,
            proj_hidden: 64,
            dec_dim: 32,
            dec_layers: 2,
            dec_heads: 2,
            dec_ff: 64,
            max_positions: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
            train_head: true,
            mel_mean: -8.0,
            mel_std: 6.0,
            prompt: String::from(DEFAULT_PROMPT),
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.downsample == 0 {
            return bad("downsample must be >= 1".into());
        }
        if self.mel_std <= 0.0 {
            return bad("mel_std must be positive".into());
        }
        if self.enc_layers > 0 && (self.enc_heads == 0 || !self.enc_dim.is_multiple_of(self.enc_heads)) {
            return bad(format!("enc_dim {} not divisible by {} heads", self.enc_dim, self.enc_heads));
        }
        if self.dec_heads == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return bad(format!("dec_dim {} not divisible by {} heads", self.dec_dim, self.dec_heads));
        }
        if self.prompt.trim().is_empty() {
            return bad("prompt must not be empty".into());
        }
        Ok(())
    }
}

/// Fixed sinusoidal position table, stored as a frozen tensor.
fn sinusoidal(rows: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, dim]);
    for p in 0..rows {
        for i in 0..dim {
            let freq = 1.0 / pow(10_000.0, (2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * freq;
            t.row_mut(p)[i] = if i % 2 == 0 { sin(a) } else { cos(a) };
        }
    }
    t
}

/// Frame concatenation followed by linear -> GELU -> linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub mlp: Mlp,
    pub factor: usize,
}
impl_params!(Projector { mlp });

#[derive(Debug, Clone)]
pub struct ProjectorCache {
    mlp: MlpCache,
}

impl Projector {
    pub fn new(in_dim: usize, factor: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self { mlp: Mlp::new(in_dim * factor, hidden, out_dim, rng), factor }
    }

    /// Right-pads with zero frames to a multiple of `factor` and concatenates
    /// each group of `factor` frames into one row.
    pub fn group(&self, frames: &Tensor) -> Tensor {
        let (t, d) = (frames.rows(), frames.cols());
        let groups = t.div_ceil(self.factor);
        let mut data = frames.data().to_vec();
        data.resize(groups * self.factor * d, 0.0);
        Tensor::from_vec(&[groups, self.factor * d], data).expect("padded length matches")
    }

    pub fn forward(&self, e_a: &FeatureSeq) -> Result<(FeatureSeq, ProjectorCache)> {
        let (y, mlp) = self.mlp.forward(&self.group(&e_a.frames))?;
        let rate_hz = e_a.rate_hz / self.factor as f64;
        Ok((FeatureSeq { frames: y, rate_hz }, ProjectorCache { mlp }))
    }

    /// Returns the gradient with respect to the grouped input rows.
    pub fn backward(&mut self, cache: &ProjectorCache, dy: &Tensor) -> Result<Tensor> {
        self.mlp.backward(&cache.mlp, dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub tok_emb: Embedding,
    pub pos_emb: Tensor,
    pub blocks: Transformer,
    pub ln_f: LayerNorm,
    pub head: Linear,
}
impl_params!(Decoder { tok_emb, pos_emb, blocks, ln_f, head });

#[derive(Debug, Clone)]
pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    h: Tensor,
    hn: Tensor,
}

impl Decoder {
    fn new(cfg: &CaptionerConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            tok_emb: Embedding::new(cfg.vocab_size, cfg.dec_dim, rng),
            pos_emb: sinusoidal(cfg.max_positions, cfg.dec_dim),
            blocks: Transformer::new(
                cfg.dec_layers,
                cfg.dec_dim,
                cfg.dec_heads,
                cfg.dec_ff,
                Some((cfg.lora_rank, cfg.lora_alpha)),
                rng,
            )?,
            ln_f: LayerNorm::new(cfg.dec_dim),
            head: Linear::new(cfg.dec_dim, cfg.vocab_size, rng),
        })
    }

    /// Logits for every row of `joint` under a prefix mask of length `prefix_len`.
    pub fn forward(&self, joint: &Tensor, prefix_len: usize) -> Result<(Tensor, DecoderCache)> {
        let n = joint.rows();
        if n > self.pos_emb.rows() {
            return Err(Error::shape(
                "decoder",
                format!("sequence of {n} rows exceeds {} positions", self.pos_emb.rows()),
            ));
        }
        let x = joint.add(&self.pos_emb.slice_rows(0, n))?;
        let (h, blocks) = self.blocks.forward(&x, AttnMask::Prefix(prefix_len))?;
        let hn = self.ln_f.forward(&h)?;
        let logits = self.head.forward(&hn)?;
        Ok((logits, DecoderCache { blocks, h, hn }))
    }

    pub fn backward(&mut self, cache: &DecoderCache, dlogits: &Tensor) -> Result<Tensor> {
        let dhn = self.head.backward(&cache.hn, dlogits)?;
        let dh = self.ln_f.backward(&cache.h, &dhn);
        self.blocks.backward(&cache.blocks, &dh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// `[E_A; E_P]` or `[E_A; E_P; E_T]` with recorded boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding {
    pub rows: Tensor,
    pub audio_len: usize,
    pub prompt_len: usize,
    pub target_len: usize,
}

impl JointEmbedding {
    /// End of the audio rows and end of the prompt rows.
    pub fn boundaries(&self) -> (usize, usize) {
        (self.audio_len, self.audio_len + self.prompt_len)
    }

    pub fn prefix_len(&self) -> usize {
        self.audio_len + self.prompt_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub patch: PatchEmbed,
    pub encoder: Transformer,
    pub projector: Projector,
    pub decoder: Decoder,
}
impl_params!(Captioner { patch, encoder, projector, decoder });

impl Captioner {
    /// Random initialisation with the default trainable partition: the
    /// projector, the LoRA factors and (if configured) the output head.
    pub fn new(config: CaptionerConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let patch = PatchEmbed::new(config.enc_dim, &mut rng.split(1));
        let encoder = Transformer::new(
            config.enc_layers,
            config.enc_dim,
            config.enc_heads.max(1),
            config.enc_ff,
            None,
            &mut rng.split(2),
        )?;
        let projector =
            Projector::new(config.enc_dim, config.downsample, config.proj_hidden, config.dec_dim, &mut rng.split(3));
        let decoder = Decoder::new(&config, &mut rng.split(4))?;
        let mut model = Self { config, patch, encoder, projector, decoder };
        model.reset_partition();
        Ok(model)
    }

    /// Freezes everything, then marks projector, LoRA and (optionally) head trainable.
    pub fn reset_partition(&mut self) {
        self.set_trainable(false);
        self.projector.set_trainable(true);
        for b in &mut self.decoder.blocks.blocks {
            b.attn.wq.lora.set_trainable(true);
            b.attn.wv.lora.set_trainable(true);
        }
        if self.config.train_head {
            self.decoder.head.set_trainable(true);
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named_params().into_iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n).collect()
    }

    pub fn normalize_mel(&self, mel: &MelSpectrogram) -> MelSpectrogram {
        let mut out = mel.clone();
        let (m, s) = (self.config.mel_mean, self.config.mel_std);
        out.frames.data_mut().iter_mut().for_each(|v| *v = (*v - m) / s);
        out
    }

    /// `E_a` at 50 Hz from a mel spectrogram.
    pub fn encode_mel(&self, mel: &MelSpectrogram) -> Result<FeatureSeq> {
        let seq = frontend::patchify(&self.patch, &self.normalize_mel(mel))?;
        if self.encoder.blocks.is_empty() {
            return Ok(seq);
        }
        let (frames, _) = self.encoder.forward(&seq.frames, AttnMask::Full)?;
        Ok(FeatureSeq { frames, rate_hz: seq.rate_hz })
    }

    pub fn encode_audio(&self, clip: &AudioClip) -> Result<FeatureSeq> {
        self.encode_mel(&frontend::log_mel(clip)?)
    }

    /// `E_A`: `ceil(T / 5)` rows of decoder width at a fifth of the input rate.
    pub fn project_downsample(&self, e_a: &FeatureSeq) -> Result<FeatureSeq> {
        self.projector.forward(e_a).map(|(seq, _)| seq)
    }

    pub fn prompt_ids(&self, vocab: &Vocab) -> Vec<u32> {
        vocab.ids(&self.config.prompt)
    }

    pub fn assemble_joint(
        &self,
        e_big_a: &FeatureSeq,
        prompt_ids: &[u32],
        target: Option<&TokenSeq>,
        mode: Mode,
    ) -> Result<JointEmbedding> {
        if prompt_ids.is_empty() {
            return Err(Error::Data("prompt must not be empty".into()));
        }
        let prompt = self.decoder.tok_emb.forward(prompt_ids)?;
        let (rows, target_len) = match (mode, target) {
            (Mode::Infer, Some(_)) => {
                return Err(Error::Data("target tokens supplied in inference mode".into()));
            }
            (Mode::Train, None) => return Err(Error::Data("training mode needs target tokens".into())),
            (Mode::Infer, None) => (Tensor::vstack(&[&e_big_a.frames, &prompt])?, 0),
            (Mode::Train, Some(t)) => {
                let tgt = self.decoder.tok_emb.forward(t.targets())?;
                (Tensor::vstack(&[&e_big_a.frames, &prompt, &tgt])?, t.targets().len())
            }
        };
        Ok(JointEmbedding { rows, audio_len: e_big_a.len(), prompt_len: prompt_ids.len(), target_len })
    }

    /// Mean next-token cross-entropy over the target rows, teacher forced:
    /// row `prefix_len - 1 + t` predicts target token `t`.
    pub fn caption_loss(&self, joint: &JointEmbedding, target: &TokenSeq) -> Result<f64> {
        let targets = target.targets();
        if joint.target_len != targets.len() {
            return Err(Error::shape(
                "caption_loss",
                format!("{} target rows vs {} target tokens", joint.target_len, targets.len()),
            ));
        }
        let (logits, _) = self.decoder.forward(&joint.rows, joint.prefix_len())?;
        let p = joint.prefix_len();
        let sel = logits.slice_rows(p - 1, p - 1 + targets.len());
        let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        ops::cross_entropy(&sel, &idx).map(|(l, _)| l)
    }

    /// Loss for one example with gradients accumulated into trainable tensors.
    /// `e_a` is the (frozen) encoder output.
    pub fn loss_and_backward(&mut self, e_a: &FeatureSeq, prompt_ids: &[u32], target: &TokenSeq) -> Result<f64> {
        let (e_big_a, pcache) = self.projector.forward(e_a)?;
        let joint = self.assemble_joint(&e_big_a, prompt_ids, Some(target), Mode::Train)?;
        let p = joint.prefix_len();
        let targets = target.targets();
        let (logits, dcache) = self.decoder.forward(&joint.rows, p)?;
        let sel = logits.slice_rows(p - 1, p - 1 + targets.len());
        let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let (loss, dsel) = ops::cross_entropy(&sel, &idx)?;
        let mut dlogits = Tensor::zeros(logits.shape());
        for r in 0..dsel.rows() {
            dlogits.row_mut(p - 1 + r).copy_from_slice(dsel.row(r));
        }
        let djoint = self.decoder.backward(&dcache, &dlogits)?;
        let (a, _) = joint.boundaries();
        self.projector.backward(&pcache, &djoint.slice_rows(0, a))?;
        if self.decoder.tok_emb.table.requires_grad() {
            self.decoder.tok_emb.backward(prompt_ids, &djoint.slice_rows(a, p));
            self.decoder.tok_emb.backward(targets, &djoint.slice_rows(p, joint.rows.rows()));
        }
        Ok(loss)
    }

    /// Decoder input prefix `[E_A; E_P]` for generation.
    pub fn inference_prefix(&self, e_a: &FeatureSeq, prompt_ids: &[u32]) -> Result<JointEmbedding> {
        let e_big_a = self.project_downsample(e_a)?;
        self.assemble_joint(&e_big_a, prompt_ids, None, Mode::Infer)
    }

    /// Next-token log-probabilities after `generated` tokens.
    pub fn next_log_probs(&self, prefix: &JointEmbedding, generated: &[u32]) -> Result<Vec<f64>> {
        let rows = if generated.is_empty() {
            prefix.rows.clone()
        } else {
            Tensor::vstack(&[&prefix.rows, &self.decoder.tok_emb.forward(generated)?])?
        };
        let (logits, _) = self.decoder.forward(&rows, prefix.prefix_len())?;
        Ok(ops::log_softmax(logits.row(rows.rows() - 1)))
    }

    /// Raw logits for every row of an arbitrary joint sequence.
    pub fn logits(&self, joint: &JointEmbedding) -> Result<Tensor> {
        self.decoder.forward(&joint.rows, joint.prefix_len()).map(|(l, _)| l)
    }
}
