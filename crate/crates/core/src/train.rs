//! Adam, the two learning-rate schedules, and the captioner and CLAP training loops.
//!
//! Both loops validate every `validate_every` updates (and once more at the
//! final update when it is off-cadence) and return a copy of the model at the
//! lowest validation loss.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::captioner::Captioner;
use crate::clap::{infonce_with_grads, ClapModel};
use crate::dataset::TokenSeq;
use crate::frontend::{spec_augment, FeatureSeq, MelSpectrogram, SpecAugmentConfig};
use crate::math::{cos, sqrt, PI};
use crate::nn::Params;
use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub total_updates: usize,
    /// Warmup length in updates.
    pub warmup: usize,
    pub schedule: Schedule,
    pub validate_every: usize,
    pub seed: u64,
    #[serde(default)]
    pub spec_augment: Option<SpecAugmentConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_updates == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size, total_updates and validate_every must be positive".into()));
        }
        if self.warmup > self.total_updates {
            return Err(Error::Config(format!("warmup {} exceeds total {}", self.warmup, self.total_updates)));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Linear => lr_linear(step, self.warmup, self.peak_lr, self.total_updates),
            Schedule::Cosine => cosine_in_steps(step, self.warmup, self.peak_lr, self.total_updates),
        }
    }

    /// Captioner pre-training: batch 16, peak 1e-4, 100k updates, 1000 warmup, linear decay.
    pub fn paper_pretrain(seed: u64) -> Self {
        Self {
            batch_size: 16,
            peak_lr: 1e-4,
            total_updates: 100_000,
            warmup: 1000,
            schedule: Schedule::Linear,
            validate_every: 500,
            seed,
            spec_augment: None,
        }
    }

    /// Captioner fine-tuning: batch 4, peak 8e-6, 10 epochs; the decay shape is assumed linear.
    pub fn paper_finetune(steps_per_epoch: usize, seed: u64) -> Self {
        let total = 10 * steps_per_epoch.max(1);
        Self {
            batch_size: 4,
            peak_lr: 8e-6,
            total_updates: total,
            warmup: 1000.min(total),
            schedule: Schedule::Linear,
            validate_every: 500,
            seed,
            spec_augment: None,
        }
    }

    /// CLAP: batch 128, peak 5e-5, 15 epochs, 2 warmup epochs, cosine.
    pub fn paper_clap(steps_per_epoch: usize, seed: u64) -> Self {
        let spe = steps_per_epoch.max(1);
        Self {
            batch_size: 128,
            peak_lr: 5e-5,
            total_updates: 15 * spe,
            warmup: 2 * spe,
            schedule: Schedule::Cosine,
            validate_every: spe,
            seed,
            spec_augment: None,
        }
    }

    pub fn desk_captioner(seed: u64) -> Self {
        Self {
            batch_size: 10,
            peak_lr: 3e-3,
            total_updates: 1500,
            warmup: 50,
            schedule: Schedule::Linear,
            validate_every: 100,
            seed,
            spec_augment: None,
        }
    }

    pub fn desk_clap(seed: u64) -> Self {
        Self {
            batch_size: 16,
            peak_lr: 2e-3,
            total_updates: 400,
            warmup: 20,
            schedule: Schedule::Cosine,
            validate_every: 40,
            seed,
            spec_augment: None,
        }
    }
}

/// Linear ramp from 0 to `peak` over `warmup` updates, then linear decay to 0 at `total`.
pub fn lr_linear(step: usize, warmup: usize, peak: f64, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    peak * ((total - step) as f64 / (total - warmup) as f64)
}

fn cosine_in_steps(step: usize, warmup: usize, peak: f64, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + cos(PI * progress))
}

/// Linear warmup over `warmup_epochs`, then cosine annealing to 0 at `total_epochs`.
pub fn lr_cosine(step: usize, warmup_epochs: usize, peak: f64, total_epochs: usize, steps_per_epoch: usize) -> f64 {
    cosine_in_steps(step, warmup_epochs * steps_per_epoch, peak, total_epochs * steps_per_epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, moments: BTreeMap::new() }
    }
}

/// Bias-corrected Adam update of one tensor at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, b1: f64, b2: f64, eps: f64) {
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        param[i] -= lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps);
    }
}

/// One Adam step over every trainable tensor of `model`; frozen tensors are untouched.
pub fn adam_step<P: Params + ?Sized>(model: &mut P, state: &mut OptimizerState, lr: f64) -> Result<()> {
    state.step += 1;
    let (t, b1, b2, eps) = (state.step, state.beta1, state.beta2, state.eps);
    for (name, tensor) in model.named_params_mut() {
        if !tensor.requires_grad() {
            continue;
        }
        let grad: Vec<f64> = tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tensor.len()]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        if m.len() != tensor.len() {
            return Err(Error::shape("adam_step", format!("{name}: moment {} vs tensor {}", m.len(), tensor.len())));
        }
        adam_update(tensor.data_mut(), &grad, m, v, t, lr, b1, b2, eps);
    }
    Ok(())
}

fn scale_grads<P: Params + ?Sized>(model: &mut P, s: f64) {
    for (_, t) in model.named_params_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub best: M,
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub log: Vec<LogRecord>,
    /// Mean training loss of every update, in order.
    pub train_losses: Vec<f64>,
}

/// Teacher-forcing example: the log-mel input, its cached encoder features, and a target.
#[derive(Debug, Clone)]
pub struct CaptionExample {
    pub id: String,
    pub mel: MelSpectrogram,
    pub features: FeatureSeq,
    pub target: TokenSeq,
}

/// Batch order for an epoch: a seeded permutation of `0..n`.
fn epoch_order(seed_rng: &Rng, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    seed_rng.split(epoch).shuffle(&mut idx);
    idx
}

struct Batcher {
    rng: Rng,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(rng: Rng, n: usize) -> Self {
        let order = epoch_order(&rng, 0, n);
        Self { rng, n, epoch: 0, order, pos: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.n) {
            if self.pos == self.n {
                self.epoch += 1;
                self.order = epoch_order(&self.rng, self.epoch, self.n);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn is_validation_step(step: usize, cfg: &TrainConfig) -> bool {
    step.is_multiple_of(cfg.validate_every) || step == cfg.total_updates
}

/// Mean teacher-forced loss over `examples`.
pub fn captioner_loss(model: &Captioner, prompt_ids: &[u32], examples: &[CaptionExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("empty example set".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let e_big_a = model.project_downsample(&ex.features)?;
        let joint = model.assemble_joint(&e_big_a, prompt_ids, Some(&ex.target), crate::captioner::Mode::Train)?;
        total += model.caption_loss(&joint, &ex.target)?;
    }
    Ok(total / examples.len() as f64)
}

/// Trains the captioner's trainable partition with mini-batch Adam.
pub fn train_captioner(
    model: &Captioner,
    cfg: &TrainConfig,
    prompt_ids: &[u32],
    train: &[CaptionExample],
    valid: &[CaptionExample],
) -> Result<TrainOutcome<Captioner>> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training needs non-empty train and valid splits".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut batcher = Batcher::new(root.split(1), train.len());
    let mut aug_rng = root.split(2);
    let mut model = model.clone();
    let mut opt = OptimizerState::default();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut log = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.total_updates);
    let mut window = Vec::new();
    for step in 1..=cfg.total_updates {
        model.zero_grad();
        let batch = batcher.next_batch(cfg.batch_size);
        let mut batch_loss = 0.0;
        for &i in &batch {
            let ex = &train[i];
            let loss = match &cfg.spec_augment {
                Some(sa) => {
                    let mel = spec_augment(&ex.mel, &mut aug_rng, sa)?;
                    let feats = model.encode_mel(&mel)?;
                    model.loss_and_backward(&feats, prompt_ids, &ex.target)?
                }
                None => model.loss_and_backward(&ex.features, prompt_ids, &ex.target)?,
            };
            batch_loss += loss;
        }
        let b = batch.len() as f64;
        scale_grads(&mut model, 1.0 / b);
        let lr = cfg.lr(step);
        adam_step(&mut model, &mut opt, lr)?;
        train_losses.push(batch_loss / b);
        window.push(batch_loss / b);
        if is_validation_step(step, cfg) {
            let valid_loss = captioner_loss(&model, prompt_ids, valid)?;
            let train_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            log.push(LogRecord { step, train_loss, valid_loss, lr });
            if valid_loss < best.2 {
                best = (model.clone(), step, valid_loss);
            }
        }
    }
    model.zero_grad();
    let (mut best_model, best_step, best_valid_loss) = best;
    best_model.zero_grad();
    Ok(TrainOutcome { best: best_model, best_step, best_valid_loss, log, train_losses })
}

/// Contrastive example: normalised audio patches and caption ids.
#[derive(Debug, Clone)]
pub struct ClapExample {
    pub id: String,
    pub patches: Tensor,
    pub text_ids: Vec<u32>,
}

/// In-batch InfoNCE, optionally accumulating gradients.
fn clap_batch(model: &mut ClapModel, batch: &[&ClapExample], backward: bool) -> Result<f64> {
    let mut apass = Vec::with_capacity(batch.len());
    let mut tpass = Vec::with_capacity(batch.len());
    for ex in batch {
        apass.push(model.audio_forward(&ex.patches)?);
        tpass.push(model.text_forward(&ex.text_ids)?);
    }
    let a: Vec<Vec<f64>> = apass.iter().map(|p| p.embedding.clone()).collect();
    let t: Vec<Vec<f64>> = tpass.iter().map(|p| p.embedding.clone()).collect();
    let out = infonce_with_grads(&a, &t, model.temperature_value())?;
    if backward {
        for (p, d) in apass.iter().zip(&out.d_audio) {
            model.audio_backward(p, d)?;
        }
        for (p, d) in tpass.iter().zip(&out.d_text) {
            model.text_backward(p, d)?;
        }
        if model.temperature.requires_grad() {
            model.temperature.accumulate_grad(&[out.d_temperature]);
        }
    }
    Ok(out.loss)
}

/// Validation InfoNCE: mean over consecutive chunks of `batch_size` (at least two items each).
pub fn clap_loss(model: &ClapModel, examples: &[ClapExample], batch_size: usize) -> Result<f64> {
    let refs: Vec<&ClapExample> = examples.iter().collect();
    let chunks = chunk_min2(&refs, batch_size);
    if chunks.is_empty() {
        return Err(Error::Data("InfoNCE needs at least two examples".into()));
    }
    let mut m = model.clone();
    let mut total = 0.0;
    for c in &chunks {
        total += clap_batch(&mut m, c, false)?;
    }
    Ok(total / chunks.len() as f64)
}

fn chunk_min2<'a>(items: &[&'a ClapExample], size: usize) -> Vec<Vec<&'a ClapExample>> {
    let size = size.max(2);
    let mut out: Vec<Vec<&ClapExample>> = items.chunks(size).map(<[_]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < 2) {
        let tail = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(tail);
        }
    }
    out.retain(|c| c.len() >= 2);
    out
}

/// Trains every CLAP parameter with in-batch InfoNCE; temperature stays in `[1e-3, 1]`.
pub fn train_clap(
    model: &ClapModel,
    cfg: &TrainConfig,
    train: &[ClapExample],
    valid: &[ClapExample],
) -> Result<TrainOutcome<ClapModel>> {
    cfg.validate()?;
    if train.len() < 2 || valid.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::Data("contrastive training needs batches of at least two pairs".into()));
    }
    let mut batcher = Batcher::new(Rng::new(cfg.seed).split(1), train.len());
    let mut model = model.clone();
    let mut opt = OptimizerState::default();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut log = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.total_updates);
    let mut window = Vec::new();
    for step in 1..=cfg.total_updates {
        model.zero_grad();
        let batch: Vec<&ClapExample> = batcher.next_batch(cfg.batch_size).into_iter().map(|i| &train[i]).collect();
        let loss = clap_batch(&mut model, &batch, true)?;
        let lr = cfg.lr(step);
        adam_step(&mut model, &mut opt, lr)?;
        model.clamp_temperature();
        train_losses.push(loss);
        window.push(loss);
        if is_validation_step(step, cfg) {
            let valid_loss = clap_loss(&model, valid, cfg.batch_size)?;
            let train_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            log.push(LogRecord { step, train_loss, valid_loss, lr });
            if valid_loss < best.2 {
                best = (model.clone(), step, valid_loss);
            }
        }
    }
    let (mut best_model, best_step, best_valid_loss) = best;
    best_model.zero_grad();
    Ok(TrainOutcome { best: best_model, best_step, best_valid_loss, log, train_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_points() {
        let c = TrainConfig::paper_pretrain(0);
        assert_eq!(c.lr(0), 0.0);
        assert_eq!(c.lr(1000), 1e-4);
        assert_eq!(c.lr(500), 5e-5);
        assert_eq!(c.lr(100_000), 0.0);
        assert!((lr_linear(50_500, 1000, 1e-4, 100_000) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn cosine_schedule_points() {
        let spe = 37;
        let peak = 5e-5;
        assert_eq!(lr_cosine(2 * spe, 2, peak, 15, spe), peak);
        assert_eq!(lr_cosine(15 * spe, 2, peak, 15, spe), 0.0);
        let mid = 2 * spe + (13 * spe) / 2;
        // 13 * 37 is odd, so take the exact midpoint with an even span
        let exact = lr_cosine(2 * 40 + 13 * 20, 2, peak, 15, 40);
        assert!((exact - peak / 2.0).abs() < 1e-9);
        assert!(lr_cosine(mid, 2, peak, 15, spe) > 0.0);
        assert_eq!(lr_cosine(0, 2, peak, 15, spe), 0.0);
    }

    #[test]
    fn adam_hand_case() {
        // scalar, grads 1 then -2, lr 0.1
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        // first step moves by lr * 1 / (1 + eps)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        adam_update(&mut p, &[-2.0], &mut m, &mut v, 2, 0.1, 0.9, 0.999, 1e-8);
        let m2: f64 = 0.9 * 0.1 + 0.1 * -2.0;
        let v2: f64 = 0.999 * 0.001 + 0.001 * 4.0;
        let mh = m2 / (1.0 - 0.81);
        let vh = v2 / (1.0 - 0.999f64 * 0.999);
        let expect = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * mh / (libm::sqrt(vh) + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_and_frozen() {
        let mut frozen = Tensor::filled(&[3], 2.0);
        let mut st = OptimizerState::default();
        adam_step(&mut frozen, &mut st, 0.1).unwrap();
        assert_eq!(frozen.data(), &[2.0; 3]);
        let mut live = Tensor::filled(&[3], 2.0);
        live.set_requires_grad(true);
        adam_step(&mut live, &mut st, 0.1).unwrap();
        assert_eq!(live.data(), &[2.0; 3]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk_captioner(0);
        c.warmup = c.total_updates + 1;
        assert!(c.validate().is_err());
        c = TrainConfig::desk_captioner(0);
        c.peak_lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn batcher_covers_epochs() {
        let mut b = Batcher::new(Rng::new(5), 7);
        let mut seen: Vec<usize> = (0..7).flat_map(|_| b.next_batch(1)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn validation_cadence() {
        let mut c = TrainConfig::desk_captioner(0);
        c.total_updates = 1200;
        c.validate_every = 500;
        let steps: Vec<usize> = (1..=1200).filter(|&s| is_validation_step(s, &c)).collect();
        assert_eq!(steps, vec![500, 1000, 1200]);
    }
}
