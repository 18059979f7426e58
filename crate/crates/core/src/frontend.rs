//! Waveform to log-mel features and patch embeddings.
//!
//! Audio is resampled to 16 kHz, framed with a 25 ms symmetric Hann window and
//! a 10 ms hop, transformed with a 512-point FFT and pooled into 128 triangular
//! mel bands (HTK mel scale, 20 Hz to Nyquist). The patch embedding maps each
//! pair of consecutive mel frames to one feature frame, taking the 100 Hz mel
//! rate to 50 Hz.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{cos, exp, ln, sin, sqrt, PI};
use crate::nn::{impl_params, Linear};
use crate::{Error, Result, Rng, Tensor};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_MELS: usize = 128;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const MEL_RATE_HZ: f64 = 100.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const PATCH_STRIDE: usize = 2;
const F_MIN: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling to `target` Hz.
    pub fn resampled(&self, target: u32) -> AudioClip {
        if self.sample_rate == target || self.samples.is_empty() {
            return AudioClip { samples: self.samples.clone(), sample_rate: target };
        }
        let ratio = self.sample_rate as f64 / target as f64;
        let out_len = (self.samples.len() as u64 * target as u64 / self.sample_rate as u64) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        AudioClip { samples, sample_rate: target }
    }
}

/// `T x 128` log-mel energies at 100 frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Time-major feature matrix with its nominal frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    pub frames: Tensor,
    pub rate_hz: f64,
}

impl FeatureSeq {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * ln(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (exp(mel / 1127.0) - 1.0)
}

/// Triangular filter weights, `N_MELS x (N_FFT / 2 + 1)`.
pub fn mel_filterbank(sample_rate: u32) -> Tensor {
    let bins = N_FFT / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(nyquist));
    let step = (hi - lo) / (N_MELS + 1) as f64;
    let mut fb = Tensor::zeros(&[N_MELS, bins]);
    for m in 0..N_MELS {
        let left = lo + step * m as f64;
        let center = left + step;
        let right = center + step;
        for (b, w) in fb.row_mut(m).iter_mut().enumerate() {
            let mel = hz_to_mel(b as f64 * sample_rate as f64 / N_FFT as f64);
            *w = if mel > left && mel <= center {
                (mel - left) / (center - left)
            } else if mel > center && mel < right {
                (right - mel) / (right - center)
            } else {
                0.0
            };
        }
    }
    fb
}

fn hann_window() -> Vec<f64> {
    (0..WIN_LENGTH)
        .map(|n| 0.5 - 0.5 * cos(2.0 * PI * n as f64 / (WIN_LENGTH - 1) as f64))
        .collect()
}

/// In-place iterative radix-2 FFT; `re.len()` must be a power of two.
fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (wr, wi) = (cos(ang * k as f64), sin(ang * k as f64));
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Log-mel spectrogram; `T = 1 + (N - 400) / 160` frames after resampling.
pub fn log_mel(clip: &AudioClip) -> Result<MelSpectrogram> {
    let clip = clip.resampled(SAMPLE_RATE);
    let n = clip.samples.len();
    if n < WIN_LENGTH {
        return Err(Error::ClipTooShort { samples: n, needed: WIN_LENGTH });
    }
    let frames = 1 + (n - WIN_LENGTH) / HOP_LENGTH;
    let window = hann_window();
    let fb = mel_filterbank(SAMPLE_RATE);
    let bins = N_FFT / 2 + 1;
    let mut out = Tensor::zeros(&[frames, N_MELS]);
    let mut re = vec![0.0; N_FFT];
    let mut im = vec![0.0; N_FFT];
    let mut power = vec![0.0; bins];
    for t in 0..frames {
        let start = t * HOP_LENGTH;
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        for (i, w) in window.iter().enumerate() {
            re[i] = clip.samples[start + i] * w;
        }
        fft(&mut re, &mut im);
        for (b, p) in power.iter_mut().enumerate() {
            *p = re[b] * re[b] + im[b] * im[b];
        }
        for (m, o) in out.row_mut(t).iter_mut().enumerate() {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            *o = ln(e.max(LOG_FLOOR));
        }
    }
    Ok(MelSpectrogram { frames: out })
}

/// Strided linear patch embedding: each pair of mel frames (2 x 128 values,
/// time-major) maps to one `dim`-wide feature frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
}
impl_params!(PatchEmbed { proj });

impl PatchEmbed {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        Self { proj: Linear::new(PATCH_STRIDE * N_MELS, dim, rng) }
    }

    /// Identity map; requires `dim == 256`.
    pub fn identity() -> Self {
        let d = PATCH_STRIDE * N_MELS;
        Self { proj: Linear::from_weights(Tensor::identity(d), Tensor::zeros(&[d])) }
    }

    pub fn dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// Flattened `floor(T / 2) x 256` patch matrix; trailing odd frame dropped.
    pub fn patches(mel: &MelSpectrogram) -> Result<Tensor> {
        let t = mel.num_frames();
        if t < PATCH_STRIDE {
            return Err(Error::Data(format!("{t} mel frames, need at least {PATCH_STRIDE}")));
        }
        let out_t = t / PATCH_STRIDE;
        let data = mel.frames.data()[..out_t * PATCH_STRIDE * N_MELS].to_vec();
        Tensor::from_vec(&[out_t, PATCH_STRIDE * N_MELS], data)
    }

    pub fn forward_patches(&self, patches: &Tensor) -> Result<Tensor> {
        self.proj.forward(patches)
    }

    pub fn backward(&mut self, patches: &Tensor, dy: &Tensor) -> Result<()> {
        self.proj.backward(patches, dy).map(|_| ())
    }
}

/// Patch embedding of a mel spectrogram at the halved frame rate.
pub fn patchify(embed: &PatchEmbed, mel: &MelSpectrogram) -> Result<FeatureSeq> {
    let frames = embed.forward_patches(&PatchEmbed::patches(mel)?)?;
    Ok(FeatureSeq { frames, rate_hz: MEL_RATE_HZ / PATCH_STRIDE as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub n_time_masks: usize,
    pub max_t: usize,
    pub n_freq_masks: usize,
    pub max_f: usize,
}

/// Time and frequency masking; masked cells take the spectrogram mean.
/// Mask widths are uniform in `0..=max`.
pub fn spec_augment(mel: &MelSpectrogram, rng: &mut Rng, cfg: &SpecAugmentConfig) -> Result<MelSpectrogram> {
    let t = mel.num_frames();
    if (cfg.n_time_masks > 0 && cfg.max_t >= t) || (cfg.n_freq_masks > 0 && cfg.max_f >= N_MELS) {
        return Err(Error::Config(format!(
            "mask widths (t {}, f {}) must be below the spectrogram size ({t}, {N_MELS})",
            cfg.max_t, cfg.max_f
        )));
    }
    let mut out = mel.clone();
    if cfg.n_time_masks == 0 && cfg.n_freq_masks == 0 {
        return Ok(out);
    }
    let fill = mel.frames.data().iter().sum::<f64>() / mel.frames.len() as f64;
    for _ in 0..cfg.n_time_masks {
        let w = rng.below(cfg.max_t + 1);
        let t0 = rng.below(t - w + 1);
        for r in t0..t0 + w {
            out.frames.row_mut(r).iter_mut().for_each(|v| *v = fill);
        }
    }
    for _ in 0..cfg.n_freq_masks {
        let w = rng.below(cfg.max_f + 1);
        let f0 = rng.below(N_MELS - w + 1);
        for r in 0..t {
            out.frames.row_mut(r)[f0..f0 + w].iter_mut().for_each(|v| *v = fill);
        }
    }
    Ok(out)
}

/// RMS level of a clip, used by the synthetic corpus and tests.
pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    sqrt(samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64)
}
