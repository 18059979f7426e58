//! Synthetic sound-event corpus for desk-scale experiments.
//!
//! Each clip is one second of 16 kHz audio mixing a primary source (loud or
//! soft) with an optional quieter background source. Five reference captions
//! describe the same event with different phrasings.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::Split;
use crate::frontend::{AudioClip, SAMPLE_RATE};
use crate::math::{exp, sin, PI};
use crate::Rng;

struct Source {
    subject: &'static str,
    verb: &'static str,
    gerund: &'static str,
}

const SOURCES: [Source; 8] = [
    Source { subject: "a dog", verb: "barks", gerund: "barking" },
    Source { subject: "a bird", verb: "chirps", gerund: "chirping" },
    Source { subject: "an engine", verb: "hums", gerund: "humming" },
    Source { subject: "a bell", verb: "rings", gerund: "ringing" },
    Source { subject: "water", verb: "flows", gerund: "flowing" },
    Source { subject: "a man", verb: "speaks", gerund: "speaking" },
    Source { subject: "a siren", verb: "wails", gerund: "wailing" },
    Source { subject: "a clock", verb: "ticks", gerund: "ticking" },
];

/// What happens in a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SoundEvent {
    pub primary: usize,
    pub loud: bool,
    pub background: Option<usize>,
}

impl SoundEvent {
    /// All distinct events, in a fixed order.
    pub fn all() -> Vec<SoundEvent> {
        let mut out = Vec::new();
        for primary in 0..SOURCES.len() {
            for loud in [true, false] {
                out.push(SoundEvent { primary, loud, background: None });
                for b in (0..SOURCES.len()).filter(|&b| b != primary) {
                    out.push(SoundEvent { primary, loud, background: Some(b) });
                }
            }
        }
        out
    }

    /// Five reference captions; the first is the canonical one.
    pub fn captions(&self) -> Vec<String> {
        let p = &SOURCES[self.primary];
        let adv = if self.loud { "loudly" } else { "softly" };
        let bg = self.background.map(|b| &SOURCES[b]);
        match bg {
            None => vec![
                format!("{} {} {adv}", p.subject, p.verb),
                format!("{} is {} {adv}", p.subject, p.gerund),
                format!("there is the sound of {} {} {adv}", p.subject, p.gerund),
                format!("{} {} {adv} nearby", p.subject, p.verb),
                format!("someone hears {} {} {adv}", p.subject, p.verb),
            ],
            Some(b) => vec![
                format!("{} {} {adv} while {} {}", p.subject, p.verb, b.subject, b.verb),
                format!("{} is {} {adv} and {} is {}", p.subject, p.gerund, b.subject, b.gerund),
                format!("there is the sound of {} {} {adv} and {} {}", p.subject, p.gerund, b.subject, b.gerund),
                format!("{} {} {adv} as {} {} nearby", p.subject, p.verb, b.subject, b.verb),
                format!("someone hears {} {} {adv} with {} {}", p.subject, p.verb, b.subject, b.gerund),
            ],
        }
    }

    pub fn render(&self, rng: &mut Rng) -> AudioClip {
        let n = SAMPLE_RATE as usize;
        let mut samples = vec![0.0; n];
        let amp = if self.loud { 0.5 } else { 0.12 };
        add_source(&mut samples, self.primary, amp, rng);
        if let Some(b) = self.background {
            add_source(&mut samples, b, 0.1, rng);
        }
        for s in &mut samples {
            *s += 0.002 * (2.0 * rng.uniform() - 1.0);
            *s = s.clamp(-1.0, 1.0);
        }
        AudioClip { samples, sample_rate: SAMPLE_RATE }
    }
}

fn add_source(out: &mut [f64], source: usize, amp: f64, rng: &mut Rng) {
    let sr = SAMPLE_RATE as f64;
    let jitter = 1.0 + 0.08 * (rng.uniform() - 0.5);
    let phase = rng.uniform() * 0.25;
    let tone = |f: f64, t: f64| sin(2.0 * PI * f * jitter * t);
    let n = out.len();
    match source {
        // dog: short harmonic bursts
        0 => {
            for k in 0..4 {
                let start = ((phase + 0.22 * k as f64) * sr) as usize;
                for i in start..(start + (0.09 * sr) as usize).min(n) {
                    let t = (i - start) as f64 / sr;
                    let env = sin(PI * t / 0.09);
                    out[i] += amp * env * (0.6 * tone(450.0, t) + 0.3 * tone(900.0, t) + 0.1 * tone(1350.0, t));
                }
            }
        }
        // bird: rising chirps
        1 => {
            for k in 0..6 {
                let start = ((phase * 0.5 + 0.15 * k as f64) * sr) as usize;
                let len = 0.05;
                for i in start..(start + (len * sr) as usize).min(n) {
                    let t = (i - start) as f64 / sr;
                    let f = 2800.0 + 16_000.0 * t;
                    out[i] += amp * sin(PI * t / len) * sin(2.0 * PI * f * jitter * t);
                }
            }
        }
        // engine: steady low harmonic stack
        2 => {
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let v: f64 = (1..=6).map(|k| tone(90.0 * k as f64, t) / k as f64).sum();
                *o += amp * 0.5 * v;
            }
        }
        // bell: decaying partials
        3 => {
            for k in 0..2 {
                let start = ((phase + 0.5 * k as f64) * sr) as usize;
                for i in start..n {
                    let t = (i - start) as f64 / sr;
                    out[i] += amp * exp(-4.0 * t) * (0.7 * tone(1300.0, t) + 0.3 * tone(2650.0, t));
                }
            }
        }
        // water: smoothed broadband noise
        4 => {
            let mut prev = 0.0;
            for o in out.iter_mut() {
                let white = 2.0 * rng.uniform() - 1.0;
                prev = 0.7 * prev + 0.3 * white;
                *o += amp * 1.5 * prev;
            }
        }
        // man: voiced harmonics with syllable modulation
        5 => {
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let syll = 0.5 + 0.5 * sin(2.0 * PI * 4.0 * (t + phase));
                let v: f64 = (1..=8).map(|k| tone(140.0 * k as f64, t) * if k == 4 || k == 5 { 0.6 } else { 0.2 }).sum();
                *o += amp * 0.5 * syll * v;
            }
        }
        // siren: slow frequency sweep
        6 => {
            let mut ph = 0.0;
            for o in out.iter_mut() {
                let t = ph / (2.0 * PI * 900.0);
                let f = jitter * (900.0 + 250.0 * sin(2.0 * PI * 2.0 * (t + phase)));
                ph += 2.0 * PI * f / sr;
                *o += amp * sin(ph);
            }
        }
        // clock: periodic clicks
        _ => {
            for k in 0..4 {
                let start = ((phase * 0.5 + 0.25 * k as f64) * sr) as usize;
                for i in start..(start + (0.006 * sr) as usize).min(n) {
                    let t = (i - start) as f64 / sr;
                    out[i] += amp * 2.0 * exp(-800.0 * t) * (2.0 * rng.uniform() - 1.0);
                }
            }
        }
    }
}

/// A 0.5 amplitude sine at 16 kHz.
pub fn tone_clip(freq: f64, secs: f64) -> AudioClip {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let samples = (0..n).map(|i| 0.5 * sin(2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64)).collect();
    AudioClip { samples, sample_rate: SAMPLE_RATE }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub event: SoundEvent,
    pub clip: AudioClip,
    pub captions: Vec<String>,
    pub split: Split,
}

/// Toy corpus with distinct events across all splits while the event pool
/// lasts (128 events), each rendered with its own random jitter.
pub fn generate_corpus(n_train: usize, n_valid: usize, n_eval: usize, seed: u64) -> Vec<SynthItem> {
    let root = Rng::new(seed);
    let mut events = SoundEvent::all();
    root.split(0).shuffle(&mut events);
    let splits = core::iter::repeat_n(Split::Train, n_train)
        .chain(core::iter::repeat_n(Split::Valid, n_valid))
        .chain(core::iter::repeat_n(Split::Eval, n_eval));
    splits
        .enumerate()
        .map(|(i, split)| {
            let event = events[i % events.len()];
            let mut rng = root.split(1000 + i as u64);
            SynthItem {
                id: format!("clip{i:04}"),
                event,
                clip: event.render(&mut rng),
                captions: event.captions(),
                split,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn event_pool_is_distinct() {
        let all = SoundEvent::all();
        assert_eq!(all.len(), 128);
        let caps: BTreeSet<String> = all.iter().map(|e| e.captions()[0].clone()).collect();
        assert_eq!(caps.len(), 128);
    }

    #[test]
    fn corpus_is_seeded_and_bounded() {
        let a = generate_corpus(4, 1, 1, 3);
        let b = generate_corpus(4, 1, 1, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for item in &a {
            assert_eq!(item.captions.len(), 5);
            assert_eq!(item.clip.samples.len(), 16_000);
            assert!(item.clip.samples.iter().all(|s| s.abs() <= 1.0));
        }
        assert_eq!(a[4].split, Split::Valid);
    }
}
