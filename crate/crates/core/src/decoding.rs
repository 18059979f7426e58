//! Decoding strategies and candidate reranking.
//!
//! Beam search scores hypotheses by the raw sum of token log-probabilities (no
//! length normalisation). At each step the `beam_size` best expansions are
//! kept; those ending in eos move to the finished pool.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::captioner::{Captioner, JointEmbedding};
use crate::clap::cosine_similarity;
use crate::dataset::{Vocab, EOS};
use crate::math::exp;
use crate::{Error, Result, Rng};

/// Default candidate pool: beam sizes 2 through 8.
pub const DEFAULT_BEAM_SIZES: [usize; 7] = [2, 3, 4, 5, 6, 7, 8];
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_TOP_P: f64 = 0.95;

/// Next-token distribution given the tokens generated so far.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> u32;
    fn log_probs(&self, generated: &[u32]) -> Result<Vec<f64>>;
}

/// A captioner conditioned on one clip's `[E_A; E_P]` prefix.
pub struct CaptionerLm<'a> {
    model: &'a Captioner,
    prefix: JointEmbedding,
}

impl<'a> CaptionerLm<'a> {
    pub fn new(model: &'a Captioner, prefix: JointEmbedding) -> Self {
        Self { model, prefix }
    }
}

impl LanguageModel for CaptionerLm<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn eos(&self) -> u32 {
        EOS
    }

    fn log_probs(&self, generated: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.prefix, generated)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, eos excluded.
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities, eos included when finished.
    pub score: f64,
    pub finished: bool,
}

fn lex(a: &[u32], b: &[u32]) -> Ordering {
    a.cmp(b)
}

/// Argmax decoding.
pub fn greedy<M: LanguageModel + ?Sized>(lm: &M, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = lm.log_probs(&tokens)?;
        let best = argmax(&lp);
        score += lp[best];
        if best as u32 == lm.eos() {
            return Ok(Hypothesis { tokens, score, finished: true });
        }
        tokens.push(best as u32);
    }
    Ok(Hypothesis { tokens, score, finished: false })
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Beam search returning the best finished hypothesis, ties broken by earlier
/// finish and then by lexicographic token ids. If nothing finishes within
/// `max_len` tokens the best unfinished hypothesis is returned with
/// `finished == false`.
pub fn beam_search<M: LanguageModel + ?Sized>(lm: &M, beam_size: usize, max_len: usize) -> Result<Hypothesis> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Config(format!("beam_size {beam_size} and max_len {max_len} must be >= 1")));
    }
    let eos = lm.eos();
    let mut live: Vec<(Vec<u32>, f64)> = alloc::vec![(Vec::new(), 0.0)];
    // (tokens, score, finishing step)
    let mut finished: Vec<(Vec<u32>, f64, usize)> = Vec::new();
    for step in 1..=max_len {
        let mut expansions: Vec<(Vec<u32>, f64)> = Vec::with_capacity(live.len() * lm.vocab_size());
        for (tokens, score) in &live {
            let lp = lm.log_probs(tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if !l.is_finite() {
                    continue;
                }
                let mut t = tokens.clone();
                t.push(tok as u32);
                expansions.push((t, score + l));
            }
        }
        expansions.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| lex(&a.0, &b.0)));
        expansions.truncate(beam_size);
        live.clear();
        for (mut tokens, score) in expansions {
            if *tokens.last().expect("expansion is non-empty") == eos {
                tokens.pop();
                finished.push((tokens, score, step));
            } else {
                live.push((tokens, score));
            }
        }
        let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        // Log-probabilities are <= 0, so live scores can only fall.
        if live.is_empty() || best_finished >= best_live {
            break;
        }
    }
    if let Some(best) = finished
        .into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)).then_with(|| lex(&a.0, &b.0)))
    {
        return Ok(Hypothesis { tokens: best.0, score: best.1, finished: true });
    }
    let best = live
        .into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| lex(&a.0, &b.0)))
        .expect("live beam is non-empty when nothing finished");
    Ok(Hypothesis { tokens: best.0, score: best.1, finished: false })
}

/// Draws one token from `softmax(log_probs / temperature)` restricted to the
/// smallest high-probability set with mass >= `top_p`, renormalised.
pub fn sample_next(log_probs: &[f64], temperature: f64, top_p: f64, rng: &mut Rng) -> Result<usize> {
    if !(temperature > 0.0) || !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Config(format!("temperature {temperature} / top_p {top_p} out of range")));
    }
    let scaled: Vec<f64> = log_probs.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| exp(s - max)).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += weights[i] / total;
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let nucleus = &order[..kept];
    let nucleus_mass: f64 = nucleus.iter().map(|&i| weights[i]).sum();
    let mut u = rng.uniform() * nucleus_mass;
    for &i in nucleus {
        u -= weights[i];
        if u < 0.0 {
            return Ok(i);
        }
    }
    Ok(*nucleus.last().expect("nucleus keeps at least one token"))
}

/// Nucleus sampling until eos or `max_len` tokens. The returned score is the
/// unscaled model log-probability of the sampled tokens.
pub fn nucleus_sample<M: LanguageModel + ?Sized>(
    lm: &M,
    temperature: f64,
    top_p: f64,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = lm.log_probs(&tokens)?;
        let tok = sample_next(&lp, temperature, top_p, rng)?;
        score += lp[tok];
        if tok as u32 == lm.eos() {
            return Ok(Hypothesis { tokens, score, finished: true });
        }
        tokens.push(tok as u32);
    }
    Ok(Hypothesis { tokens, score, finished: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub caption: String,
    pub beam_size: usize,
    pub lm_score: f64,
    pub clap_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Data(format!("candidate set `{}` is empty", self.id)));
        }
        let mut sizes: Vec<usize> = self.candidates.iter().map(|c| c.beam_size).collect();
        sizes.sort_unstable();
        if sizes.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("candidate set `{}` repeats a beam size", self.id)));
        }
        if self.candidates.iter().any(|c| !c.lm_score.is_finite() || c.clap_score.is_some_and(|s| !s.is_finite())) {
            return Err(Error::Data(format!("candidate set `{}` has non-finite scores", self.id)));
        }
        Ok(())
    }

    pub fn by_beam(&self, beam_size: usize) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.beam_size == beam_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub set: CandidateSet,
    /// Beam sizes whose decode failed, with the error text.
    pub failures: Vec<(usize, String)>,
}

/// One beam-search caption per beam size; duplicates across sizes are kept.
pub fn generate_candidates<M: LanguageModel + ?Sized>(
    id: &str,
    lm: &M,
    vocab: &Vocab,
    beam_sizes: &[usize],
    max_len: usize,
) -> Result<GenerationOutcome> {
    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    for &beam in beam_sizes {
        match beam_search(lm, beam, max_len) {
            Ok(h) if h.score.is_finite() => candidates.push(Candidate {
                caption: vocab.decode_ids(&h.tokens),
                beam_size: beam,
                lm_score: h.score,
                clap_score: None,
            }),
            Ok(_) => failures.push((beam, String::from("non-finite score"))),
            Err(e) => failures.push((beam, format!("{e}"))),
        }
    }
    if candidates.is_empty() {
        return Err(Error::Data(format!("no beam produced a caption for `{id}`")));
    }
    let set = CandidateSet { id: String::from(id), candidates };
    set.validate()?;
    Ok(GenerationOutcome { set, failures })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedSet {
    /// Candidates sorted by descending similarity (ties: smaller beam first).
    pub ranked: CandidateSet,
    pub chosen: String,
    /// Candidates whose text could not be embedded.
    pub dropped: Vec<(usize, String)>,
}

impl RefinedSet {
    /// Caption at 1-based rank `k`, clamped to the last available rank.
    pub fn rank(&self, k: usize) -> &Candidate {
        let c = &self.ranked.candidates;
        &c[(k.max(1) - 1).min(c.len() - 1)]
    }
}

/// Scores every candidate by cosine similarity between the clip embedding and
/// its text embedding and reranks; the top candidate is the output.
pub fn clap_refine<F>(set: &CandidateSet, audio_embedding: &[f64], mut embed_text: F) -> Result<RefinedSet>
where
    F: FnMut(&str) -> Result<Vec<f64>>,
{
    let mut scored = Vec::with_capacity(set.candidates.len());
    let mut dropped = Vec::new();
    for c in &set.candidates {
        let sim = embed_text(&c.caption).and_then(|t| cosine_similarity(audio_embedding, &t));
        match sim {
            Ok(s) => scored.push(Candidate { clap_score: Some(s), ..c.clone() }),
            Err(e) => dropped.push((c.beam_size, format!("{e}"))),
        }
    }
    if scored.is_empty() {
        return Err(Error::Data(format!("every candidate of `{}` failed to embed", set.id)));
    }
    scored.sort_by(|a, b| {
        b.clap_score
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.clap_score.unwrap_or(f64::NEG_INFINITY))
            .then(a.beam_size.cmp(&b.beam_size))
    });
    let chosen = scored[0].caption.clone();
    Ok(RefinedSet { ranked: CandidateSet { id: set.id.clone(), candidates: scored }, chosen, dropped })
}

/// Candidate maximising `metric(candidate, references)`; first wins on ties.
pub fn oracle_select<F>(set: &CandidateSet, references: &[String], mut metric: F) -> (usize, f64)
where
    F: FnMut(&str, &[String]) -> f64,
{
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in set.candidates.iter().enumerate() {
        let s = metric(&c.caption, references);
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Fixed distribution independent of history.
    struct Static(Vec<f64>);
    impl LanguageModel for Static {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn eos(&self) -> u32 {
            0
        }
        fn log_probs(&self, _: &[u32]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn cand(caption: &str, beam: usize) -> Candidate {
        Candidate { caption: caption.into(), beam_size: beam, lm_score: -1.0, clap_score: None }
    }

    #[test]
    fn beam_one_is_greedy_when_eos_is_likely() {
        let lm = Static(vec![libm::log(0.6), libm::log(0.3), libm::log(0.1)]);
        let g = greedy(&lm, 5).unwrap();
        let b = beam_search(&lm, 1, 5).unwrap();
        assert_eq!(g, b);
        assert!(g.tokens.is_empty() && g.finished);
    }

    #[test]
    fn unfinished_is_flagged() {
        let lm = Static(vec![f64::NEG_INFINITY, 0.0]);
        let h = beam_search(&lm, 2, 3).unwrap();
        assert!(!h.finished);
        assert_eq!(h.tokens, vec![1, 1, 1]);
        assert!(beam_search(&lm, 0, 3).is_err());
    }

    #[test]
    fn sample_rejects_bad_params() {
        let mut rng = Rng::new(0);
        assert!(sample_next(&[0.0, 0.0], 0.0, 0.9, &mut rng).is_err());
        assert!(sample_next(&[0.0, 0.0], 1.0, 1.5, &mut rng).is_err());
    }

    #[test]
    fn tiny_top_p_is_argmax() {
        let lp = [libm::log(0.2), libm::log(0.5), libm::log(0.3)];
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            assert_eq!(sample_next(&lp, 1.0, 1e-9, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn refine_picks_highest_similarity() {
        let set = CandidateSet { id: "x".into(), candidates: vec![cand("a", 2), cand("b", 3), cand("c", 4)] };
        let audio = [1.0, 0.0];
        let table = |t: &str| -> Result<Vec<f64>> {
            // cosines 0.2, 0.9, 0.5 against [1, 0]
            let c: f64 = match t {
                "a" => 0.2,
                "b" => 0.9,
                _ => 0.5,
            };
            Ok(vec![c, libm::sqrt(1.0 - c * c)])
        };
        let r = clap_refine(&set, &audio, table).unwrap();
        assert_eq!(r.chosen, "b");
        let scores: Vec<f64> = r.ranked.candidates.iter().map(|c| c.clap_score.unwrap()).collect();
        assert!((scores[0] - 0.9).abs() < 1e-12 && scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn refine_ties_prefer_small_beam_and_drops_failures() {
        let set = CandidateSet { id: "x".into(), candidates: vec![cand("same", 5), cand("same", 2), cand("", 3)] };
        let r = clap_refine(&set, &[1.0, 1.0], |t: &str| {
            if t.is_empty() {
                Err(Error::Data("empty".into()))
            } else {
                Ok(vec![1.0, 0.5])
            }
        })
        .unwrap();
        assert_eq!(r.ranked.candidates[0].beam_size, 2);
        assert_eq!(r.dropped.len(), 1);
        assert_eq!(r.rank(7).beam_size, 5);
    }

    #[test]
    fn oracle_single_and_max() {
        let one = CandidateSet { id: "x".into(), candidates: vec![cand("only", 4)] };
        assert_eq!(oracle_select(&one, &[], |_, _| 0.0).0, 0);
        let set = CandidateSet { id: "x".into(), candidates: vec![cand("aa", 2), cand("a", 3), cand("aaa", 4)] };
        let (i, s) = oracle_select(&set, &[], |c, _| c.len() as f64);
        assert_eq!((i, s), (2, 3.0));
    }

    #[test]
    fn candidate_set_validation() {
        let dup = CandidateSet { id: "x".into(), candidates: vec![cand("a", 2), cand("b", 2)] };
        assert!(dup.validate().is_err());
        let empty = CandidateSet { id: "x".into(), candidates: vec![] };
        assert!(empty.validate().is_err());
    }
}
