//! Caption metrics: CIDEr-D, METEOR-lite, SPIDEr, SPIDEr-FL and FENSE.
//!
//! METEOR-lite uses exact then stem matching with the classic parameters
//! `alpha = 0.9`, `beta = 3`, `gamma = 0.5`; there is no synonym stage, so its
//! values are not comparable to published METEOR numbers. SPICE is a provider
//! interface only; without one, SPIDEr is reported as `cider / 10` and flagged
//! as degraded.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::clap::cosine_similarity;
use crate::dataset::normalize_tokens;
use crate::math::{exp, ln, sqrt};
use crate::{Error, Result};

pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Lowercase, punctuation-stripped word tokens; identical to the dataset rules.
pub fn tokenize_ptb_lite(text: &str) -> Vec<String> {
    normalize_tokens(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

type NgramCounts = BTreeMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String]) -> [NgramCounts; CIDER_MAX_N] {
    let mut out: [NgramCounts; CIDER_MAX_N] = Default::default();
    for (k, counts) in out.iter_mut().enumerate() {
        for w in tokens.windows(k + 1) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

struct TfIdf {
    vec: [BTreeMap<Vec<String>, f64>; CIDER_MAX_N],
    norm: [f64; CIDER_MAX_N],
    /// Bigram count, used as the length in the Gaussian penalty.
    length: f64,
}

fn tfidf(counts: &[NgramCounts; CIDER_MAX_N], df: &BTreeMap<Vec<String>, f64>, log_n: f64) -> TfIdf {
    let mut vec: [BTreeMap<Vec<String>, f64>; CIDER_MAX_N] = Default::default();
    let mut norm = [0.0; CIDER_MAX_N];
    for k in 0..CIDER_MAX_N {
        for (g, &tf) in &counts[k] {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
            let v = tf * (log_n - ln(d));
            norm[k] += v * v;
            vec[k].insert(g.clone(), v);
        }
        norm[k] = sqrt(norm[k]);
    }
    let length = counts[1].values().sum();
    TfIdf { vec, norm, length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> [f64; CIDER_MAX_N] {
    let delta = h.length - r.length;
    let mut val = [0.0; CIDER_MAX_N];
    for k in 0..CIDER_MAX_N {
        for (g, &hv) in &h.vec[k] {
            if let Some(&rv) = r.vec[k].get(g) {
                val[k] += hv.min(rv) * rv;
            }
        }
        if h.norm[k] != 0.0 && r.norm[k] != 0.0 {
            val[k] /= h.norm[k] * r.norm[k];
        }
        val[k] *= exp(-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA));
    }
    val
}

fn check_refs(items: &[EvalItem]) -> Result<()> {
    for it in items {
        if it.references.is_empty() {
            return Err(Error::Data(format!("item {} has no references", it.id)));
        }
    }
    Ok(())
}

/// Per-item CIDEr-D in `[0, 10]`, with document frequencies taken over the
/// references of every item in `items`.
pub fn cider_d_items(items: &[EvalItem]) -> Result<Vec<f64>> {
    check_refs(items)?;
    let refs: Vec<Vec<[NgramCounts; CIDER_MAX_N]>> = items
        .iter()
        .map(|it| it.references.iter().map(|r| ngram_counts(&tokenize_ptb_lite(r))).collect())
        .collect();
    let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for item_refs in &refs {
        let mut seen: BTreeSet<&Vec<String>> = BTreeSet::new();
        for r in item_refs {
            for counts in r {
                seen.extend(counts.keys());
            }
        }
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = ln(items.len().max(1) as f64);
    let mut scores = Vec::with_capacity(items.len());
    for (it, item_refs) in items.iter().zip(&refs) {
        let cand = tokenize_ptb_lite(&it.candidate);
        if cand.is_empty() {
            scores.push(0.0);
            continue;
        }
        let h = tfidf(&ngram_counts(&cand), &df, log_n);
        let mut total = [0.0; CIDER_MAX_N];
        for r in item_refs {
            let s = cider_sim(&h, &tfidf(r, &df, log_n));
            for k in 0..CIDER_MAX_N {
                total[k] += s[k];
            }
        }
        let mean_n = total.iter().sum::<f64>() / CIDER_MAX_N as f64;
        scores.push(10.0 * mean_n / item_refs.len() as f64);
    }
    Ok(scores)
}

/// Corpus CIDEr-D: the mean of [`cider_d_items`].
pub fn cider_d(items: &[EvalItem]) -> Result<f64> {
    Ok(mean(&cider_d_items(items)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Strips one of `ing`, `ed`, `es`, `s`, `ly` when at least three characters remain.
pub fn stem(word: &str) -> String {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base.to_string();
            }
        }
    }
    word.to_string()
}

fn meteor_single(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_used = vec![false; reference.len()];
    let mut align: Vec<Option<usize>> = vec![None; cand.len()];
    // exact stage, then stem stage; each candidate token takes the earliest free reference token
    let stages: [fn(&str) -> String; 2] = [|w| w.to_string(), stem];
    for key in stages {
        for (i, w) in cand.iter().enumerate() {
            if align[i].is_some() {
                continue;
            }
            let kw = key(w);
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && key(&reference[j]) == kw) {
                ref_used[j] = true;
                align[i] = Some(j);
            }
        }
    }
    let pairs: Vec<(usize, usize)> = align.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut chunks = 1.0;
    for w in pairs.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1.0;
        }
    }
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * libm::pow(chunks / m, METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// METEOR-lite in `[0, 1]`: the best score over `references`.
pub fn meteor_lite(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize_ptb_lite(candidate);
    references
        .iter()
        .map(|r| meteor_single(&cand, &tokenize_ptb_lite(r)))
        .fold(0.0, f64::max)
}

/// Error probability in `[0, 1]` for a caption.
pub trait FluencyProvider {
    fn error_prob(&self, caption: &str) -> f64;
}

/// SPICE score in `[0, 1]`, or `None` when unavailable.
pub trait SpiceProvider {
    fn spice(&self, candidate: &str, references: &[String]) -> Option<f64>;
}

/// Sentence vector for semantic similarity.
pub trait SentenceEmbedder {
    fn embed(&self, caption: &str) -> Result<Vec<f64>>;
}

/// The absent SPICE provider.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoSpice;

impl SpiceProvider for NoSpice {
    fn spice(&self, _: &str, _: &[String]) -> Option<f64> {
        None
    }
}

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "has", "have", "had", "do", "does", "bark", "chirp", "hum",
    "ring", "flow", "speak", "talk", "sing", "play", "run", "blow", "fall", "go", "pass", "tick", "wail", "honk",
    "rev", "roar", "crash", "cry", "laugh", "buzz", "drip", "rain", "whistle", "ran", "sang", "spoke", "rang", "blew",
];

fn verb_like(w: &str) -> bool {
    VERBS.contains(&w) || w.ends_with("ing") || w.ends_with("ed") || (w.len() > 2 && w.ends_with('s'))
}

/// Logistic over repetition, missing verb and shortness.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicFluency;

impl HeuristicFluency {
    pub const BIAS: f64 = -3.0;
    pub const W_REPEAT: f64 = 2.5;
    pub const W_NO_VERB: f64 = 2.0;
    pub const W_SHORT: f64 = 2.0;
}

impl FluencyProvider for HeuristicFluency {
    fn error_prob(&self, caption: &str) -> f64 {
        fluency_error_prob(caption)
    }
}

pub fn fluency_error_prob(caption: &str) -> f64 {
    let toks = tokenize_ptb_lite(caption);
    if toks.is_empty() {
        return 1.0;
    }
    let mut max_run = 1usize;
    let mut run = 1usize;
    for w in toks.windows(2) {
        run = if w[0] == w[1] { run + 1 } else { 1 };
        max_run = max_run.max(run);
    }
    let no_verb = !toks.iter().any(|w| verb_like(w));
    let z = HeuristicFluency::BIAS
        + HeuristicFluency::W_REPEAT * (max_run - 1) as f64
        + if no_verb { HeuristicFluency::W_NO_VERB } else { 0.0 }
        + if toks.len() < 3 { HeuristicFluency::W_SHORT } else { 0.0 };
    1.0 / (1.0 + exp(-z))
}

/// Threshold and penalty shared by SPIDEr-FL and FENSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluencyGate {
    pub threshold: f64,
    pub penalty: f64,
}

impl Default for FluencyGate {
    fn default() -> Self {
        Self { threshold: 0.9, penalty: 0.1 }
    }
}

impl FluencyGate {
    /// `score * penalty` iff `prob > threshold`.
    pub fn apply(&self, score: f64, prob: f64) -> f64 {
        if prob > self.threshold {
            score * self.penalty
        } else {
            score
        }
    }
}

/// SPIDEr on `[0, 1]`; the flag is true in the CIDEr-only degraded mode.
pub fn spider(cider: f64, spice: Option<f64>) -> (f64, bool) {
    match spice {
        Some(s) => ((cider / 10.0 + s) / 2.0, false),
        None => (cider / 10.0, true),
    }
}

pub fn spider_fl(spider_score: f64, fluency_err_prob: f64, threshold: f64, penalty: f64) -> f64 {
    FluencyGate { threshold, penalty }.apply(spider_score, fluency_err_prob)
}

/// Ungated semantic similarity: max cosine over references.
pub fn semantic_similarity(candidate: &str, references: &[String], embedder: &dyn SentenceEmbedder) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Data("no references".into()));
    }
    let c = embedder.embed(candidate)?;
    let mut best = f64::NEG_INFINITY;
    for r in references {
        best = best.max(cosine_similarity(&c, &embedder.embed(r)?)?);
    }
    Ok(best)
}

pub fn fense(
    candidate: &str,
    references: &[String],
    embedder: &dyn SentenceEmbedder,
    fluency: &dyn FluencyProvider,
    gate: FluencyGate,
) -> Result<f64> {
    if tokenize_ptb_lite(candidate).is_empty() {
        return Ok(0.0);
    }
    let sim = semantic_similarity(candidate, references, embedder)?;
    Ok(gate.apply(sim, fluency.error_prob(candidate)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub id: String,
    pub candidate: String,
    pub cider_d: f64,
    pub meteor: f64,
    pub spider: f64,
    pub spider_fl: f64,
    pub fluency_error_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fense: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub corpus: BTreeMap<String, f64>,
    pub items: Vec<ItemScores>,
    pub degraded_flags: Vec<String>,
}

pub const DEGRADED_SPIDER: &str = "spider_without_spice";
pub const DEGRADED_FENSE: &str = "fense_without_embedder";

pub struct Providers<'a> {
    pub spice: &'a dyn SpiceProvider,
    pub fluency: &'a dyn FluencyProvider,
    pub embedder: Option<&'a dyn SentenceEmbedder>,
    pub gate: FluencyGate,
}

/// Scores every item and averages; CIDEr document frequencies span the whole corpus.
pub fn evaluate_corpus(items: &[EvalItem], providers: &Providers<'_>) -> Result<EvaluationReport> {
    let ciders = cider_d_items(items)?;
    let mut degraded = BTreeSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (it, &c) in items.iter().zip(&ciders) {
        let (sp, deg) = spider(c, providers.spice.spice(&it.candidate, &it.references));
        if deg {
            degraded.insert(DEGRADED_SPIDER);
        }
        let prob = providers.fluency.error_prob(&it.candidate);
        let fense = match providers.embedder {
            Some(e) => Some(fense(&it.candidate, &it.references, e, providers.fluency, providers.gate)?),
            None => {
                degraded.insert(DEGRADED_FENSE);
                None
            }
        };
        out.push(ItemScores {
            id: it.id.clone(),
            candidate: it.candidate.clone(),
            cider_d: c,
            meteor: meteor_lite(&it.candidate, &it.references),
            spider: sp,
            spider_fl: providers.gate.apply(sp, prob),
            fluency_error_prob: prob,
            fense,
        });
    }
    let mut corpus = BTreeMap::new();
    let col = |f: fn(&ItemScores) -> f64| mean(&out.iter().map(f).collect::<Vec<_>>());
    corpus.insert("cider_d".to_string(), col(|s| s.cider_d));
    corpus.insert("meteor".to_string(), col(|s| s.meteor));
    corpus.insert("spider".to_string(), col(|s| s.spider));
    corpus.insert("spider_fl".to_string(), col(|s| s.spider_fl));
    if providers.embedder.is_some() {
        corpus.insert("fense".to_string(), col(|s| s.fense.unwrap_or(0.0)));
    }
    Ok(EvaluationReport {
        corpus,
        items: out,
        degraded_flags: degraded.into_iter().map(String::from).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn item(c: &str, r: &[&str]) -> EvalItem {
        EvalItem { id: c.to_string(), candidate: c.to_string(), references: s(r) }
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_ptb_lite("A Dog barks!"), s(&["a", "dog", "barks"]));
        assert!(tokenize_ptb_lite("").is_empty());
    }

    #[test]
    fn meteor_hand_case() {
        // m=2, P=2/3, R=1/2, one chunk
        let p = 2.0 / 3.0;
        let r = 0.5;
        let f = 10.0 * p * r / (r + 9.0 * p);
        let expect = f * (1.0 - 0.5 * libm::pow(0.5, 3.0));
        let got = meteor_lite("a dog barks", &s(&["the dog barks loudly"]));
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.480_769_230_769).abs() < 1e-9);
    }

    #[test]
    fn meteor_identity_and_zero() {
        let got = meteor_lite("a dog barks loudly", &s(&["a dog barks loudly"]));
        assert!((got - (1.0 - 0.5 * libm::pow(0.25, 3.0))).abs() < 1e-12);
        assert_eq!(meteor_lite("cat meows", &s(&["a dog barks"])), 0.0);
    }

    #[test]
    fn meteor_stem_stage() {
        assert!(meteor_lite("dogs barking", &s(&["dog barked"])) > 0.0);
        assert_eq!(stem("barking"), "bark");
        assert_eq!(stem("is"), "is");
    }

    #[test]
    fn cider_zero_overlap_and_empty() {
        let items = [item("cat meows", &["a dog barks"]), item("", &["a bird sings"])];
        let sc = cider_d_items(&items).unwrap();
        assert_eq!(sc, vec![0.0, 0.0]);
        assert!(cider_d_items(&[item("x", &[])]).is_err());
    }

    #[test]
    fn cider_reference_order_invariant() {
        let a = [
            item("a dog barks loudly", &["a dog barks", "the dog is barking loudly"]),
            item("a bell rings", &["a bell rings twice", "church bells ring"]),
        ];
        let mut b = a.clone();
        b.iter_mut().for_each(|i| i.references.reverse());
        assert_eq!(cider_d(&a).unwrap(), cider_d(&b).unwrap());
        assert!(cider_d(&a).unwrap() > 0.0);
    }

    #[test]
    fn spider_cases() {
        assert_eq!(spider(10.0, Some(1.0)), (1.0, false));
        assert_eq!(spider(0.0, Some(0.0)), (0.0, false));
        assert_eq!(spider(5.0, None), (0.5, true));
        assert!((spider_fl(0.5, 0.95, 0.9, 0.1) - 0.05).abs() < 1e-15);
        assert_eq!(spider_fl(0.5, 0.5, 0.9, 0.1), 0.5);
        assert_eq!(spider_fl(0.5, 0.9, 0.9, 0.1), 0.5);
    }

    #[test]
    fn fluency_examples() {
        assert!(fluency_error_prob("a dog barks in the distance") < 0.5);
        assert!(fluency_error_prob("dog dog dog dog dog") > 0.9);
        assert!(fluency_error_prob("dog dog dog dog") > 0.9);
        assert_eq!(fluency_error_prob(""), 1.0);
    }

    struct BagEmbedder;
    impl SentenceEmbedder for BagEmbedder {
        fn embed(&self, c: &str) -> Result<Vec<f64>> {
            let mut v = vec![0.0; 16];
            for t in tokenize_ptb_lite(c) {
                let h = t.bytes().fold(7usize, |a, b| a * 31 + b as usize);
                v[h % 16] += 1.0;
            }
            Ok(v)
        }
    }

    #[test]
    fn fense_cases() {
        let g = FluencyGate::default();
        let refs = s(&["a dog barks loudly"]);
        let same = fense("a dog barks loudly", &refs, &BagEmbedder, &HeuristicFluency, g).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
        let raw = semantic_similarity("dog dog dog dog", &refs, &BagEmbedder).unwrap();
        let gated = fense("dog dog dog dog", &refs, &BagEmbedder, &HeuristicFluency, g).unwrap();
        assert!((gated - raw * 0.1).abs() < 1e-12);
    }

    #[test]
    fn corpus_report_flags() {
        let items = [item("a dog barks", &["a dog barks loudly"])];
        let p = Providers { spice: &NoSpice, fluency: &HeuristicFluency, embedder: None, gate: FluencyGate::default() };
        let r = evaluate_corpus(&items, &p).unwrap();
        assert_eq!(r.degraded_flags, s(&[DEGRADED_FENSE, DEGRADED_SPIDER]));
        assert!(r.corpus.contains_key("cider_d") && !r.corpus.contains_key("fense"));
    }
}
