//! Round-trip translation paraphrasing of training captions.
//!
//! A [`Translator`] serves one leg at a time. [`StubTranslator`] is the
//! offline stand-in: it replays a small sentence memory verbatim and otherwise
//! rewrites the caption with seeded synonym substitution plus a leading-clause
//! swap, carrying the rewrite through a tagged pseudo-pivot.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize, normalize_tokens, Manifest, Split};
use crate::{Error, Result, Rng};

pub const DEFAULT_PIVOT: &str = "zh";
pub const SOURCE_LANG: &str = "en";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationRequest {
    pub text: String,
    pub source_lang: String,
    pub target_lang: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationResponse {
    pub text: String,
}

pub trait Translator {
    fn translate(&self, request: &TranslationRequest) -> Result<TranslationResponse>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphrasePair {
    pub original: String,
    pub paraphrase: String,
    pub pivot: String,
    pub pivot_lang: String,
    /// Paraphrase and original normalise to the same text.
    pub identical: bool,
}

/// One sentence-level memory entry: source, pivot rendering, and back-translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub source: String,
    pub pivot: String,
    pub back: String,
}

/// The golden round trip that ships with the stub.
pub fn reference_memory() -> Vec<MemoryEntry> {
    alloc::vec![MemoryEntry {
        source: "A person is very carefully wrapping a gift for someone else.".into(),
        pivot: "一个人正在非常小心地为别人包装礼物。".into(),
        back: "Someone is wrapping a present for someone else with great care.".into(),
    }]
}

/// Synonym table bundled with the stub.
pub fn default_synonyms() -> BTreeMap<String, Vec<String>> {
    const TABLE: &[(&str, &[&str])] = &[
        ("dog", &["hound", "canine"]),
        ("barks", &["yelps", "woofs"]),
        ("bird", &["songbird"]),
        ("chirps", &["tweets", "sings"]),
        ("engine", &["motor"]),
        ("hums", &["drones", "whirs"]),
        ("bell", &["chime"]),
        ("rings", &["tolls", "chimes"]),
        ("water", &["stream"]),
        ("flows", &["runs", "trickles"]),
        ("man", &["person", "gentleman"]),
        ("speaks", &["talks"]),
        ("siren", &["alarm"]),
        ("wails", &["howls", "blares"]),
        ("clock", &["timepiece"]),
        ("ticks", &["clicks"]),
        ("loudly", &["noisily"]),
        ("softly", &["quietly", "gently"]),
        ("while", &["as"]),
        ("gift", &["present"]),
        ("car", &["vehicle"]),
        ("people", &["persons", "folks"]),
    ];
    TABLE
        .iter()
        .map(|(w, s)| (w.to_string(), s.iter().map(|x| x.to_string()).collect()))
        .collect()
}

const STUB_TAG: &str = "\u{27e6}stub\u{27e7} ";

#[derive(Debug, Clone, PartialEq)]
pub struct StubTranslator {
    pub seed: u64,
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub memory: Vec<MemoryEntry>,
}

impl StubTranslator {
    pub fn new(seed: u64) -> Self {
        Self { seed, synonyms: default_synonyms(), memory: reference_memory() }
    }

    pub fn with_synonyms(seed: u64, synonyms: BTreeMap<String, Vec<String>>) -> Self {
        Self { seed, synonyms, memory: reference_memory() }
    }

    /// Normalised rewrite: leading clause moved behind the main clause, then synonyms.
    pub fn rewrite(&self, text: &str) -> String {
        let reordered = match text.split_once(',') {
            Some((lead, rest)) if !normalize(lead).is_empty() && !normalize(rest).is_empty() => {
                format!("{} {}", normalize(rest), normalize(lead))
            }
            _ => normalize(text),
        };
        let mut rng = Rng::new(self.seed ^ fnv1a(reordered.as_bytes()));
        reordered
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| match self.synonyms.get(w) {
                Some(options) if !options.is_empty() => options[rng.below(options.len())].clone(),
                _ => w.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Translator for StubTranslator {
    fn translate(&self, req: &TranslationRequest) -> Result<TranslationResponse> {
        if req.text.trim().is_empty() {
            return Err(Error::Translation { attempts: 1, message: "empty request text".into() });
        }
        let forward = req.source_lang == SOURCE_LANG;
        for m in &self.memory {
            if forward && m.source == req.text {
                return Ok(TranslationResponse { text: m.pivot.clone() });
            }
            if !forward && m.pivot == req.text {
                return Ok(TranslationResponse { text: m.back.clone() });
            }
        }
        let text = if forward {
            format!("{STUB_TAG}{}", self.rewrite(&req.text))
        } else {
            req.text.strip_prefix(STUB_TAG).unwrap_or(&req.text).to_string()
        };
        Ok(TranslationResponse { text })
    }
}

fn translate_with_retries(client: &dyn Translator, req: &TranslationRequest, max_attempts: usize) -> Result<String> {
    let mut last = String::new();
    for _ in 0..max_attempts.max(1) {
        match client.translate(req) {
            Ok(r) if !r.text.trim().is_empty() => return Ok(r.text),
            Ok(_) => last = "empty translation".into(),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Translation { attempts: max_attempts.max(1) as u32, message: last })
}

/// English to `pivot_lang` and back, each leg tried up to `max_attempts` times.
pub fn back_translate(caption: &str, client: &dyn Translator, pivot_lang: &str, max_attempts: usize) -> Result<ParaphrasePair> {
    let there = TranslationRequest {
        text: caption.to_string(),
        source_lang: SOURCE_LANG.into(),
        target_lang: pivot_lang.into(),
    };
    let pivot = translate_with_retries(client, &there, max_attempts)?;
    let back = TranslationRequest { text: pivot.clone(), source_lang: pivot_lang.into(), target_lang: SOURCE_LANG.into() };
    let paraphrase = translate_with_retries(client, &back, max_attempts)?;
    Ok(ParaphrasePair {
        identical: normalize(&paraphrase) == normalize(caption),
        original: caption.to_string(),
        paraphrase,
        pivot,
        pivot_lang: pivot_lang.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCaption {
    pub id: String,
    pub caption: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub manifest: Manifest,
    pub pairs: Vec<ParaphrasePair>,
    pub skipped: Vec<SkippedCaption>,
}

/// Appends one paraphrase per caption to train entries; other splits pass through.
pub fn augment_manifest(manifest: &Manifest, client: &dyn Translator, pivot_lang: &str, max_attempts: usize) -> Result<AugmentOutcome> {
    let mut out = manifest.clone();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for entry in out.entries.iter_mut().filter(|e| e.split == Split::Train) {
        let mut extra = Vec::with_capacity(entry.captions.len());
        for c in &entry.captions {
            match back_translate(c, client, pivot_lang, max_attempts) {
                Ok(p) => {
                    extra.push(p.paraphrase.clone());
                    pairs.push(p);
                }
                Err(e) => skipped.push(SkippedCaption { id: entry.id.clone(), caption: c.clone(), error: e.to_string() }),
            }
        }
        entry.captions.extend(extra);
    }
    out.validate()?;
    Ok(AugmentOutcome { manifest: out, pairs, skipped })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabStats {
    pub before: usize,
    pub after: usize,
    pub new_words: Vec<String>,
}

fn word_set(m: &Manifest) -> BTreeSet<String> {
    m.entries.iter().flat_map(|e| e.captions.iter()).flat_map(|c| normalize_tokens(c)).collect()
}

/// Word-type counts before and after augmentation; errors if any word was lost.
pub fn vocab_stats(before: &Manifest, after: &Manifest) -> Result<VocabStats> {
    let b = word_set(before);
    let a = word_set(after);
    if let Some(w) = b.difference(&a).next() {
        return Err(Error::Data(format!("augmentation dropped vocabulary word `{w}`")));
    }
    Ok(VocabStats { before: b.len(), after: a.len(), new_words: a.difference(&b).cloned().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ManifestEntry;
    use alloc::vec;

    fn entry(id: &str, split: Split, caps: &[&str]) -> ManifestEntry {
        ManifestEntry { id: id.into(), audio_path: format!("{id}.wav"), captions: caps.iter().map(|c| c.to_string()).collect(), split }
    }

    #[test]
    fn golden_round_trip() {
        let stub = StubTranslator::new(0);
        let p = back_translate("A person is very carefully wrapping a gift for someone else.", &stub, "zh", 3).unwrap();
        assert_eq!(p.pivot, "一个人正在非常小心地为别人包装礼物。");
        assert_eq!(p.paraphrase, "Someone is wrapping a present for someone else with great care.");
        assert!(!p.identical);
    }

    #[test]
    fn empty_table_is_identity() {
        let stub = StubTranslator::with_synonyms(1, BTreeMap::new());
        let p = back_translate("A dog barks!", &stub, "zh", 1).unwrap();
        assert_eq!(p.paraphrase, "a dog barks");
        assert!(p.identical);
    }

    #[test]
    fn single_synonym() {
        let table = BTreeMap::from([("dog".to_string(), vec!["hound".to_string()])]);
        let stub = StubTranslator::with_synonyms(9, table);
        assert_eq!(back_translate("a dog barks", &stub, "zh", 1).unwrap().paraphrase, "a hound barks");
    }

    #[test]
    fn clause_swap() {
        let stub = StubTranslator::with_synonyms(0, BTreeMap::new());
        assert_eq!(stub.rewrite("In the distance, a dog barks."), "a dog barks in the distance");
    }

    struct Failing;
    impl Translator for Failing {
        fn translate(&self, _: &TranslationRequest) -> Result<TranslationResponse> {
            Err(Error::Data("offline".into()))
        }
    }

    #[test]
    fn failures_skip_with_attempt_count() {
        match back_translate("a dog barks", &Failing, "zh", 3) {
            Err(Error::Translation { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        let m = Manifest::new(None, vec![entry("a", Split::Train, &["a dog barks"])]).unwrap();
        let out = augment_manifest(&m, &Failing, "zh", 2).unwrap();
        assert_eq!(out.manifest, m);
        assert_eq!(out.skipped.len(), 1);
    }

    #[test]
    fn manifest_doubling_and_split_rule() {
        let five = ["a dog barks", "a bell rings", "water flows softly", "a man speaks", "a clock ticks"];
        let m = Manifest::new(
            Some(5),
            vec![entry("t", Split::Train, &five), entry("v", Split::Valid, &five[..2]), entry("e", Split::Eval, &five)],
        )
        .unwrap();
        let stub = StubTranslator::new(4);
        let out = augment_manifest(&m, &stub, "zh", 1).unwrap();
        assert_eq!(out.manifest.entries[0].captions.len(), 10);
        assert_eq!(&out.manifest.entries[0].captions[..5], &m.entries[0].captions[..]);
        assert_eq!(out.manifest.entries[1..], m.entries[1..]);
        assert_eq!(out, augment_manifest(&m, &stub, "zh", 1).unwrap());
        let stats = vocab_stats(&m, &out.manifest).unwrap();
        assert!(stats.after >= stats.before);
        assert_eq!(stats.after, stats.before + stats.new_words.len());
    }

    #[test]
    fn three_new_synonyms() {
        let table = BTreeMap::from([
            ("dog".to_string(), vec!["hound".to_string()]),
            ("barks".to_string(), vec!["yelps".to_string()]),
            ("loudly".to_string(), vec!["noisily".to_string()]),
        ]);
        let m = Manifest::new(None, vec![entry("t", Split::Train, &["a dog barks loudly"])]).unwrap();
        let out = augment_manifest(&m, &StubTranslator::with_synonyms(0, table), "zh", 1).unwrap();
        let stats = vocab_stats(&m, &out.manifest).unwrap();
        assert_eq!(stats.after, stats.before + 3);
        let empty = augment_manifest(&m, &StubTranslator::with_synonyms(0, BTreeMap::new()), "zh", 1).unwrap();
        let s = vocab_stats(&m, &empty.manifest).unwrap();
        assert_eq!(s.before, s.after);
    }
}
