//! Manifests, caption normalisation and the word-level vocabulary.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const MAX_CAPTIONS: usize = 10;

/// Lowercases, strips ASCII punctuation (apostrophes and hyphens survive
/// between two alphanumerics) and splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut cleaned = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_punctuation() {
            let intra = (c == '\'' || c == '-')
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            cleaned.push(if intra { c } else { ' ' });
        } else {
            cleaned.extend(c.to_lowercase());
        }
    }
    cleaned.split_whitespace().map(ToString::to_string).collect()
}

pub fn normalize(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: String,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Reference count required of every eval entry, when declared.
    pub refs_per_eval: Option<usize>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(refs_per_eval: Option<usize>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { refs_per_eval, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate id `{}`", e.id)));
            }
            // Train entries may hold paraphrases on top of up to ten originals.
            let max = if e.split == Split::Train { 2 * MAX_CAPTIONS } else { MAX_CAPTIONS };
            if e.captions.is_empty() || e.captions.len() > max {
                return Err(Error::Data(format!(
                    "entry `{}` has {} captions, expected 1..={max}",
                    e.id,
                    e.captions.len()
                )));
            }
            if let (Split::Eval, Some(k)) = (e.split, self.refs_per_eval) {
                if e.captions.len() != k {
                    return Err(Error::Data(format!(
                        "eval entry `{}` has {} references, header declares {k}",
                        e.id,
                        e.captions.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Word vocabulary with ids `0..4` reserved for pad, bos, eos and unk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Builds from a token list whose first four entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words.into_iter().collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(set.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        Self::from_tokens(tokens).expect("specials are unique and first")
    }

    /// Adds a word if absent and returns its id.
    pub fn insert(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-special words.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[SPECIALS.len()..].iter().map(String::as_str)
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids for already-normalised words, without bos/eos.
    pub fn ids(&self, text: &str) -> Vec<u32> {
        normalize_tokens(text).iter().map(|w| self.id(w)).collect()
    }

    /// Surface text for generated ids; stops at eos and skips pad/bos.
    pub fn decode_ids(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => words.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        words.join(" ")
    }
}

/// `bos + caption ids + eos`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        let ok = ids.len() >= 2
            && ids[0] == BOS
            && ids[ids.len() - 1] == EOS
            && !ids[1..ids.len() - 1].iter().any(|&i| i == PAD || i == BOS || i == EOS);
        if !ok {
            return Err(Error::Data(format!("malformed token sequence {ids:?}")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Caption ids followed by eos: the positions the decoder must predict.
    pub fn targets(&self) -> &[u32] {
        &self.ids[1..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Vocabulary over the train split; words seen fewer than `min_count` times
/// are left out and encode to unk.
pub fn build_vocab(manifest: &Manifest, min_count: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut any = false;
    for e in manifest.split(Split::Train) {
        any = true;
        for c in &e.captions {
            for w in normalize_tokens(c) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::Data("train split is empty".into()));
    }
    Ok(Vocab::from_words(counts.into_iter().filter(|(_, n)| *n >= min_count).map(|(w, _)| w)))
}

pub fn encode_caption(text: &str, vocab: &Vocab) -> TokenSeq {
    let mut ids = Vec::with_capacity(8);
    ids.push(BOS);
    ids.extend(vocab.ids(text));
    ids.push(EOS);
    TokenSeq { ids }
}

pub fn decode_tokens(seq: &TokenSeq, vocab: &Vocab) -> String {
    vocab.decode_ids(&seq.ids)
}
