//! Glue shared by the command line and the test suites: vocabulary assembly,
//! example construction, and per-clip candidate generation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::captioner::Captioner;
use crate::clap::ClapModel;
use crate::dataset::{encode_caption, normalize_tokens, Vocab};
use crate::decoding::{self, Candidate, CandidateSet, CaptionerLm, GenerationOutcome, RefinedSet};
use crate::frontend::MelSpectrogram;
use crate::metrics::SentenceEmbedder;
use crate::train::{CaptionExample, ClapExample};
use crate::{Result, Rng};

/// One clip with its captions, already in log-mel form.
#[derive(Debug, Clone)]
pub struct ClipInput {
    pub id: String,
    pub mel: MelSpectrogram,
    pub captions: Vec<String>,
}

/// Caption words plus the prompt words, so the prompt never encodes to unk.
pub fn caption_vocab<'a, I: IntoIterator<Item = &'a str>>(captions: I, prompt: &str) -> Vocab {
    let mut vocab = Vocab::from_words(captions.into_iter().flat_map(normalize_tokens));
    for w in normalize_tokens(prompt) {
        vocab.insert(&w);
    }
    vocab
}

/// One teacher-forcing example per caption; encoder features are computed once per clip.
pub fn caption_examples(model: &Captioner, vocab: &Vocab, clips: &[ClipInput]) -> Result<Vec<CaptionExample>> {
    let mut out = Vec::new();
    for c in clips {
        let features = model.encode_mel(&c.mel)?;
        for cap in &c.captions {
            out.push(CaptionExample {
                id: c.id.clone(),
                mel: c.mel.clone(),
                features: features.clone(),
                target: encode_caption(cap, vocab),
            });
        }
    }
    Ok(out)
}

/// One contrastive pair per caption.
pub fn clap_examples(model: &ClapModel, vocab: &Vocab, clips: &[ClipInput]) -> Result<Vec<ClapExample>> {
    let mut out = Vec::new();
    for c in clips {
        let patches = model.audio_patches(&c.mel)?;
        for cap in &c.captions {
            out.push(ClapExample { id: c.id.clone(), patches: patches.clone(), text_ids: vocab.ids(cap) });
        }
    }
    Ok(out)
}

/// Greedy caption for a clip.
pub fn greedy_caption(model: &Captioner, vocab: &Vocab, mel: &MelSpectrogram, max_len: usize) -> Result<String> {
    let prefix = model.inference_prefix(&model.encode_mel(mel)?, &model.prompt_ids(vocab))?;
    let hyp = decoding::greedy(&CaptionerLm::new(model, prefix), max_len)?;
    Ok(vocab.decode_ids(&hyp.tokens))
}

/// The CLAP text tower as a sentence embedder.
pub struct ClapTextEmbedder<'a> {
    pub model: &'a ClapModel,
    pub vocab: &'a Vocab,
}

impl SentenceEmbedder for ClapTextEmbedder<'_> {
    fn embed(&self, caption: &str) -> Result<Vec<f64>> {
        self.model.embed_text(caption, self.vocab).map(|e| e.vector)
    }
}

/// Beam candidates for one clip, one per beam size.
pub fn beam_candidates(
    id: &str,
    model: &Captioner,
    vocab: &Vocab,
    mel: &MelSpectrogram,
    beam_sizes: &[usize],
    max_len: usize,
) -> Result<GenerationOutcome> {
    let prefix = model.inference_prefix(&model.encode_mel(mel)?, &model.prompt_ids(vocab))?;
    decoding::generate_candidates(id, &CaptionerLm::new(model, prefix), vocab, beam_sizes, max_len)
}

/// A single nucleus-sampled caption; `beam_size` 0 marks a sampled candidate.
pub fn nucleus_candidate(
    id: &str,
    model: &Captioner,
    vocab: &Vocab,
    mel: &MelSpectrogram,
    params: (f64, f64, usize),
    rng: &mut Rng,
) -> Result<CandidateSet> {
    let (temperature, top_p, max_len) = params;
    let prefix = model.inference_prefix(&model.encode_mel(mel)?, &model.prompt_ids(vocab))?;
    let h = decoding::nucleus_sample(&CaptionerLm::new(model, prefix), temperature, top_p, max_len, rng)?;
    Ok(CandidateSet {
        id: id.into(),
        candidates: alloc::vec![Candidate {
            caption: vocab.decode_ids(&h.tokens),
            beam_size: 0,
            lm_score: h.score,
            clap_score: None,
        }],
    })
}

/// CLAP-Refine over a candidate set for one clip.
pub fn refine(set: &CandidateSet, clap: &ClapModel, vocab: &Vocab, mel: &MelSpectrogram) -> Result<RefinedSet> {
    let audio = clap.embed_mel(mel)?;
    decoding::clap_refine(set, &audio.vector, |c| clap.embed_text(c, vocab).map(|e| e.vector))
}
