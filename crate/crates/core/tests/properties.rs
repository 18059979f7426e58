use proptest::prelude::*;

use aacap_core::captioner::{Captioner, CaptionerConfig};
use aacap_core::clap::{cosine_similarity, infonce_loss};
use aacap_core::dataset::{build_vocab, encode_caption, normalize, normalize_tokens, Manifest, ManifestEntry, Split, Vocab};
use aacap_core::decoding::{clap_refine, Candidate, CandidateSet};
use aacap_core::frontend::{spec_augment, FeatureSeq, MelSpectrogram, SpecAugmentConfig};
use aacap_core::nn::Params;
use aacap_core::metrics::{cider_d_items, fense, meteor_lite, spider_fl, EvalItem, FluencyGate, HeuristicFluency, SentenceEmbedder};
use aacap_core::train::{lr_cosine, lr_linear};
use aacap_core::{Rng, Tensor};

const WORDS: [&str; 10] = ["a", "dog", "barks", "rain", "falls", "loudly", "the", "car", "engine", "hums"];

fn sentence(min: usize, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), min..=max).prop_map(|w| w.join(" "))
}

fn tiny_captioner(seed: u64) -> Captioner {
    let cfg = CaptionerConfig {
        vocab_size: 12,
        enc_dim: 8,
        enc_heads: 2,
        enc_ff: 16,
        proj_hidden: 16,
        dec_dim: 8,
        dec_heads: 2,
        dec_ff: 16,
        lora_rank: 2,
        lora_alpha: 4.0,
        ..CaptionerConfig::default()
    };
    let mut m = Captioner::new(cfg, &Rng::new(seed)).unwrap();
    // Non-zero LoRA factors so the adapters take part in the computation.
    let mut rng = Rng::new(seed ^ 0x55);
    for (_, t) in m.named_params_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    m
}

struct Bag;
impl SentenceEmbedder for Bag {
    fn embed(&self, caption: &str) -> aacap_core::Result<Vec<f64>> {
        let mut v = vec![0.1; WORDS.len()];
        for w in normalize_tokens(caption) {
            if let Some(i) = WORDS.iter().position(|x| *x == w) {
                v[i] += 1.0;
            }
        }
        Ok(v)
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn normalisation_is_idempotent(s in "[A-Za-z ,.!?'-]{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert_eq!(normalize_tokens(&once), normalize_tokens(&s));
    }

    #[test]
    fn encode_decode_round_trip(s in sentence(1, 12)) {
        let vocab = Vocab::from_words(WORDS.iter().map(|w| w.to_string()));
        let once = encode_caption(&s, &vocab);
        let back = vocab.decode_ids(once.ids());
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(encode_caption(&back, &vocab), once);
    }

    #[test]
    fn vocabulary_ignores_entry_order(caps in prop::collection::vec(sentence(1, 6), 2..8), seed in any::<u64>()) {
        let entries: Vec<ManifestEntry> = caps
            .iter()
            .enumerate()
            .map(|(i, c)| ManifestEntry { id: format!("c{i}"), audio_path: format!("c{i}.wav"), captions: vec![c.clone()], split: Split::Train })
            .collect();
        let mut shuffled = entries.clone();
        Rng::new(seed).shuffle(&mut shuffled);
        let a = build_vocab(&Manifest::new(None, entries).unwrap(), 1).unwrap();
        let b = build_vocab(&Manifest::new(None, shuffled).unwrap(), 1).unwrap();
        prop_assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        lambda in 1e-3f64..1e3,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = b.iter().map(|x| x * lambda).collect();
        let (c1, c2) = (cosine_similarity(&a, &b).unwrap(), cosine_similarity(&a, &scaled).unwrap());
        prop_assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn infonce_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..7, temp in 0.05f64..1.0) {
        let mut rng = Rng::new(seed);
        let audio: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let text: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let pa: Vec<Vec<f64>> = order.iter().map(|&i| audio[i].clone()).collect();
        let pt: Vec<Vec<f64>> = order.iter().map(|&i| text[i].clone()).collect();
        let (l1, l2) = (infonce_loss(&audio, &text, temp).unwrap(), infonce_loss(&pa, &pt, temp).unwrap());
        prop_assert!((l1 - l2).abs() < 1e-10);
    }

    #[test]
    fn spider_fl_never_raises_the_score(s in 0.0f64..=1.0, p in 0.0f64..=1.0) {
        let g = spider_fl(s, p, 0.9, 0.1);
        prop_assert!(g <= s);
        if s > 0.0 {
            prop_assert_eq!(g == s, p <= 0.9);
        }
    }

    #[test]
    fn metrics_ignore_reference_order(
        items in prop::collection::vec((sentence(0, 8), prop::collection::vec(sentence(1, 8), 1..5)), 1..6),
        seed in any::<u64>(),
    ) {
        let a: Vec<EvalItem> = items
            .iter()
            .enumerate()
            .map(|(i, (c, r))| EvalItem { id: i.to_string(), candidate: c.clone(), references: r.clone() })
            .collect();
        let mut rng = Rng::new(seed);
        let b: Vec<EvalItem> = a
            .iter()
            .map(|it| {
                let mut r = it.references.clone();
                rng.shuffle(&mut r);
                EvalItem { references: r, ..it.clone() }
            })
            .collect();
        for (x, y) in cider_d_items(&a).unwrap().iter().zip(cider_d_items(&b).unwrap()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(meteor_lite(&x.candidate, &x.references), meteor_lite(&y.candidate, &y.references));
            let fx = fense(&x.candidate, &x.references, &Bag, &HeuristicFluency, FluencyGate::default()).unwrap();
            let fy = fense(&y.candidate, &y.references, &Bag, &HeuristicFluency, FluencyGate::default()).unwrap();
            prop_assert_eq!(fx, fy);
        }
    }

    #[test]
    fn meteor_is_bounded(c in sentence(0, 8), refs in prop::collection::vec(sentence(1, 8), 1..4)) {
        let m = meteor_lite(&c, &refs);
        prop_assert!((0.0..=1.0).contains(&m));
        let cand: std::collections::BTreeSet<String> = normalize_tokens(&c).into_iter().collect();
        let any_match = refs.iter().flat_map(|r| normalize_tokens(r)).any(|w| cand.contains(&w));
        if !any_match {
            prop_assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn downsampled_length_is_ceil_fifth(t in 1usize..40, seed in any::<u64>()) {
        let m = tiny_captioner(1);
        let frames = Tensor::randn(&[t, 8], 1.0, &mut Rng::new(seed));
        let out = m.project_downsample(&FeatureSeq { frames, rate_hz: 50.0 }).unwrap();
        prop_assert_eq!(out.len(), t.div_ceil(5));
        prop_assert_eq!(out.dim(), 8);
    }

    #[test]
    fn decoder_rows_ignore_later_rows(seed in any::<u64>(), n in 3usize..12, p_frac in 0.0f64..1.0, t_frac in 0.0f64..1.0) {
        let m = tiny_captioner(seed % 7);
        let p = 1 + ((n - 1) as f64 * p_frac) as usize;
        let t = (p - 1) + (((n - p) as f64) * t_frac) as usize;
        let mut rng = Rng::new(seed);
        let rows = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let mut altered = rows.clone();
        for r in t + 1..n {
            for v in altered.row_mut(r) {
                *v = 100.0 * rng.normal();
            }
        }
        let (a, _) = m.decoder.forward(&rows, p).unwrap();
        let (b, _) = m.decoder.forward(&altered, p).unwrap();
        for r in 0..=t {
            prop_assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn spec_augment_touches_only_masked_cells(seed in any::<u64>(), t in 12usize..40, nt in 0usize..3, nf in 0usize..3) {
        let mut rng = Rng::new(seed);
        let mel = MelSpectrogram { frames: Tensor::randn(&[t, 128], 1.0, &mut rng) };
        let cfg = SpecAugmentConfig { n_time_masks: nt, max_t: 5, n_freq_masks: nf, max_f: 10 };
        let out = spec_augment(&mel, &mut rng, &cfg).unwrap();
        let fill = mel.frames.data().iter().sum::<f64>() / mel.frames.len() as f64;
        let changed = mel.frames.data().iter().zip(out.frames.data()).filter(|(a, b)| a != b).count();
        for (a, b) in mel.frames.data().iter().zip(out.frames.data()) {
            prop_assert!(a == b || *b == fill);
        }
        let bound = (nt * 5 * 128 + nf * 10 * t) as f64 / (t * 128) as f64;
        prop_assert!(changed as f64 / (t * 128) as f64 <= bound + 1e-12);
    }

    #[test]
    fn refine_ranking_is_a_permutation(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = Rng::new(seed);
        let texts: Vec<Vec<f64>> = (0..k).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let audio: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let set = CandidateSet {
            id: "x".into(),
            candidates: (0..k).map(|i| Candidate { caption: i.to_string(), beam_size: i + 2, lm_score: 0.0, clap_score: None }).collect(),
        };
        let r = clap_refine(&set, &audio, |c| Ok(texts[c.parse::<usize>().unwrap()].clone())).unwrap();
        let mut sizes: Vec<usize> = r.ranked.candidates.iter().map(|c| c.beam_size).collect();
        sizes.sort_unstable();
        prop_assert_eq!(sizes, (2..k + 2).collect::<Vec<_>>());
        let scores: Vec<f64> = r.ranked.candidates.iter().map(|c| c.clap_score.unwrap()).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(&r.chosen, &r.ranked.candidates[0].caption);
    }

    #[test]
    fn schedules_meet_peak_at_the_junction(warmup in 1usize..50, extra in 1usize..200, peak in 1e-6f64..1e-1, spe in 1usize..20) {
        let total = warmup + extra;
        prop_assert_eq!(lr_linear(warmup, warmup, peak, total), peak);
        prop_assert!((lr_linear(warmup - 1, warmup, peak, total) - peak * (warmup - 1) as f64 / warmup as f64).abs() < 1e-18);
        let (we, te) = (1 + warmup % 5, 1 + warmup % 5 + extra % 9 + 1);
        prop_assert_eq!(lr_cosine(we * spe, we, peak, te, spe), peak);
        prop_assert_eq!(lr_cosine(te * spe, we, peak, te, spe), 0.0);
        for s in 0..=te * spe {
            let lr = lr_cosine(s, we, peak, te, spe);
            prop_assert!((0.0..=peak).contains(&lr));
        }
    }
}

#[test]
fn random_streams_are_pure_functions_of_the_seed() {
    let draw = |s: u64| {
        let mut r = Rng::new(s).split(3);
        (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
    };
    assert_eq!(draw(42), draw(42));
    assert_ne!(draw(42), draw(43));
    assert_eq!(tiny_captioner(5).named_params().len(), tiny_captioner(5).named_params().len());
    let (a, b) = (tiny_captioner(5), tiny_captioner(5));
    for ((n1, t1), (n2, t2)) in a.named_params().iter().zip(b.named_params()) {
        assert_eq!(n1, &n2);
        assert_eq!(t1.data(), t2.data());
    }
}
