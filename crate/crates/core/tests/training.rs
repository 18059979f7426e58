use aacap_core::captioner::{Captioner, CaptionerConfig, DEFAULT_PROMPT};
use aacap_core::clap::{ClapConfig, ClapModel};
use aacap_core::frontend::log_mel;
use aacap_core::nn::Params;
use aacap_core::pipeline::{caption_examples, caption_vocab, clap_examples, ClipInput};
use aacap_core::synth::generate_corpus;
use aacap_core::train::{adam_step, captioner_loss, clap_loss, train_captioner, train_clap, OptimizerState, Schedule, TrainConfig};
use aacap_core::Rng;

fn clips(n: usize, seed: u64) -> Vec<ClipInput> {
    generate_corpus(n, 0, 0, seed)
        .iter()
        .map(|i| ClipInput { id: i.id.clone(), mel: log_mel(&i.clip).unwrap(), captions: vec![i.captions[0].clone()] })
        .collect()
}

fn short(total: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        peak_lr: 3e-3,
        total_updates: total,
        warmup: 5,
        schedule: Schedule::Linear,
        validate_every: 10,
        seed,
        spec_augment: None,
    }
}

fn setup(n: usize) -> (Captioner, Vec<u32>, Vec<aacap_core::train::CaptionExample>) {
    let c = clips(n, 2);
    let vocab = caption_vocab(c.iter().map(|x| x.captions[0].as_str()), DEFAULT_PROMPT);
    let model = Captioner::new(CaptionerConfig { vocab_size: vocab.len(), ..CaptionerConfig::default() }, &Rng::new(4)).unwrap();
    let ex = caption_examples(&model, &vocab, &c).unwrap();
    (model.clone(), model.prompt_ids(&vocab), ex)
}

#[test]
fn a_step_changes_no_frozen_tensor() {
    let (mut model, prompt, ex) = setup(4);
    let before: Vec<(String, Vec<u8>, bool)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.requires_grad()))
        .collect();
    for e in &ex {
        model.loss_and_backward(&e.features, &prompt, &e.target).unwrap();
    }
    adam_step(&mut model, &mut OptimizerState::default(), 1e-2).unwrap();
    let mut moved = 0;
    for ((name, bytes, trainable), (_, t)) in before.iter().zip(model.named_params()) {
        let now: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        if *trainable {
            moved += usize::from(&now != bytes);
        } else {
            assert_eq!(&now, bytes, "frozen tensor {name} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn same_seed_same_run_and_best_is_argmin() {
    let (model, prompt, ex) = setup(6);
    let (train, valid) = ex.split_at(4);
    let a = train_captioner(&model, &short(40, 1), &prompt, train, valid).unwrap();
    let b = train_captioner(&model, &short(40, 1), &prompt, train, valid).unwrap();
    assert_eq!(a.train_losses, b.train_losses);
    assert_eq!(a.log, b.log);

    let best = a.log.iter().min_by(|x, y| x.valid_loss.total_cmp(&y.valid_loss)).unwrap();
    assert_eq!(a.best_step, best.step);
    assert_eq!(a.best_valid_loss, best.valid_loss);
    assert_eq!(captioner_loss(&a.best, &prompt, valid).unwrap(), a.best_valid_loss);
    // Validation at every cadence step plus the final step.
    assert_eq!(a.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
}

#[test]
fn overfit_loss_trends_down() {
    let (model, prompt, ex) = setup(10);
    let out = train_captioner(&model, &short(200, 3), &prompt, &ex, &ex).unwrap();
    // Deltas between consecutive 10-step means of the batch loss.
    let means: Vec<f64> = out.train_losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let mut deltas: Vec<f64> = means.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.sort_by(f64::total_cmp);
    assert!(deltas[deltas.len() / 2] < 0.0, "median delta {}", deltas[deltas.len() / 2]);
    assert!(means.last().unwrap() < &means[0]);
}

#[test]
fn clap_training_is_reproducible_and_improves() {
    let c = clips(12, 5);
    let vocab = caption_vocab(c.iter().map(|x| x.captions[0].as_str()), "");
    let model = ClapModel::new(ClapConfig { vocab_size: vocab.len(), ..ClapConfig::default() }, &Rng::new(1)).unwrap();
    let ex = clap_examples(&model, &vocab, &c).unwrap();
    let (train, valid) = ex.split_at(8);
    let cfg = TrainConfig { batch_size: 4, peak_lr: 2e-3, schedule: Schedule::Cosine, ..short(60, 2) };
    let a = train_clap(&model, &cfg, train, valid).unwrap();
    let b = train_clap(&model, &cfg, train, valid).unwrap();
    assert_eq!(a.train_losses, b.train_losses);
    assert_eq!(a.best_valid_loss, b.best_valid_loss);
    let t = a.best.temperature_value();
    assert!((1e-3..=1.0).contains(&t));
    assert!(clap_loss(&a.best, train, 8).unwrap() < clap_loss(&model, train, 8).unwrap());
}
