//! Finite-difference audit of every hand-written backward pass.
//!
//! Each probe builds a tiny instance of a layer, contracts its output with a
//! fixed random tensor to get a scalar, and compares the analytic gradients of
//! the inputs and of every trainable parameter against central differences.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::captioner::{Captioner, CaptionerConfig, Mode};
use crate::clap::{infonce_with_grads, ClapConfig, ClapModel};
use crate::dataset::encode_caption;
use crate::frontend::{FeatureSeq, PatchEmbed};
use crate::nn::{self, Block, Embedding, LayerNorm, Linear, LoraAdapter, LoraLinear, Mlp, MultiHeadAttention, Params, Transformer};
use crate::ops::{self, finite_difference_check, AttnMask};
use crate::pipeline::caption_vocab;
use crate::{Result, Rng, Tensor};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// Largest `|analytic - numeric| / max(1, |analytic|)` over inputs and parameters.
    pub max_rel_err: f64,
}

fn contract(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error over every trainable tensor of `model`.
pub fn check_params<M, L, B>(model: &M, loss: L, backward: B) -> f64
where
    M: Params + Clone,
    L: Fn(&M) -> f64,
    B: Fn(&mut M),
{
    let mut m = model.clone();
    m.zero_grad();
    backward(&mut m);
    let analytic: Vec<(usize, Vec<f64>)> = m
        .named_params()
        .iter()
        .enumerate()
        .filter(|(_, (_, t))| t.requires_grad())
        .map(|(i, (_, t))| (i, t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])))
        .collect();
    let mut probe = model.clone();
    let mut worst = 0.0_f64;
    for (pi, grad) in analytic {
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.named_params_mut()[pi].1.data()[j];
            probe.named_params_mut()[pi].1.data_mut()[j] = orig + STEP;
            let plus = loss(&probe);
            probe.named_params_mut()[pi].1.data_mut()[j] = orig - STEP;
            let minus = loss(&probe);
            probe.named_params_mut()[pi].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

fn report(name: &str, errs: &[f64]) -> GradReport {
    GradReport { name: String::from(name), max_rel_err: errs.iter().copied().fold(0.0, f64::max) }
}

fn trainable<M: Params>(mut m: M) -> M {
    m.set_trainable(true);
    m
}

fn layer_probe<M, F, B>(name: &str, model: M, x: &Tensor, r: &Tensor, fwd: F, bwd: B) -> GradReport
where
    M: Params + Clone,
    F: Fn(&M, &Tensor) -> Tensor,
    B: Fn(&mut M, &Tensor, &Tensor) -> Tensor,
{
    let model = trainable(model);
    let input = finite_difference_check(
        |xx| {
            let mut m = model.clone();
            m.zero_grad();
            (contract(&fwd(&m, xx), r), bwd(&mut m, xx, r).into_data())
        },
        x,
        STEP,
    );
    let params = check_params(
        &model,
        |m| contract(&fwd(m, x), r),
        |m| {
            bwd(m, x, r);
        },
    );
    report(name, &[input, params])
}

/// Runs every probe; all errors should sit far below `1e-4`.
pub fn audit(seed: u64) -> Result<Vec<GradReport>> {
    let root = Rng::new(seed);
    let mut rng = root.split(0);
    let mut out = Vec::new();
    let (n, d) = (5, 6);
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let r = Tensor::randn(&[n, d], 1.0, &mut rng);

    // matmul through the affine layer
    let r4 = Tensor::randn(&[n, 4], 1.0, &mut rng);
    out.push(layer_probe(
        "linear",
        Linear::new(d, 4, &mut rng),
        &x,
        &r4,
        |m, x| m.forward(x).unwrap(),
        |m, x, r| m.backward(x, r).unwrap(),
    ));

    let targets = [0usize, 3, 5, 1, 2];
    let ce = finite_difference_check(
        |z| {
            let (l, g) = ops::cross_entropy(z, &targets).unwrap();
            (l, g.into_data())
        },
        &x,
        STEP,
    );
    out.push(report("softmax_cross_entropy", &[ce]));

    let mut ln = LayerNorm::new(d);
    ln.gain = Tensor::randn(&[d], 1.0, &mut rng);
    ln.bias = Tensor::randn(&[d], 1.0, &mut rng);
    out.push(layer_probe("layer_norm", ln, &x, &r, |m, x| m.forward(x).unwrap(), |m, x, r| m.backward(x, r)));

    let g = finite_difference_check(|z| (contract(&ops::gelu(z), &r), ops::gelu_backward(z, &r).into_data()), &x, STEP);
    out.push(report("gelu", &[g]));

    for (name, mask) in [
        ("attention_full", AttnMask::Full),
        ("attention_causal", AttnMask::Causal),
        ("attention_prefix", AttnMask::Prefix(2)),
    ] {
        let q = Tensor::randn(&[n, 3], 1.0, &mut rng);
        let k = Tensor::randn(&[n, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let ro = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let value = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let (o, p) = ops::attention_forward(q, k, v, mask).unwrap();
            let grads = ops::attention_backward(q, k, v, &p, &ro).unwrap();
            (contract(&o, &ro), grads)
        };
        let eq = finite_difference_check(|z| { let (l, g) = value(z, &k, &v); (l, g.0.into_data()) }, &q, STEP);
        let ek = finite_difference_check(|z| { let (l, g) = value(&q, z, &v); (l, g.1.into_data()) }, &k, STEP);
        let ev = finite_difference_check(|z| { let (l, g) = value(&q, &k, z); (l, g.2.into_data()) }, &v, STEP);
        out.push(report(name, &[eq, ek, ev]));
    }

    let ids = [2u32, 0, 2, 5];
    let emb = trainable(Embedding::new(7, d, &mut rng));
    let re = Tensor::randn(&[ids.len(), d], 1.0, &mut rng);
    let e = check_params(&emb, |m| contract(&m.forward(&ids).unwrap(), &re), |m| m.backward(&ids, &re));
    out.push(report("embedding", &[e]));

    let mut lora = LoraAdapter::new(d, 4, 2, 3.0, &mut rng)?;
    lora.b = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let ll = LoraLinear { base: Linear::new(d, 4, &mut rng), lora: Some(lora) };
    out.push(layer_probe("lora_linear", ll, &x, &r4, |m, x| m.forward(x).unwrap(), |m, x, r| m.backward(x, r).unwrap()));

    let mut mha = MultiHeadAttention::new(d, 2, Some((2, 4.0)), &mut rng)?;
    for l in [&mut mha.wq.lora, &mut mha.wv.lora].into_iter().flatten() {
        l.b = Tensor::randn(l.b.shape(), 0.5, &mut rng);
    }
    out.push(layer_probe(
        "multi_head_attention",
        mha,
        &x,
        &r,
        |m, x| m.forward(x, AttnMask::Prefix(3)).unwrap().0,
        |m, x, r| {
            let (_, c) = m.forward(x, AttnMask::Prefix(3)).unwrap();
            m.backward(&c, r).unwrap()
        },
    ));

    out.push(layer_probe(
        "mlp",
        Mlp::new(d, 8, d, &mut rng),
        &x,
        &r,
        |m, x| m.forward(x).unwrap().0,
        |m, x, r| {
            let (_, c) = m.forward(x).unwrap();
            m.backward(&c, r).unwrap()
        },
    ));

    out.push(layer_probe(
        "block",
        Block::new(d, 2, 8, Some((2, 4.0)), &mut rng)?,
        &x,
        &r,
        |m, x| m.forward(x, AttnMask::Causal).unwrap().0,
        |m, x, r| {
            let (_, c) = m.forward(x, AttnMask::Causal).unwrap();
            m.backward(&c, r).unwrap()
        },
    ));

    out.push(layer_probe(
        "transformer",
        Transformer::new(2, d, 3, 8, None, &mut rng)?,
        &x,
        &r,
        |m, x| m.forward(x, AttnMask::Full).unwrap().0,
        |m, x, r| {
            let (_, c) = m.forward(x, AttnMask::Full).unwrap();
            m.backward(&c, r).unwrap()
        },
    ));

    let rp: Vec<f64> = r.row(0).to_vec();
    let mp = finite_difference_check(
        |z| {
            let p = nn::mean_pool(z);
            (p.iter().zip(&rp).map(|(a, b)| a * b).sum(), nn::mean_pool_backward(&rp, z.rows()).into_data())
        },
        &x,
        STEP,
    );
    out.push(report("mean_pool", &[mp]));

    let patches = Tensor::randn(&[3, 256], 1.0, &mut rng);
    let pe = trainable(PatchEmbed::new(4, &mut rng));
    let rpe = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let e = check_params(
        &pe,
        |m| contract(&m.forward_patches(&patches).unwrap(), &rpe),
        |m| m.backward(&patches, &rpe).unwrap(),
    );
    out.push(report("patch_embed", &[e]));

    // full teacher-forced caption loss through decoder, embeddings and projector
    let vocab = caption_vocab(["a dog barks loudly", "a bell rings"], "describe the sound");
    let cfg = CaptionerConfig {
        vocab_size: vocab.len(),
        enc_dim: 4,
        enc_layers: 0,
        enc_heads: 1,
        enc_ff: 4,
        downsample: 5,
        proj_hidden: 6,
        dec_dim: 6,
        dec_layers: 2,
        dec_heads: 2,
        dec_ff: 8,
        max_positions: 16,
        lora_rank: 2,
        lora_alpha: 4.0,
        train_head: true,
        mel_mean: 0.0,
        mel_std: 1.0,
        prompt: "describe the sound".into(),
    };
    let mut cap = Captioner::new(cfg, &root.split(1))?;
    cap.projector.set_trainable(true);
    cap.decoder.set_trainable(true);
    cap.decoder.pos_emb.set_requires_grad(false);
    for b in &mut cap.decoder.blocks.blocks {
        for l in [&mut b.attn.wq.lora, &mut b.attn.wv.lora].into_iter().flatten() {
            l.b = Tensor::randn(l.b.shape(), 0.5, &mut rng);
        }
    }
    let e_a = FeatureSeq { frames: Tensor::randn(&[12, 4], 1.0, &mut rng), rate_hz: 50.0 };
    let prompt = cap.prompt_ids(&vocab);
    let target = encode_caption("a dog barks loudly", &vocab);
    let full = check_params(
        &cap,
        |m| {
            let e = m.project_downsample(&e_a).unwrap();
            let j = m.assemble_joint(&e, &prompt, Some(&target), Mode::Train).unwrap();
            m.caption_loss(&j, &target).unwrap()
        },
        |m| {
            m.loss_and_backward(&e_a, &prompt, &target).unwrap();
        },
    );
    out.push(report("caption_loss", &[full]));

    // InfoNCE wrt audio, text and temperature
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let t = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let rows = |m: &Tensor| -> Vec<Vec<f64>> { (0..m.rows()).map(|i| m.row(i).to_vec()).collect() };
    let tau = 0.3;
    let ea = finite_difference_check(
        |z| {
            let o = infonce_with_grads(&rows(z), &rows(&t), tau).unwrap();
            (o.loss, o.d_audio.concat())
        },
        &a,
        STEP,
    );
    let et = finite_difference_check(
        |z| {
            let o = infonce_with_grads(&rows(&a), &rows(z), tau).unwrap();
            (o.loss, o.d_text.concat())
        },
        &t,
        STEP,
    );
    let etau = finite_difference_check(
        |z| {
            let o = infonce_with_grads(&rows(&a), &rows(&t), z.data()[0]).unwrap();
            (o.loss, vec![o.d_temperature])
        },
        &Tensor::filled(&[1], tau),
        STEP,
    );
    out.push(report("infonce", &[ea, et, etau]));

    // both CLAP branches under the contrastive loss
    let ccfg = ClapConfig { vocab_size: vocab.len(), dim: 4, heads: 2, ff: 6, d_clap: 3, max_text_len: 8, init_temperature: 0.5, ..ClapConfig::default() };
    let clap = ClapModel::new(ccfg, &root.split(2))?;
    let clips: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[3, 256], 1.0, &mut rng)).collect();
    let texts: Vec<Vec<u32>> = ["a dog barks", "a bell rings loudly", "dog"].iter().map(|s| vocab.ids(s)).collect();
    let clap_loss = |m: &ClapModel| {
        let a: Vec<Vec<f64>> = clips.iter().map(|p| m.audio_forward(p).unwrap().embedding).collect();
        let t: Vec<Vec<f64>> = texts.iter().map(|ids| m.text_forward(ids).unwrap().embedding).collect();
        infonce_with_grads(&a, &t, m.temperature_value()).unwrap().loss
    };
    let e = check_params(&clap, clap_loss, |m| {
        let ap: Vec<_> = clips.iter().map(|p| m.audio_forward(p).unwrap()).collect();
        let tp: Vec<_> = texts.iter().map(|ids| m.text_forward(ids).unwrap()).collect();
        let a: Vec<Vec<f64>> = ap.iter().map(|p| p.embedding.clone()).collect();
        let t: Vec<Vec<f64>> = tp.iter().map(|p| p.embedding.clone()).collect();
        let o = infonce_with_grads(&a, &t, m.temperature_value()).unwrap();
        for (p, d) in ap.iter().zip(&o.d_audio) {
            m.audio_backward(p, d).unwrap();
        }
        for (p, d) in tp.iter().zip(&o.d_text) {
            m.text_backward(p, d).unwrap();
        }
        m.temperature.accumulate_grad(&[o.d_temperature]);
    });
    out.push(report("clap_dual_encoder", &[e]));
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_probe_passes() {
        for r in super::audit(17).unwrap() {
            assert!(r.max_rel_err < 1e-6, "{}: {}", r.name, r.max_rel_err);
        }
    }
}
