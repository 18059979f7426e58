//! Forward and backward kernels for the fixed layer vocabulary: softmax,
//! layer norm, tanh-GELU, masked scaled dot-product attention and softmax
//! cross-entropy, plus a central-difference gradient checker.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, ln, sqrt, tanh};
use crate::{Error, Result, Tensor};

/// Softmax along `axis` of an N-d tensor, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.detached();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..n {
                let e = exp(data[idx(k)] - max);
                data[idx(k)] = e;
                sum += e;
            }
            for k in 0..n {
                data[idx(k)] /= sum;
            }
        }
    }
    Ok(out)
}

/// `log(softmax(row))` computed stably.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + ln(row.iter().map(|v| exp(v - max)).sum::<f64>());
    row.iter().map(|v| v - lse).collect()
}

/// Row-wise layer normalisation of a 2-D tensor.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::shape("layer_norm", format!("row length {d} < 2")));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", "gain/bias length differs from row length"));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let row = x.row(r);
        let (mean, inv_std) = row_stats(row, eps);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
    Ok(out)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / sqrt(var + eps))
}

/// Gradients of [`layer_norm`]: returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &[f64],
    eps: f64,
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..x.rows() {
        let row = x.row(r);
        let g = dy.row(r);
        let (mean, inv_std) = row_stats(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv_std;
            dxhat[j] = g[j] * gain[j];
            dgain[j] += g[j] * xhat[j];
            dbias[j] += g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.detached();
    out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    out
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.detached();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let t = tanh(GELU_C * (v + GELU_A * v * v * v));
        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    }
    dx
}

/// Which keys each query position may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Keys `0..p` are visible to every query; later keys are causal.
    Prefix(usize),
}

impl AttnMask {
    pub fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => key <= query,
            AttnMask::Prefix(p) => key < p || key <= query,
        }
    }
}

/// Single-head attention `softmax(q kᵀ / sqrt(d_k) + mask) v`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal_mask: bool) -> Result<Tensor> {
    let mask = if causal_mask { AttnMask::Causal } else { AttnMask::Full };
    attention_forward(q, k, v, mask).map(|(out, _)| out)
}

/// Returns the attended output and the attention probabilities.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, mask: AttnMask) -> Result<(Tensor, Tensor)> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention", format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("attention", format!("k {:?} vs v {:?}", k.shape(), v.shape())));
    }
    let scale = 1.0 / sqrt(q.cols() as f64);
    let mut probs = q.matmul_nt(k)?;
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, s) in row.iter_mut().enumerate() {
            if mask.allows(i, j) {
                *s *= scale;
                max = max.max(*s);
            }
        }
        let mut sum = 0.0;
        for (j, s) in row.iter_mut().enumerate() {
            *s = if mask.allows(i, j) { exp(*s - max) } else { 0.0 };
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
    }
    let out = probs.matmul(v)?;
    Ok((out, probs))
}

/// Gradients of [`attention_forward`]: returns `(dq, dk, dv)`.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let scale = 1.0 / sqrt(q.cols() as f64);
    let dv = probs.matmul_tn(dout)?;
    let dprobs = dout.matmul_nt(v)?;
    let mut dscores = Tensor::zeros(probs.shape());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let dp = dprobs.row(i);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (j, o) in dscores.row_mut(i).iter_mut().enumerate() {
            *o = p[j] * (dp[j] - dot) * scale;
        }
    }
    let dq = dscores.matmul(k)?;
    let dk = dscores.matmul_tn(q)?;
    Ok((dq, dk, dv))
}

/// Mean softmax cross-entropy over rows; returns the loss and `dloss/dlogits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} rows vs {} targets", logits.rows(), targets.len()),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    let n = targets.len() as f64;
    let mut grad = logits.detached();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::shape("cross_entropy", format!("target {t} out of vocab")));
        }
        let row = grad.row_mut(r);
        let logp = log_softmax(row);
        loss -= logp[t];
        for (j, g) in row.iter_mut().enumerate() {
            *g = (exp(logp[j]) - if j == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` returns the scalar value and its analytic gradient at the given point;
/// numeric derivatives use central differences with step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&Tensor) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length differs from input length");
    let mut probe = x.detached();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe).0;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe).0;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_uniform() {
        let x = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        assert!(close(softmax(&x, 0).unwrap().data(), &[0.25; 4], 1e-15));
    }

    #[test]
    fn softmax_large_values_do_not_overflow() {
        let x = Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(close(s.data(), &[1.0, 0.0], 1e-12));
    }

    #[test]
    fn softmax_one_two_three() {
        // e^k / (e + e^2 + e^3), evaluated independently
        let denom = core::f64::consts::E + libm::exp(2.0) + libm::exp(3.0);
        let expect = [core::f64::consts::E / denom, libm::exp(2.0) / denom, libm::exp(3.0) / denom];
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(close(s.data(), &expect, 1e-15));
        assert!(close(s.data(), &[0.0900, 0.2447, 0.6652], 5e-5));
    }

    #[test]
    fn softmax_axis_zero_of_matrix() {
        let x = Tensor::from_rows(&[&[1.0, 5.0], &[1.0, -5.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!(close(&[s.at(0, 0), s.at(1, 0)], &[0.5, 0.5], 1e-15));
        assert!((s.at(0, 1) + s.at(1, 1) - 1.0).abs() < 1e-12);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0), Err(Error::NonFinite { op: "softmax" }));
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = Tensor::from_rows(&[&[1.0, 1.0, 1.0]]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(close(y.data(), &[0.0; 3], 1e-12));
    }

    #[test]
    fn layer_norm_two_points() {
        let x = Tensor::from_rows(&[&[1.0, 3.0]]);
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-5).unwrap();
        assert!(close(y.data(), &[-1.0, 1.0], 1e-4));
    }

    #[test]
    fn layer_norm_random_rows_are_standardised() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[5, 16], 3.0, &mut rng);
        let y = layer_norm(&x, &[1.0; 16], &[0.0; 16], 1e-12).unwrap();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        }
        let short = Tensor::from_rows(&[&[1.0]]);
        assert!(layer_norm(&short, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn attention_picks_matching_row() {
        let q = Tensor::from_rows(&[&[50.0, 0.0], &[0.0, 50.0]]);
        let k = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = scaled_dot_attention(&q, &k, &v, false).unwrap();
        assert!(close(out.data(), &[1.0, 2.0, 3.0, 4.0], 1e-9));
    }

    #[test]
    fn attention_hand_case() {
        // scores = q kᵀ / sqrt(2) = [[1,0],[0,1]] / sqrt(2)
        let q = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let k = q.clone();
        let v = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = scaled_dot_attention(&q, &k, &v, false).unwrap();
        let a = libm::exp(1.0 / libm::sqrt(2.0));
        let w = a / (a + 1.0);
        assert!(close(out.data(), &[w, 1.0 - w, 1.0 - w, w], 1e-14));
    }

    #[test]
    fn causal_row_zero_ignores_future_values() {
        let mut rng = Rng::new(1);
        let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut v2 = v.clone();
        for j in 4..12 {
            v2.data_mut()[j] = 99.0;
        }
        let a = scaled_dot_attention(&q, &k, &v, true).unwrap();
        let b = scaled_dot_attention(&q, &k, &v2, true).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(0), v.row(0));
    }

    #[test]
    fn attention_dim_mismatch() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[2, 4]);
        assert!(matches!(scaled_dot_attention(&q, &k, &k, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn prefix_mask_rules() {
        let m = AttnMask::Prefix(3);
        assert!(m.allows(0, 2));
        assert!(!m.allows(1, 3));
        assert!(m.allows(4, 4));
        assert!(!m.allows(4, 5));
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let f = |t: &Tensor| {
            let v = t.data().iter().map(|a| a * a).sum();
            (v, t.data().iter().map(|a| 2.0 * a).collect())
        };
        assert_eq!(f(&x).1, vec![2.0, 4.0]);
        assert!(finite_difference_check(f, &x, 1e-5) < 1e-8);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let logits = Tensor::zeros(&[3, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - libm::log(4.0)).abs() < 1e-15);
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
    }
}
