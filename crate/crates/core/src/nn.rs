//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every `backward` returns the gradient with respect to the layer input and
//! accumulates parameter gradients into tensors whose `requires_grad` flag is
//! set. Frozen tensors are never written.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math::sqrt;
use crate::ops::{self, AttnMask};
use crate::{Error, Result, Rng, Tensor};

/// Named access to every parameter tensor of a module tree.
pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(on);
        }
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((String::from(prefix), self));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((String::from(prefix), self));
    }
}

impl<T: Params> Params for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(inner) = self {
            inner.collect(prefix, out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Some(inner) = self {
            inner.collect_mut(prefix, out);
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&join(prefix, &format!("{i}")), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.collect_mut(&join(prefix, &format!("{i}")), out);
        }
    }
}

macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn collect<'a>(
                &'a self,
                prefix: &str,
                out: &mut alloc::vec::Vec<(alloc::string::String, &'a $crate::Tensor)>,
            ) {
                $( self.$field.collect(&$crate::nn::join(prefix, stringify!($field)), out); )*
            }
            fn collect_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut alloc::vec::Vec<(alloc::string::String, &'a mut $crate::Tensor)>,
            ) {
                $( self.$field.collect_mut(&$crate::nn::join(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}
impl_params!(Linear { w, b });

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self {
            w: Tensor::randn(&[fan_in, fan_out], 1.0 / sqrt(fan_in as f64), rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn from_weights(w: Tensor, b: Tensor) -> Self {
        Self { w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.w)?;
        let b = self.b.data();
        for r in 0..y.rows() {
            for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
                *v += bias;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        if self.w.requires_grad() {
            let dw = x.matmul_tn(dy)?;
            self.w.accumulate_grad(dw.data());
        }
        if self.b.requires_grad() {
            self.b.accumulate_grad(&dy.sum_rows());
        }
        dy.matmul_nt(&self.w)
    }
}

/// Low-rank update `W + (alpha / rank) A B` with `A: [in, r]`, `B: [r, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}
impl_params!(LoraAdapter { a, b });

impl LoraAdapter {
    /// `A` is Gaussian, `B` starts at zero so a fresh adapter is a no-op.
    pub fn new(fan_in: usize, fan_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > fan_in.min(fan_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must be in 1..={} for a {fan_in}x{fan_out} weight",
                fan_in.min(fan_out)
            )));
        }
        Ok(Self {
            a: Tensor::randn(&[fan_in, rank], 1.0 / sqrt(fan_in as f64), rng),
            b: Tensor::zeros(&[rank, fan_out]),
            alpha,
        })
    }

    pub fn from_factors(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let rank = a.cols();
        if b.rows() != rank || rank == 0 || rank > a.rows().min(b.cols()) {
            return Err(Error::Config(format!(
                "LoRA factors {:?} x {:?} are not a valid rank decomposition",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `W + scale * A B`.
    pub fn merged(&self, w: &Tensor) -> Result<Tensor> {
        w.add(&self.a.matmul(&self.b)?.scale(self.scale()))
    }

    fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.a)?.matmul(&self.b)?.scale(self.scale()))
    }
}

/// `y = x W + (alpha / r) x A B` without merging the weights.
pub fn lora_apply(adapter: &LoraAdapter, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if adapter.a.rows() != w.rows() || adapter.b.cols() != w.cols() {
        return Err(Error::shape(
            "lora_apply",
            format!("adapter {:?}x{:?} vs weight {:?}", adapter.a.shape(), adapter.b.shape(), w.shape()),
        ));
    }
    x.matmul(w)?.add(&adapter.delta(x)?)
}

/// Linear projection with an optional LoRA branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    pub base: Linear,
    pub lora: Option<LoraAdapter>,
}
impl_params!(LoraLinear { base, lora });

impl LoraLinear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.base.forward(x)?;
        if let Some(l) = &self.lora {
            y.add_assign(&l.delta(x)?)?;
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let mut dx = self.base.backward(x, dy)?;
        if let Some(l) = &mut self.lora {
            let s = l.scale();
            let dy_bt = dy.matmul_nt(&l.b)?;
            if l.a.requires_grad() {
                l.a.accumulate_grad(x.matmul_tn(&dy_bt)?.scale(s).data());
            }
            if l.b.requires_grad() {
                let xa = x.matmul(&l.a)?;
                l.b.accumulate_grad(xa.matmul_tn(dy)?.scale(s).data());
            }
            dx.add_assign(&dy_bt.matmul_nt(&l.a)?.scale(s))?;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}
impl_params!(LayerNorm { gain, bias });

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Tensor::filled(&[dim], 1.0), bias: Tensor::zeros(&[dim]), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, self.gain.data(), self.bias.data(), self.eps)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (dx, dg, db) = ops::layer_norm_backward(x, self.gain.data(), self.eps, dy);
        self.gain.accumulate_grad(&dg);
        self.bias.accumulate_grad(&db);
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: Tensor,
}
impl_params!(Embedding { table });

impl Embedding {
    pub fn new(vocab: usize, dim: usize, rng: &mut Rng) -> Self {
        Self { table: Tensor::randn(&[vocab, dim], 1.0, rng) }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.table.rows() {
                return Err(Error::shape("embedding", format!("id {id} >= vocab {}", self.table.rows())));
            }
            out.row_mut(r).copy_from_slice(self.table.row(id));
        }
        Ok(out)
    }

    pub fn backward(&mut self, ids: &[u32], dy: &Tensor) {
        let d = self.dim();
        if let Some(g) = self.table.grad_mut() {
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                for (a, b) in dst.iter_mut().zip(dy.row(r)) {
                    *a += b;
                }
            }
        }
    }
}

/// Multi-head self-attention; LoRA (when present) sits on the query and value
/// projections only.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub wq: LoraLinear,
    pub wk: Linear,
    pub wv: LoraLinear,
    pub wo: Linear,
    pub heads: usize,
}
impl_params!(MultiHeadAttention { wq, wk, wv, wo });

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    ctx: Tensor,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, lora: Option<(usize, f64)>, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        let lora_for = |rng: &mut Rng| -> Result<Option<LoraAdapter>> {
            lora.map(|(r, a)| LoraAdapter::new(dim, dim, r, a, rng)).transpose()
        };
        let wq = LoraLinear { base: Linear::new(dim, dim, rng), lora: lora_for(rng)? };
        let wk = Linear::new(dim, dim, rng);
        let wv = LoraLinear { base: Linear::new(dim, dim, rng), lora: lora_for(rng)? };
        let wo = Linear::new(dim, dim, rng);
        Ok(Self { wq, wk, wv, wo, heads })
    }

    pub fn forward(&self, x: &Tensor, mask: AttnMask) -> Result<(Tensor, AttentionCache)> {
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let dh = q.cols() / self.heads;
        let mut ctx = Tensor::zeros(&[x.rows(), q.cols()]);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (out, p) = ops::attention_forward(&q.slice_cols(s, e), &k.slice_cols(s, e), &v.slice_cols(s, e), mask)?;
            ctx.set_cols(s, &out);
            probs.push(p);
        }
        let y = self.wo.forward(&ctx)?;
        Ok((y, AttentionCache { x: x.clone(), q, k, v, probs, ctx }))
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Tensor) -> Result<Tensor> {
        let dctx = self.wo.backward(&cache.ctx, dy)?;
        let width = cache.q.cols();
        let dh = width / self.heads;
        let rows = cache.x.rows();
        let mut dq = Tensor::zeros(&[rows, width]);
        let mut dk = Tensor::zeros(&[rows, width]);
        let mut dv = Tensor::zeros(&[rows, width]);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (gq, gk, gv) = ops::attention_backward(
                &cache.q.slice_cols(s, e),
                &cache.k.slice_cols(s, e),
                &cache.v.slice_cols(s, e),
                &cache.probs[h],
                &dctx.slice_cols(s, e),
            )?;
            dq.set_cols(s, &gq);
            dk.set_cols(s, &gk);
            dv.set_cols(s, &gv);
        }
        let mut dx = self.wq.backward(&cache.x, &dq)?;
        dx.add_assign(&self.wk.backward(&cache.x, &dk)?)?;
        dx.add_assign(&self.wv.backward(&cache.x, &dv)?)?;
        Ok(dx)
    }
}

/// Linear -> GELU -> Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_params!(Mlp { fc1, fc2 });

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl Mlp {
    pub fn new(dim_in: usize, hidden: usize, dim_out: usize, rng: &mut Rng) -> Self {
        Self { fc1: Linear::new(dim_in, hidden, rng), fc2: Linear::new(hidden, dim_out, rng) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(x)?;
        let act = ops::gelu(&pre);
        let y = self.fc2.forward(&act)?;
        Ok((y, MlpCache { x: x.clone(), pre, act }))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Tensor) -> Result<Tensor> {
        let dact = self.fc2.backward(&cache.act, dy)?;
        let dpre = ops::gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}
impl_params!(Block { ln1, attn, ln2, mlp });

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    attn: AttentionCache,
    h: Tensor,
    mlp: MlpCache,
}

impl Block {
    pub fn new(dim: usize, heads: usize, ff: usize, lora: Option<(usize, f64)>, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, lora, rng)?,
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, ff, dim, rng),
        })
    }

    pub fn forward(&self, x: &Tensor, mask: AttnMask) -> Result<(Tensor, BlockCache)> {
        let (a, attn) = self.attn.forward(&self.ln1.forward(x)?, mask)?;
        let h = x.add(&a)?;
        let (m, mlp) = self.mlp.forward(&self.ln2.forward(&h)?)?;
        let y = h.add(&m)?;
        Ok((y, BlockCache { x: x.clone(), attn, h, mlp }))
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Tensor) -> Result<Tensor> {
        let dm_in = self.mlp.backward(&cache.mlp, dy)?;
        let mut dh = self.ln2.backward(&cache.h, &dm_in);
        dh.add_assign(dy)?;
        let da_in = self.attn.backward(&cache.attn, &dh)?;
        let mut dx = self.ln1.backward(&cache.x, &da_in);
        dx.add_assign(&dh)?;
        Ok(dx)
    }
}

/// A stack of blocks sharing one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub blocks: Vec<Block>,
}
impl_params!(Transformer { blocks });

impl Transformer {
    pub fn new(
        layers: usize,
        dim: usize,
        heads: usize,
        ff: usize,
        lora: Option<(usize, f64)>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let blocks = (0..layers).map(|_| Block::new(dim, heads, ff, lora, rng)).collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, mask: AttnMask) -> Result<(Tensor, Vec<BlockCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, mask)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&mut self, caches: &[BlockCache], dy: &Tensor) -> Result<Tensor> {
        let mut g = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            g = b.backward(c, &g)?;
        }
        Ok(g)
    }
}

/// Row mean of a 2-D tensor.
pub fn mean_pool(x: &Tensor) -> Vec<f64> {
    let n = x.rows() as f64;
    x.sum_rows().into_iter().map(|v| v / n).collect()
}

/// Broadcast gradient of [`mean_pool`] back over `rows` rows.
pub fn mean_pool_backward(dpooled: &[f64], rows: usize) -> Tensor {
    let mut dx = Tensor::zeros(&[rows, dpooled.len()]);
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        for (d, g) in dx.row_mut(r).iter_mut().zip(dpooled) {
            *d = g * inv;
        }
    }
    dx
}
