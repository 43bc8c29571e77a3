//! Causal multi-head attention with one low-rank adapter pair per
//! projection (Q, K, V, O). Rotary position mixing on Q and K.

use crate::context::ForwardCtx;
use crate::error::{Error, Result};
use crate::lora::{leaf_or_tensor, uniform_init, LoraPair};
use crate::param::{AdapterSite, Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

pub struct AttentionParams<S: Scalar> {
    /// Frozen `[d, d]` projections.
    pub wq: Param<S>,
    pub wk: Param<S>,
    pub wv: Param<S>,
    pub wo: Param<S>,
    pub lora_q: LoraPair<S>,
    pub lora_k: LoraPair<S>,
    pub lora_v: LoraPair<S>,
    pub lora_o: LoraPair<S>,
    pub heads: usize,
    pub dim: usize,
    pub rope_base: f64,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn init(
        name: &str,
        dim: usize,
        heads: usize,
        rank: usize,
        alpha: f64,
        rope_base: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim ({dim}) must be divisible by heads ({heads})"
            )));
        }
        let lim = 1.0 / (dim as f64).sqrt();
        let base = |suffix: &str, rng: &mut ChaCha8Rng| {
            Param::new(
                format!("{name}.{suffix}.base"),
                ParamKind::FrozenBase,
                vec![dim, dim],
                uniform_init(rng, dim * dim, lim),
                false,
            )
        };
        let pair = |suffix: &str, rng: &mut ChaCha8Rng| {
            LoraPair::init(
                &format!("{name}.{suffix}"),
                AdapterSite::Attention,
                dim,
                dim,
                rank,
                alpha,
                rng,
            )
        };
        Ok(AttentionParams {
            wq: base("q", rng),
            wk: base("k", rng),
            wv: base("v", rng),
            wo: base("o", rng),
            lora_q: pair("q", rng),
            lora_k: pair("k", rng),
            lora_v: pair("v", rng),
            lora_o: pair("o", rng),
            heads,
            dim,
            rope_base,
        })
    }

    /// Fused projections, transposed for right-multiplication: [q, k, v, o].
    pub fn fused_transposed(&self, tape: Option<&Tape<S>>) -> Result<[Tensor<S>; 4]> {
        let f = |pair: &LoraPair<S>, base: &Param<S>| -> Result<Tensor<S>> {
            pair.fuse(&leaf_or_tensor(base, tape), tape)?.transpose2d()
        };
        Ok([
            f(&self.lora_q, &self.wq)?,
            f(&self.lora_k, &self.wk)?,
            f(&self.lora_v, &self.wv)?,
            f(&self.lora_o, &self.wo)?,
        ])
    }

    /// Full-sequence causal attention over `x [b, p, d]`.
    pub fn forward(&self, x: &Tensor<S>, ctx: &mut ForwardCtx<'_, S>) -> Result<Tensor<S>> {
        let fused = self.fused_transposed(ctx.tape)?;
        attention_core(
            x,
            &fused,
            self.heads,
            self.rope_base,
            0,
            ctx.dropout,
            ctx.rng.as_deref_mut(),
        )
    }

    /// One cached autoregressive step: `x [b, 1, d]` at absolute position
    /// `cache.len()`. The projections come pre-fused.
    pub fn decode_step(
        &self,
        x: &Tensor<S>,
        fused: &[Tensor<S>; 4],
        cache: &mut KvCache<S>,
    ) -> Result<Tensor<S>> {
        let (b, p, d) = shape3(x)?;
        if p != 1 || d != self.dim {
            return Err(Error::Dim {
                op: "decode_step",
                lhs: x.shape().to_vec(),
                rhs: vec![cache.batch, 1, self.dim],
            });
        }
        let h = self.heads;
        let hd = d / h;
        let pos = cache.len;
        let to_heads = |t: &Tensor<S>| -> Result<Tensor<S>> {
            t.reshape(vec![b, 1, h, hd])?.permute(&[0, 2, 1, 3])
        };
        let q = to_heads(&x.matmul(&fused[0])?)?.rope(pos, self.rope_base)?;
        let k = to_heads(&x.matmul(&fused[1])?)?.rope(pos, self.rope_base)?;
        let v = to_heads(&x.matmul(&fused[2])?)?;
        cache.append(k.data(), v.data())?;
        let k_all = cache.keys();
        let v_all = cache.values();
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let scores = q.bmm(&k_all.permute(&[0, 1, 3, 2])?)?.scale(scale)?;
        // Every cached position is visible; no mask needed.
        let probs = scores.softmax_last()?;
        let mixed = probs.bmm(&v_all)?;
        mixed
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b, 1, d])?
            .matmul(&fused[3])
    }
}

/// Attention on pre-fused, transposed projections. Shared by the adapted
/// path and the frozen-backbone reference path.
pub fn attention_core<S: Scalar>(
    x: &Tensor<S>,
    fused_t: &[Tensor<S>; 4],
    heads: usize,
    rope_base: f64,
    pos_offset: usize,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<S>> {
    let (b, p, d) = shape3(x)?;
    let hd = d / heads;
    let to_heads = |t: &Tensor<S>| -> Result<Tensor<S>> {
        t.reshape(vec![b, p, heads, hd])?.permute(&[0, 2, 1, 3])
    };
    let q = to_heads(&x.matmul(&fused_t[0])?)?.rope(pos_offset, rope_base)?;
    let k = to_heads(&x.matmul(&fused_t[1])?)?.rope(pos_offset, rope_base)?;
    let v = to_heads(&x.matmul(&fused_t[2])?)?;
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let scores = q
        .bmm(&k.permute(&[0, 1, 3, 2])?)?
        .scale(scale)?
        .causal_mask(0)?;
    let mut probs = scores.softmax_last()?;
    if dropout > 0.0 {
        if let Some(r) = rng {
            probs = probs.dropout(dropout, r)?;
        }
    }
    let mixed = probs.bmm(&v)?;
    mixed
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, p, d])?
        .matmul(&fused_t[3])
}

fn shape3<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::Contract(format!(
            "expected [b, p, d] input, got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Per-layer key/value store for incremental decoding, laid out
/// `[b, h, capacity, hd]`.
pub struct KvCache<S: Scalar> {
    k: Vec<S>,
    v: Vec<S>,
    batch: usize,
    heads: usize,
    head_dim: usize,
    capacity: usize,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(batch: usize, heads: usize, head_dim: usize, capacity: usize) -> Self {
        KvCache {
            k: vec![S::ZERO; batch * heads * capacity * head_dim],
            v: vec![S::ZERO; batch * heads * capacity * head_dim],
            batch,
            heads,
            head_dim,
            capacity,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one position; inputs are `[b, h, 1, hd]` buffers.
    fn append(&mut self, k_new: &[S], v_new: &[S]) -> Result<()> {
        if self.len >= self.capacity {
            return Err(Error::Contract(format!(
                "kv cache overflow at capacity {}",
                self.capacity
            )));
        }
        let hd = self.head_dim;
        for b in 0..self.batch {
            for h in 0..self.heads {
                let src = (b * self.heads + h) * hd;
                let dst = ((b * self.heads + h) * self.capacity + self.len) * hd;
                self.k[dst..dst + hd].copy_from_slice(&k_new[src..src + hd]);
                self.v[dst..dst + hd].copy_from_slice(&v_new[src..src + hd]);
            }
        }
        self.len += 1;
        Ok(())
    }

    fn gather(&self, buf: &[S]) -> Tensor<S> {
        let hd = self.head_dim;
        let mut out = vec![S::ZERO; self.batch * self.heads * self.len * hd];
        for b in 0..self.batch {
            for h in 0..self.heads {
                let src = (b * self.heads + h) * self.capacity * hd;
                let dst = (b * self.heads + h) * self.len * hd;
                out[dst..dst + self.len * hd]
                    .copy_from_slice(&buf[src..src + self.len * hd]);
            }
        }
        Tensor::from_vec(vec![self.batch, self.heads, self.len, hd], out)
            .expect("cache shape consistent")
    }

    /// Cached keys as `[b, h, len, hd]`.
    pub fn keys(&self) -> Tensor<S> {
        self.gather(&self.k)
    }

    /// Cached values as `[b, h, len, hd]`.
    pub fn values(&self) -> Tensor<S> {
        self.gather(&self.v)
    }
}
