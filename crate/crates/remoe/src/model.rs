//! A decoder-only transformer whose FFN sublayers are recurrent MoE layers
//! and whose attention projections carry low-rank adapters. Pre-norm
//! residual blocks with RMS normalization (gains frozen), rotary positions,
//! and an optional tied output head.

use crate::attention::{attention_core, AttentionParams, KvCache};
use crate::config::ModelConfig;
use crate::context::{ForwardCtx, LayerFusedCache, ModuleTimes};
use crate::error::{Error, Result};
use crate::layer::MoeLayer;
use crate::lora::{expert_forward_fused, leaf_or_tensor, uniform_init};
use crate::param::{AdapterSite, Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

pub struct Block<S: Scalar> {
    pub attn_norm: Param<S>,
    pub attn: AttentionParams<S>,
    pub ffn_norm: Param<S>,
    pub moe: MoeLayer<S>,
}

pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub embed: Param<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: Param<S>,
    /// `[v, d]`; shares storage with `embed` when tied.
    pub head: Param<S>,
}

/// How to fill the trainable tensors at construction time.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// LoRA B and the GRU output projection start at zero, so the model
    /// computes exactly what the frozen backbone computes.
    Neutral,
    /// Every trainable tensor gets small random values (gradient probes).
    Probe,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: &ModelConfig, init: Init) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let v = cfg.vocab;
        let lim = 1.0 / (d as f64).sqrt();
        let embed = Param::new(
            "embed",
            ParamKind::Embedding,
            vec![v, d],
            uniform_init(&mut rng, v * d, lim),
            cfg.train_embeddings,
        );
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("layers.{l}");
            let attn_norm = Param::new(
                format!("{name}.attn_norm"),
                ParamKind::NormGain,
                vec![d],
                vec![S::ONE; d],
                false,
            );
            let attn = AttentionParams::init(
                &format!("{name}.attn"),
                d,
                cfg.heads,
                cfg.lora_rank,
                cfg.lora_alpha,
                cfg.rope_base,
                &mut rng,
            )?;
            let ffn_norm = Param::new(
                format!("{name}.ffn_norm"),
                ParamKind::NormGain,
                vec![d],
                vec![S::ONE; d],
                false,
            );
            let moe = MoeLayer::init(
                &name,
                l,
                d,
                cfg.ffn_dim,
                cfg.experts,
                cfg.active_experts,
                cfg.gru_dim(),
                cfg.lora_rank,
                cfg.lora_alpha,
                cfg.renormalize_topk,
                cfg.candidate_activation,
                &mut rng,
            );
            blocks.push(Block {
                attn_norm,
                attn,
                ffn_norm,
                moe,
            });
        }
        let final_norm = Param::new(
            "final_norm",
            ParamKind::NormGain,
            vec![d],
            vec![S::ONE; d],
            false,
        );
        let head = if cfg.tie_embeddings {
            embed.clone()
        } else {
            Param::new(
                "head",
                ParamKind::Head,
                vec![v, d],
                uniform_init(&mut rng, v * d, lim),
                cfg.train_embeddings,
            )
        };
        let model = Model {
            cfg: cfg.clone(),
            embed,
            blocks,
            final_norm,
            head,
        };
        if matches!(init, Init::Probe) {
            model.randomize_trainable(cfg.seed ^ 0x9e37_79b9);
        }
        Ok(model)
    }

    /// Gives every trainable tensor small nonzero values. Used by gradient
    /// probes so zero-initialized tensors (LoRA B, router, W_g) do not hide
    /// incorrect gradients behind zero paths.
    pub fn randomize_trainable(&self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params() {
            if p.trainable() {
                let limit = 0.5 / (p.shape().last().copied().unwrap_or(1) as f64).sqrt();
                let _ = p.set_value(uniform_init(&mut rng, p.len(), limit));
            }
        }
    }

    /// Every parameter in a fixed, checkpoint-stable order.
    pub fn params(&self) -> Vec<Param<S>> {
        let mut out = vec![self.embed.clone()];
        for b in &self.blocks {
            out.push(b.attn_norm.clone());
            for base in [&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo] {
                out.push(base.clone());
            }
            for pair in [&b.attn.lora_q, &b.attn.lora_k, &b.attn.lora_v, &b.attn.lora_o] {
                out.push(pair.a.clone());
                out.push(pair.b.clone());
            }
            out.push(b.ffn_norm.clone());
            let bases = &b.moe.experts[0].bases;
            out.push(bases.gate.clone());
            out.push(bases.up.clone());
            out.push(bases.down.clone());
            for e in &b.moe.experts {
                for pair in [&e.gate, &e.up, &e.down] {
                    out.push(pair.a.clone());
                    out.push(pair.b.clone());
                }
            }
            out.push(b.moe.router.clone());
            out.push(b.moe.gru.w_z.clone());
            out.push(b.moe.gru.w_r.clone());
            out.push(b.moe.gru.w_o.clone());
            out.push(b.moe.gru.b_o.clone());
            out.push(b.moe.gru.w_g.clone());
        }
        out.push(self.final_norm.clone());
        if !self.cfg.tie_embeddings {
            out.push(self.head.clone());
        }
        out
    }

    pub fn trainable_params(&self) -> Vec<Param<S>> {
        self.params().into_iter().filter(|p| p.trainable()).collect()
    }

    fn check_tokens(&self, tokens: &[u32], b: usize, p: usize) -> Result<()> {
        if tokens.len() != b * p {
            return Err(Error::Contract(format!(
                "token buffer of {} does not fill [{b}, {p}]",
                tokens.len()
            )));
        }
        if p > self.cfg.max_seq {
            return Err(Error::Contract(format!(
                "sequence length {p} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocab {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    /// Teacher-forced forward: `tokens [b, p]` to logits `[b, p, v]`.
    pub fn forward(
        &self,
        tokens: &[u32],
        b: usize,
        p: usize,
        ctx: &mut ForwardCtx<'_, S>,
    ) -> Result<Tensor<S>> {
        self.check_tokens(tokens, b, p)?;
        let eps = self.cfg.rms_eps;
        let embed = leaf_or_tensor(&self.embed, ctx.tape);
        let mut x = Tensor::embedding(&embed, tokens, &[b, p])?;
        for block in &self.blocks {
            let normed = x.rms_norm(&leaf_or_tensor(&block.attn_norm, ctx.tape), eps)?;
            let attn_t0 = ctx.times.is_some().then(Instant::now);
            let a = block.attn.forward(&normed, ctx)?;
            if let (Some(times), Some(t0)) = (ctx.times.as_deref_mut(), attn_t0) {
                times.attention += t0.elapsed();
            }
            x = x.add(&a)?;
            let normed2 = x.rms_norm(&leaf_or_tensor(&block.ffn_norm, ctx.tape), eps)?;
            let mut y = block.moe.forward(&normed2, ctx)?;
            if ctx.dropout > 0.0 {
                if let Some(rng) = ctx.rng.as_deref_mut() {
                    y = y.dropout(ctx.dropout, rng)?;
                }
            }
            x = x.add(&y)?;
        }
        let xf = x.rms_norm(&leaf_or_tensor(&self.final_norm, ctx.tape), eps)?;
        let head_t = leaf_or_tensor(&self.head, ctx.tape).transpose2d()?;
        xf.matmul(&head_t)
    }

    /// The frozen backbone alone: no adapters, no router, no GRU — one plain
    /// FFN pass per block over the same frozen weights. Reference path for
    /// neutrality checks.
    pub fn forward_frozen(&self, tokens: &[u32], b: usize, p: usize) -> Result<Tensor<S>> {
        self.check_tokens(tokens, b, p)?;
        let eps = self.cfg.rms_eps;
        let mut x = Tensor::embedding(&self.embed.tensor(), tokens, &[b, p])?;
        for block in &self.blocks {
            let normed = x.rms_norm(&block.attn_norm.tensor(), eps)?;
            let mats = [
                block.attn.wq.tensor().transpose2d()?,
                block.attn.wk.tensor().transpose2d()?,
                block.attn.wv.tensor().transpose2d()?,
                block.attn.wo.tensor().transpose2d()?,
            ];
            let a = attention_core(
                &normed,
                &mats,
                block.attn.heads,
                block.attn.rope_base,
                0,
                0.0,
                None,
            )?;
            x = x.add(&a)?;
            let normed2 = x.rms_norm(&block.ffn_norm.tensor(), eps)?;
            let bases = &block.moe.experts[0].bases;
            let fused = (
                bases.gate.tensor().transpose2d()?,
                bases.up.tensor().transpose2d()?,
                bases.down.tensor().transpose2d()?,
            );
            let y = expert_forward_fused(&fused, &normed2)?;
            x = x.add(&y)?;
        }
        let xf = x.rms_norm(&self.final_norm.tensor(), eps)?;
        xf.matmul(&self.head.tensor().transpose2d()?)
    }
}

/// Trainable-component counts in the shape of the adapter census, plus the
/// separately reported groups.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CensusReport {
    pub layers: usize,
    pub experts: usize,
    /// One pair per attention projection: 4 L.
    pub attention_adapter_pairs: usize,
    /// Three pairs per expert: 3 L n.
    pub moe_adapter_pairs: usize,
    /// (3 n + 4) L.
    pub adapter_pairs_total: usize,
    /// W_z, W_r, W_o, W_g per layer: 4 L.
    pub gru_linear_layers: usize,
    /// Reported separately from the adapter census.
    pub router_matrices: usize,
    pub embedding_and_head_params: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub trainable_ratio: f64,
}

/// Counts trainable components and parameters, grouped by census row.
pub fn parameter_census<S: Scalar>(model: &Model<S>) -> CensusReport {
    let mut attn_a = 0usize;
    let mut attn_b = 0usize;
    let mut moe_a = 0usize;
    let mut moe_b = 0usize;
    let mut gru_linears = 0usize;
    let mut routers = 0usize;
    let mut embed_head = 0usize;
    let mut trainable = 0usize;
    let mut frozen = 0usize;
    for p in model.params() {
        let n = p.len();
        if p.trainable() {
            trainable += n;
        } else {
            frozen += n;
        }
        match p.kind() {
            ParamKind::LoraA(AdapterSite::Attention) => attn_a += 1,
            ParamKind::LoraB(AdapterSite::Attention) => attn_b += 1,
            ParamKind::LoraA(AdapterSite::Expert) => moe_a += 1,
            ParamKind::LoraB(AdapterSite::Expert) => moe_b += 1,
            ParamKind::Router => routers += 1,
            k if k.is_gru_linear() => gru_linears += 1,
            ParamKind::Embedding | ParamKind::Head => embed_head += n,
            _ => {}
        }
    }
    debug_assert_eq!(attn_a, attn_b, "every A matrix pairs with one B");
    debug_assert_eq!(moe_a, moe_b);
    CensusReport {
        layers: model.cfg.layers,
        experts: model.cfg.experts,
        attention_adapter_pairs: attn_a,
        moe_adapter_pairs: moe_a,
        adapter_pairs_total: attn_a + moe_a,
        gru_linear_layers: gru_linears,
        router_matrices: routers,
        embedding_and_head_params: embed_head,
        trainable_params: trainable,
        frozen_params: frozen,
        trainable_ratio: trainable as f64 / (trainable + frozen) as f64,
    }
}

/// Incremental greedy decoding with per-layer KV caches and fused weights
/// computed once per session. Used by evaluation and the latency profiler.
pub struct DecodeSession<'m, S: Scalar> {
    model: &'m Model<S>,
    rounds: usize,
    fused: Vec<LayerFusedCache<S>>,
    kv: Vec<KvCache<S>>,
    batch: usize,
    pub times: ModuleTimes,
    pub wall: Duration,
}

impl<'m, S: Scalar> DecodeSession<'m, S> {
    pub fn new(model: &'m Model<S>, batch: usize, rounds: usize, capacity: usize) -> Result<Self> {
        if rounds < 1 {
            return Err(Error::Config(format!("rounds (T={rounds}) must be >= 1")));
        }
        let mut fused = Vec::with_capacity(model.blocks.len());
        let mut kv = Vec::with_capacity(model.blocks.len());
        for block in &model.blocks {
            let mut cache = LayerFusedCache::new(model.cfg.experts);
            cache.attn = Some(block.attn.fused_transposed(None)?);
            fused.push(cache);
            kv.push(KvCache::new(
                batch,
                model.cfg.heads,
                model.cfg.head_dim(),
                capacity,
            ));
        }
        Ok(DecodeSession {
            model,
            rounds,
            fused,
            kv,
            batch,
            times: ModuleTimes::default(),
            wall: Duration::ZERO,
        })
    }

    pub fn position(&self) -> usize {
        self.kv.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Feeds one token per batch row; returns logits `[batch, v]`.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Tensor<S>> {
        if tokens.len() != self.batch {
            return Err(Error::Contract(format!(
                "decode step wants {} tokens, got {}",
                self.batch,
                tokens.len()
            )));
        }
        let t_start = Instant::now();
        let eps = self.model.cfg.rms_eps;
        let mut x = Tensor::embedding(&self.model.embed.tensor(), tokens, &[self.batch, 1])?;
        for (li, block) in self.model.blocks.iter().enumerate() {
            let normed = x.rms_norm(&block.attn_norm.tensor(), eps)?;
            let a0 = Instant::now();
            let fused_attn = self.fused[li].attn.as_ref().expect("prefused at new()");
            let a = block
                .attn
                .decode_step(&normed, fused_attn, &mut self.kv[li])?;
            self.times.attention += a0.elapsed();
            x = x.add(&a)?;
            let normed2 = x.rms_norm(&block.ffn_norm.tensor(), eps)?;
            let mut ctx = ForwardCtx {
                tape: None,
                rounds: self.rounds,
                dropout: 0.0,
                rng: None,
                ledger: None,
                lb_terms: None,
                times: Some(&mut self.times),
                fused: Some(&mut self.fused),
            };
            let y = block.moe.forward(&normed2, &mut ctx)?;
            x = x.add(&y)?;
        }
        let xf = x.rms_norm(&self.model.final_norm.tensor(), eps)?;
        let logits = xf.matmul(&self.model.head.tensor().transpose2d()?)?;
        self.wall += t_start.elapsed();
        logits.reshape(vec![self.batch, self.model.cfg.vocab])
    }

    /// Greedy argmax over the last step's logits.
    pub fn greedy_next(&mut self, tokens: &[u32]) -> Result<Vec<u32>> {
        let logits = self.step(tokens)?;
        let v = self.model.cfg.vocab;
        let mut out = Vec::with_capacity(self.batch);
        for row in logits.data().chunks(v) {
            let mut best = 0usize;
            for (j, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = j;
                }
            }
            out.push(best as u32);
        }
        Ok(out)
    }
}
