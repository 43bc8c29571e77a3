//! The recurrent MoE layer: per round, route tokens to experts, mix the
//! selected expert outputs, then (between rounds) fold the mixture into a
//! GRU whose projection nudges the next round's input through a residual.
//!
//! Round t routes x_t, mixes y_t from the selected experts, and for t < T
//! computes h_t and g_t = W_g h_t with x_{t+1} = x_t + g_t. The layer
//! returns y_T. A single-round layer is exactly a one-shot LoRA-MoE pass;
//! the GRU is never touched.

use crate::config::CandidateActivation;
use crate::context::ForwardCtx;
use crate::error::{Error, Result};
use crate::gru::GruParams;
use crate::lora::{expert_forward_fused, leaf_or_tensor, Expert, MoeBases};
use crate::param::{Param, ParamKind};
use crate::routing::{load_balance_loss, moe_combine, route};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::Instant;

/// One decoder layer's MoE stack: n experts over shared frozen bases, one
/// router reused by every round, and the inter-round GRU.
pub struct MoeLayer<S: Scalar> {
    pub index: usize,
    pub experts: Vec<Expert<S>>,
    /// `[n, d]`, trainable; the same matrix serves every round.
    pub router: Param<S>,
    pub gru: GruParams<S>,
    pub k: usize,
    pub renormalize: bool,
    pub candidate: CandidateActivation,
    pub dim: usize,
}

/// Per-round intermediates captured by [`MoeLayer::forward_traced`].
pub struct RoundTrace<S: Scalar> {
    pub round: usize,
    pub x: Tensor<S>,
    pub y: Tensor<S>,
    /// GRU projection; absent on the final round.
    pub g: Option<Tensor<S>>,
}

#[allow(clippy::too_many_arguments)]
impl<S: Scalar> MoeLayer<S> {
    pub fn init(
        name: &str,
        index: usize,
        dim: usize,
        ffn_dim: usize,
        experts: usize,
        k: usize,
        gru_hidden: usize,
        rank: usize,
        alpha: f64,
        renormalize: bool,
        candidate: CandidateActivation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bases = MoeBases::init(&format!("{name}.ffn"), dim, ffn_dim, rng);
        let expert_vec: Vec<Expert<S>> = (0..experts)
            .map(|e| {
                Expert::init(
                    &format!("{name}.expert{e}"),
                    bases.clone(),
                    dim,
                    ffn_dim,
                    rank,
                    alpha,
                    rng,
                )
            })
            .collect();
        // Zero router: the first step routes uniformly (ties to low indices).
        let router = Param::new(
            format!("{name}.router"),
            ParamKind::Router,
            vec![experts, dim],
            vec![S::ZERO; experts * dim],
            true,
        );
        let gru = GruParams::init(&format!("{name}.gru"), dim, gru_hidden, rng);
        MoeLayer {
            index,
            experts: expert_vec,
            router,
            gru,
            k,
            renormalize,
            candidate,
            dim,
        }
    }

    pub fn forward(&self, x1: &Tensor<S>, ctx: &mut ForwardCtx<'_, S>) -> Result<Tensor<S>> {
        self.forward_inner(x1, ctx, None)
    }

    /// As [`forward`], additionally returning the per-round intermediates.
    pub fn forward_traced(
        &self,
        x1: &Tensor<S>,
        ctx: &mut ForwardCtx<'_, S>,
    ) -> Result<(Tensor<S>, Vec<RoundTrace<S>>)> {
        let mut trace = Vec::new();
        let y = self.forward_inner(x1, ctx, Some(&mut trace))?;
        Ok((y, trace))
    }

    fn forward_inner(
        &self,
        x1: &Tensor<S>,
        ctx: &mut ForwardCtx<'_, S>,
        mut trace: Option<&mut Vec<RoundTrace<S>>>,
    ) -> Result<Tensor<S>> {
        let rounds = ctx.rounds;
        if rounds < 1 {
            return Err(Error::Config(format!("rounds (T={rounds}) must be >= 1")));
        }
        if x1.rank() != 3 || x1.shape()[2] != self.dim {
            return Err(Error::Dim {
                op: "moe_layer",
                lhs: x1.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        let (b, p, d) = (x1.shape()[0], x1.shape()[1], x1.shape()[2]);
        let m = b * p;
        let n = self.experts.len();

        let mut local_cache: Vec<Option<(Tensor<S>, Tensor<S>, Tensor<S>)>> = Vec::new();
        let use_shared_cache = ctx.fused.is_some();
        if !use_shared_cache {
            local_cache = (0..n).map(|_| None).collect();
        }

        let mut x_t = x1.clone();
        let mut h = Tensor::zeros(vec![b, p, self.gru.hidden]);
        let mut y_final = None;

        for t in 1..=rounds {
            let x_input = trace.is_some().then(|| x_t.clone());
            let moe_t0 = ctx.times.is_some().then(Instant::now);

            let router = leaf_or_tensor(&self.router, ctx.tape);
            let decision = route(&router, &x_t, self.k, self.renormalize)?;
            if let Some(ledger) = ctx.ledger.as_deref_mut() {
                ledger.record(self.index, t, &decision);
            }
            if let Some(lbs) = ctx.lb_terms.as_deref_mut() {
                lbs.push(load_balance_loss(&decision)?);
            }

            let x_flat = x_t.reshape(vec![m, d])?;
            let mut outputs = BTreeMap::new();
            for e in 0..n {
                let rows = decision.tokens_for_expert(e);
                if rows.is_empty() {
                    continue;
                }
                let cache = match ctx.fused.as_deref_mut() {
                    Some(caches) => &mut caches[self.index].experts[e],
                    None => &mut local_cache[e],
                };
                if cache.is_none() {
                    *cache = Some(self.experts[e].fused_transposed(ctx.tape)?);
                }
                let fused = cache.as_ref().expect("just filled");
                let idx = Rc::new(rows);
                let gathered = x_flat.gather_rows(Rc::clone(&idx))?;
                let out = expert_forward_fused(fused, &gathered)?;
                outputs.insert(e, (idx, out));
            }
            let y = moe_combine(&decision, &outputs, d)?.reshape(vec![b, p, d])?;

            if let (Some(times), Some(t0)) = (ctx.times.as_deref_mut(), moe_t0) {
                times.moe += t0.elapsed();
            }

            let mut g_for_trace = None;
            if t != rounds {
                let gru_t0 = ctx.times.is_some().then(Instant::now);
                let (h_new, g) = self.gru.step(&h, &y, self.candidate, ctx.tape)?;
                h = h_new;
                x_t = x_t.add(&g)?;
                if let (Some(times), Some(t0)) = (ctx.times.as_deref_mut(), gru_t0) {
                    times.gru += t0.elapsed();
                }
                g_for_trace = Some(g);
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(RoundTrace {
                    round: t,
                    x: x_input.expect("captured when tracing"),
                    y: y.clone(),
                    g: g_for_trace,
                });
            }
            y_final = Some(y);
        }
        Ok(y_final.expect("rounds >= 1"))
    }
}
