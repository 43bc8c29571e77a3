//! Per-forward-pass context: tape, round count, dropout, and the optional
//! side channels (routing ledger, load-balance terms, module timers,
//! fused-weight caches for cached inference).

use crate::routing::RoutingLedger;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;
use std::time::Duration;

/// Wall time spent per module family during a forward pass.
#[derive(Debug, Default, Clone, Copy)]
pub struct ModuleTimes {
    pub attention: Duration,
    pub moe: Duration,
    pub gru: Duration,
}

impl ModuleTimes {
    pub fn add(&mut self, other: &ModuleTimes) {
        self.attention += other.attention;
        self.moe += other.moe;
        self.gru += other.gru;
    }
}

/// Fused weights reused across forward passes when parameters are frozen
/// for the duration (cached autoregressive inference). Entries are
/// untracked tensors; training passes never use this cache.
pub struct LayerFusedCache<S: Scalar> {
    pub attn: Option<[Tensor<S>; 4]>,
    pub experts: Vec<Option<(Tensor<S>, Tensor<S>, Tensor<S>)>>,
}

impl<S: Scalar> LayerFusedCache<S> {
    pub fn new(experts: usize) -> Self {
        LayerFusedCache {
            attn: None,
            experts: (0..experts).map(|_| None).collect(),
        }
    }
}

pub struct ForwardCtx<'a, S: Scalar> {
    /// Present for training/gradient passes; absent for pure evaluation.
    pub tape: Option<&'a Tape<S>>,
    /// Rounds (T) for every recurrent MoE layer this pass.
    pub rounds: usize,
    /// Dropout rate on attention probabilities and layer FFN outputs.
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub ledger: Option<&'a mut RoutingLedger>,
    /// Collects one load-balance term per (layer, round).
    pub lb_terms: Option<&'a mut Vec<Tensor<S>>>,
    pub times: Option<&'a mut ModuleTimes>,
    pub fused: Option<&'a mut Vec<LayerFusedCache<S>>>,
}

impl<'a, S: Scalar> ForwardCtx<'a, S> {
    /// Plain evaluation: no tape, no dropout, no side channels.
    pub fn eval(rounds: usize) -> Self {
        ForwardCtx {
            tape: None,
            rounds,
            dropout: 0.0,
            rng: None,
            ledger: None,
            lb_terms: None,
            times: None,
            fused: None,
        }
    }

    /// Gradient pass without dropout or side channels.
    pub fn grad(tape: &'a Tape<S>, rounds: usize) -> Self {
        ForwardCtx {
            tape: Some(tape),
            ..Self::eval(rounds)
        }
    }
}
