//! Token routing: softmax scores, top-k selection, sparse combination,
//! the load-balance penalty, and per-expert workload statistics.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

/// Outcome of routing one batch of tokens through a layer's router.
pub struct RoutingDecision<S: Scalar> {
    /// Softmax scores over all experts, `[..., n]`.
    pub dense_probs: Tensor<S>,
    /// Exactly k nonzeros per token; renormalized when configured.
    pub sparse_weights: Tensor<S>,
    /// k selected expert indices per token (ascending), flattened.
    pub selected: Vec<u32>,
    pub experts: usize,
    pub k: usize,
    pub tokens: usize,
}

/// Routes `x [..., d]` through `router [n, d]`: softmax scores, then the
/// top-k survivors per token (ties to the lowest index).
///
/// Gradients flow only through surviving entries; masked-out experts are
/// detached by construction.
pub fn route<S: Scalar>(
    router: &Tensor<S>,
    x: &Tensor<S>,
    k: usize,
    renormalize: bool,
) -> Result<RoutingDecision<S>> {
    if router.rank() != 2 || x.shape().last() != Some(&router.shape()[1]) {
        return Err(Error::Dim {
            op: "route",
            lhs: x.shape().to_vec(),
            rhs: router.shape().to_vec(),
        });
    }
    let n = router.shape()[0];
    if k < 1 || k > n {
        return Err(Error::Config(format!(
            "route: k={k} outside [1, n={n}]"
        )));
    }
    let logits = x.matmul(&router.transpose2d()?)?;
    let dense_probs = logits.softmax_last()?;
    let (sparse_weights, selected) = dense_probs.topk_renorm(k, renormalize)?;
    let tokens = selected.len() / k;
    Ok(RoutingDecision {
        dense_probs,
        sparse_weights,
        selected,
        experts: n,
        k,
        tokens,
    })
}

impl<S: Scalar> RoutingDecision<S> {
    /// Token row indices (into the flattened token axis) that selected `expert`.
    pub fn tokens_for_expert(&self, expert: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for t in 0..self.tokens {
            let sel = &self.selected[t * self.k..(t + 1) * self.k];
            if sel.iter().any(|&e| e as usize == expert) {
                out.push(t);
            }
        }
        out
    }
}

/// Combines per-expert outputs into `y = sum_i s[i] * E_i(x)`.
///
/// `outputs` maps each expert index to (token rows, gathered outputs
/// `[rows, d]`). Every expert that any token selected must be present, and
/// only selected experts may appear: unselected experts are never evaluated.
pub fn moe_combine<S: Scalar>(
    decision: &RoutingDecision<S>,
    outputs: &BTreeMap<usize, (Rc<Vec<usize>>, Tensor<S>)>,
    dim: usize,
) -> Result<Tensor<S>> {
    let m = decision.tokens;
    let n = decision.experts;
    let sparse_flat = decision
        .sparse_weights
        .reshape(vec![m, n])?;
    let mut y = Tensor::zeros(vec![m, dim]);
    for expert in 0..n {
        let rows = decision.tokens_for_expert(expert);
        if rows.is_empty() {
            if outputs.contains_key(&expert) {
                return Err(Error::Contract(format!(
                    "moe_combine: expert {expert} was evaluated but never selected"
                )));
            }
            continue;
        }
        let Some((idx, out)) = outputs.get(&expert) else {
            return Err(Error::Contract(format!(
                "moe_combine: missing output for selected expert {expert}"
            )));
        };
        if **idx != rows || out.shape() != [rows.len(), dim] {
            return Err(Error::Contract(format!(
                "moe_combine: expert {expert} output does not cover its selected tokens"
            )));
        }
        let entries: Vec<usize> = rows.iter().map(|&t| t * n + expert).collect();
        let weights = sparse_flat.select_entries(entries)?;
        let contrib = out.scale_rows(&weights)?.scatter_rows(Rc::clone(idx), m)?;
        y = y.add(&contrib)?;
    }
    Ok(y)
}

/// Load-balance penalty n * sum_i f_i * p_i over one routing scope.
///
/// f_i is the fraction of tokens that selected expert i (a detached
/// statistic), p_i the mean sparse weight; gradients reach the router
/// through p_i only.
pub fn load_balance_loss<S: Scalar>(decision: &RoutingDecision<S>) -> Result<Tensor<S>> {
    let m = decision.tokens;
    if m == 0 {
        return Err(Error::Degenerate(
            "load_balance_loss: no routed tokens".into(),
        ));
    }
    let n = decision.experts;
    let mut counts = vec![0u64; n];
    for &e in &decision.selected {
        counts[e as usize] += 1;
    }
    let f: Vec<S> = counts
        .iter()
        .map(|&c| S::from_f64(c as f64 / m as f64))
        .collect();
    let f = Tensor::from_vec(vec![n], f)?;
    let p = decision
        .sparse_weights
        .reshape(vec![m, n])?
        .mean_over_rows()?;
    p.hadamard(&f)?.sum_all()?.scale(S::from_f64(n as f64))
}

/// Selection counts and weight sums per (layer, round) scope.
#[derive(Debug, Clone, Default)]
pub struct RoutingLedger {
    pub cells: BTreeMap<(usize, usize), LedgerCell>,
    /// Order-sensitive digest of every selection; two forward passes with
    /// identical routing produce identical digests.
    pub selection_digest: u64,
}

#[derive(Debug, Clone)]
pub struct LedgerCell {
    pub experts: usize,
    pub k: usize,
    pub counts: Vec<u64>,
    pub weight_sums: Vec<f64>,
    pub tokens: u64,
}

impl LedgerCell {
    fn new(experts: usize, k: usize) -> Self {
        LedgerCell {
            experts,
            k,
            counts: vec![0; experts],
            weight_sums: vec![0.0; experts],
            tokens: 0,
        }
    }

    /// Non-differentiable evaluation of the balance penalty from the stats.
    pub fn load_balance(&self) -> Result<f64> {
        if self.tokens == 0 {
            return Err(Error::Degenerate("load_balance on an empty ledger".into()));
        }
        let m = self.tokens as f64;
        let mut acc = 0.0;
        for i in 0..self.experts {
            let f = self.counts[i] as f64 / m;
            let p = self.weight_sums[i] / m;
            acc += f * p;
        }
        Ok(self.experts as f64 * acc)
    }

    pub fn merge(&mut self, other: &LedgerCell) {
        debug_assert_eq!(self.experts, other.experts);
        for i in 0..self.experts {
            self.counts[i] += other.counts[i];
            self.weight_sums[i] += other.weight_sums[i];
        }
        self.tokens += other.tokens;
    }
}

impl RoutingLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<S: Scalar>(
        &mut self,
        layer: usize,
        round: usize,
        decision: &RoutingDecision<S>,
    ) {
        let cell = self
            .cells
            .entry((layer, round))
            .or_insert_with(|| LedgerCell::new(decision.experts, decision.k));
        let n = decision.experts;
        let sparse = decision.sparse_weights.data();
        for t in 0..decision.tokens {
            for &e in &decision.selected[t * decision.k..(t + 1) * decision.k] {
                cell.counts[e as usize] += 1;
                cell.weight_sums[e as usize] += sparse[t * n + e as usize].to_f64();
                // FNV-1a over (layer, round, token, expert).
                for v in [layer as u64, round as u64, t as u64, e as u64] {
                    self.selection_digest ^= v.wrapping_add(0x9e3779b97f4a7c15);
                    self.selection_digest = self.selection_digest.wrapping_mul(0x100000001b3);
                }
            }
        }
        cell.tokens += decision.tokens as u64;
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Total routing records (one per token per selection).
    pub fn total_records(&self) -> u64 {
        self.cells.values().map(|c| c.counts.iter().sum::<u64>()).sum()
    }

    /// Merges all cells of one layer across rounds.
    pub fn layer_aggregate(&self, layer: usize) -> Option<LedgerCell> {
        let mut acc: Option<LedgerCell> = None;
        for ((l, _), cell) in &self.cells {
            if *l != layer {
                continue;
            }
            match &mut acc {
                None => acc = Some(cell.clone()),
                Some(a) => a.merge(cell),
            }
        }
        acc
    }

    /// Merges every cell into one.
    pub fn aggregate(&self) -> Option<LedgerCell> {
        let mut acc: Option<LedgerCell> = None;
        for cell in self.cells.values() {
            match &mut acc {
                None => acc = Some(cell.clone()),
                Some(a) => a.merge(cell),
            }
        }
        acc
    }

    pub fn merge_from(&mut self, other: &RoutingLedger) {
        for (key, cell) in &other.cells {
            self.cells
                .entry(*key)
                .and_modify(|c| c.merge(cell))
                .or_insert_with(|| cell.clone());
        }
        // Digest combination is order-sensitive by design.
        self.selection_digest ^= other.selection_digest.wrapping_mul(0x100000001b3);
    }
}

/// Normalized selection proportions and their population std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadStats {
    pub experts: usize,
    pub k: usize,
    pub tokens: u64,
    /// counts[i] / (k * tokens); sums to one.
    pub proportions: Vec<f64>,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Proportions of total selections per expert for one ledger scope.
pub fn workload_stats(cell: &LedgerCell) -> Result<WorkloadStats> {
    if cell.tokens == 0 {
        return Err(Error::Degenerate("workload_stats on an empty ledger".into()));
    }
    let total = (cell.k as u64 * cell.tokens) as f64;
    let proportions: Vec<f64> = cell.counts.iter().map(|&c| c as f64 / total).collect();
    Ok(stats_from_proportions(cell.experts, cell.k, cell.tokens, proportions))
}

pub(crate) fn stats_from_proportions(
    experts: usize,
    k: usize,
    tokens: u64,
    proportions: Vec<f64>,
) -> WorkloadStats {
    let n = proportions.len() as f64;
    let mean = proportions.iter().sum::<f64>() / n;
    let var = proportions.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let min = proportions.iter().copied().fold(f64::INFINITY, f64::min);
    let max = proportions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    WorkloadStats {
        experts,
        k,
        tokens,
        proportions,
        std: var.sqrt(),
        min,
        max,
        mean,
    }
}

/// One exported workload record (layer/round/expert granularity).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadRecord {
    pub task: String,
    pub layer: usize,
    pub round: usize,
    pub expert: usize,
    pub proportion: f64,
}

/// Flattens a ledger into machine-readable per-expert records.
pub fn workload_records(ledger: &RoutingLedger, task: &str) -> Vec<WorkloadRecord> {
    let mut out = Vec::new();
    for ((layer, round), cell) in &ledger.cells {
        let total = (cell.k as u64 * cell.tokens).max(1) as f64;
        for (expert, &c) in cell.counts.iter().enumerate() {
            out.push(WorkloadRecord {
                task: task.to_string(),
                layer: *layer,
                round: *round,
                expert,
                proportion: c as f64 / total,
            });
        }
    }
    out
}
