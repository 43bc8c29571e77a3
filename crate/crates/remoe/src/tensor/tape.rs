//! The differentiation tape: an ordered record of primitive operations.
//!
//! Nodes are appended in forward execution order and visited exactly once,
//! in reverse, by [`backward`]. A tape is single-use; forward passes rebuild
//! it from scratch (the round count and routing decisions are runtime data).

use super::kernels;
use super::ops::Activation;
use super::Tensor;
use crate::error::{Error, Result};
use crate::param::Param;
use crate::scalar::Scalar;
use std::cell::RefCell;
use std::rc::Rc;

pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

pub(crate) struct Node<S: Scalar> {
    pub op: Op<S>,
}

/// A captured operand: its value buffer, shape, and tape node (if tracked).
pub(crate) struct Src<S: Scalar> {
    pub node: Option<usize>,
    pub data: Rc<Vec<S>>,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Src<S> {
    pub fn of(t: &Tensor<S>) -> Self {
        Src {
            node: t.node(),
            data: t.data_rc(),
            shape: t.shape().to_vec(),
        }
    }
}

pub(crate) enum Op<S: Scalar> {
    /// Graph input; `param` present when gradients must be written back.
    Leaf { param: Option<Param<S>> },
    /// a `[..., m, k]` times a 2-D `[k, n]`.
    Matmul { a: Src<S>, b: Src<S> },
    /// Batched product with equal leading dims: `[.., m, k] x [.., k, n]`.
    Bmm { a: Src<S>, b: Src<S> },
    Transpose2d { a: Src<S> },
    Permute { a: Src<S>, axes: Vec<usize> },
    Reshape { a: Src<S> },
    Add { a: Src<S>, b: Src<S> },
    Sub { a: Src<S>, b: Src<S> },
    Mul { a: Src<S>, b: Src<S> },
    Scale { a: Src<S>, c: S },
    /// a `[..., d]` plus bias `[d]`.
    AddBias { a: Src<S>, b: Src<S> },
    Act {
        a: Src<S>,
        kind: Activation,
        out: Rc<Vec<S>>,
    },
    ConcatLast { a: Src<S>, b: Src<S> },
    RmsNorm {
        x: Src<S>,
        gain: Src<S>,
        /// 1/rms per row, saved from the forward pass.
        inv: Vec<S>,
    },
    /// Rotary position mixing on `[b, h, p, hd]`, pairs (2i, 2i+1).
    Rope {
        a: Src<S>,
        pos_offset: usize,
        base: f64,
    },
    /// Scores `[..., q, kv]`; keys beyond `q_index + offset` are masked.
    CausalMask { a: Src<S>, offset: usize },
    Dropout {
        a: Src<S>,
        keep: Vec<bool>,
        scale: S,
    },
    /// Row gather of `w [v, d]` by token id.
    Embedding { w: Src<S>, ids: Vec<u32> },
    /// Sparsify `[tokens, n]` probabilities to the top-k entries per row.
    TopkRenorm {
        probs: Src<S>,
        /// k selected expert indices per token, flattened.
        selected: Vec<u32>,
        k: usize,
        renorm: bool,
        out: Rc<Vec<S>>,
    },
    GatherRows {
        a: Src<S>,
        idx: Rc<Vec<usize>>,
    },
    /// Rows `[m, d]` placed at `idx` in a zero `[total, d]` output.
    ScatterRows {
        rows: Src<S>,
        idx: Rc<Vec<usize>>,
    },
    /// Row-wise scaling of `[m, d]` by weights `[m]`.
    ScaleRows { a: Src<S>, w: Src<S> },
    /// Flat-index gather from a 2-D tensor into a vector.
    SelectEntries { a: Src<S>, entries: Vec<usize> },
    /// `[m, n] -> [n]` column means.
    MeanOverRows { a: Src<S> },
    SumAll { a: Src<S> },
    CrossEntropy {
        logits: Src<S>,
        targets: Vec<u32>,
        mask: Vec<bool>,
        count: usize,
    },
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn push(&self, op: Op<S>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op });
        inner.nodes.len() - 1
    }

    pub(crate) fn same(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

/// Adds `contrib(buf)` into the gradient buffer of `src`, if it is tracked.
fn with_grad<S: Scalar, F: FnOnce(&mut [S])>(
    grads: &mut [Option<Vec<S>>],
    src: &Src<S>,
    f: F,
) {
    if let Some(j) = src.node {
        let buf = grads[j].get_or_insert_with(|| vec![S::ZERO; src.data.len()]);
        f(buf);
    }
}

pub(crate) fn run_backward<S: Scalar>(loss: &Tensor<S>) -> Result<()> {
    let tape = loss
        .tape()
        .ok_or_else(|| Error::Contract("backward: loss is not tracked on a tape".into()))?
        .clone();
    if loss.rank() != 0 {
        return Err(Error::Contract(format!(
            "backward: loss must be a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let mut inner = tape.inner.borrow_mut();
    if inner.consumed {
        return Err(Error::Contract(
            "backward: tape already consumed; rebuild the graph before differentiating again"
                .into(),
        ));
    }
    inner.consumed = true;

    let start = loss.node().expect("tracked loss has a node");
    let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(start + 1);
    grads.resize_with(start + 1, || None);
    grads[start] = Some(vec![S::ONE]);

    for i in (0..=start).rev() {
        let Some(g) = grads[i].take() else { continue };
        step_backward(&inner.nodes[i].op, &g, &mut grads);
    }
    Ok(())
}

fn step_backward<S: Scalar>(op: &Op<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
    match op {
        Op::Leaf { param } => {
            if let Some(p) = param {
                p.accumulate_grad(g);
            }
        }
        Op::Matmul { a, b } => {
            let kdim = *b.shape.first().expect("matmul rhs 2-D");
            let n = b.shape[1];
            let m_total = a.data.len() / kdim;
            with_grad(grads, a, |da| {
                kernels::mm_nt_acc(g, &b.data, m_total, n, kdim, da);
            });
            with_grad(grads, b, |db| {
                kernels::mm_tn_acc(&a.data, g, m_total, kdim, n, db);
            });
        }
        Op::Bmm { a, b } => {
            let ra = a.shape.len();
            let (m, kdim) = (a.shape[ra - 2], a.shape[ra - 1]);
            let n = b.shape[b.shape.len() - 1];
            let batch = a.data.len() / (m * kdim);
            with_grad(grads, a, |da| {
                for bi in 0..batch {
                    kernels::mm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b.data[bi * kdim * n..(bi + 1) * kdim * n],
                        m,
                        n,
                        kdim,
                        &mut da[bi * m * kdim..(bi + 1) * m * kdim],
                    );
                }
            });
            with_grad(grads, b, |db| {
                for bi in 0..batch {
                    kernels::mm_tn_acc(
                        &a.data[bi * m * kdim..(bi + 1) * m * kdim],
                        &g[bi * m * n..(bi + 1) * m * n],
                        m,
                        kdim,
                        n,
                        &mut db[bi * kdim * n..(bi + 1) * kdim * n],
                    );
                }
            });
        }
        Op::Transpose2d { a } => {
            let (m, n) = (a.shape[0], a.shape[1]);
            with_grad(grads, a, |da| {
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] += g[i * m + j];
                    }
                }
            });
        }
        Op::Permute { a, axes } => {
            let in_shape = &a.shape;
            let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
            with_grad(grads, a, |da| {
                let in_strides = strides(in_shape);
                let out_strides = strides(&out_shape);
                let mut coords = vec![0usize; out_shape.len()];
                for (oi, &gv) in g.iter().enumerate() {
                    unravel(oi, &out_strides, &mut coords);
                    let mut ii = 0;
                    for (k, &c) in coords.iter().enumerate() {
                        ii += c * in_strides[axes[k]];
                    }
                    da[ii] += gv;
                }
            });
        }
        Op::Reshape { a } => {
            with_grad(grads, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
        }
        Op::Add { a, b } => {
            backward_binary_linear(grads, a, b, g, S::ONE, S::ONE);
        }
        Op::Sub { a, b } => {
            backward_binary_linear(grads, a, b, g, S::ONE, -S::ONE);
        }
        Op::Mul { a, b } => {
            // Either operand may be rank-0.
            with_grad(grads, a, |da| {
                if a.data.len() == 1 && g.len() > 1 {
                    let mut acc = S::ZERO;
                    for (i, &gv) in g.iter().enumerate() {
                        acc += gv * b.data[i];
                    }
                    da[0] += acc;
                } else {
                    for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                        let bv = if b.data.len() == 1 { b.data[0] } else { b.data[i] };
                        *d += gv * bv;
                    }
                }
            });
            with_grad(grads, b, |db| {
                if b.data.len() == 1 && g.len() > 1 {
                    let mut acc = S::ZERO;
                    for (i, &gv) in g.iter().enumerate() {
                        acc += gv * a.data[i];
                    }
                    db[0] += acc;
                } else {
                    for (i, (d, &gv)) in db.iter_mut().zip(g).enumerate() {
                        let av = if a.data.len() == 1 { a.data[0] } else { a.data[i] };
                        *d += gv * av;
                    }
                }
            });
        }
        Op::Scale { a, c } => {
            with_grad(grads, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * *c;
                }
            });
        }
        Op::AddBias { a, b } => {
            with_grad(grads, a, |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
            });
            let d = b.data.len();
            with_grad(grads, b, |db| {
                for row in g.chunks(d) {
                    for (dv, &gv) in db.iter_mut().zip(row) {
                        *dv += gv;
                    }
                }
            });
        }
        Op::Act { a, kind, out } => {
            with_grad(grads, a, |da| match kind {
                Activation::Sigmoid => {
                    for i in 0..g.len() {
                        let y = out[i];
                        da[i] += g[i] * y * (S::ONE - y);
                    }
                }
                Activation::Tanh => {
                    for i in 0..g.len() {
                        let y = out[i];
                        da[i] += g[i] * (S::ONE - y * y);
                    }
                }
                Activation::Silu => {
                    for i in 0..g.len() {
                        let x = a.data[i];
                        let s = x.sigmoid();
                        da[i] += g[i] * s * (S::ONE + x * (S::ONE - s));
                    }
                }
                Activation::SoftmaxLast => {
                    let cols = *a.shape.last().expect("softmax needs an axis");
                    for (r, (g_row, y_row)) in g.chunks(cols).zip(out.chunks(cols)).enumerate() {
                        let mut dot = S::ZERO;
                        for (gv, yv) in g_row.iter().zip(y_row) {
                            dot += *gv * *yv;
                        }
                        let da_row = &mut da[r * cols..(r + 1) * cols];
                        for ((d, &gv), &yv) in da_row.iter_mut().zip(g_row).zip(y_row) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            });
        }
        Op::ConcatLast { a, b } => {
            let p = *a.shape.last().expect("concat lhs");
            let q = *b.shape.last().expect("concat rhs");
            with_grad(grads, a, |da| {
                for (r, g_row) in g.chunks(p + q).enumerate() {
                    for (d, &gv) in da[r * p..(r + 1) * p].iter_mut().zip(&g_row[..p]) {
                        *d += gv;
                    }
                }
            });
            with_grad(grads, b, |db| {
                for (r, g_row) in g.chunks(p + q).enumerate() {
                    for (d, &gv) in db[r * q..(r + 1) * q].iter_mut().zip(&g_row[p..]) {
                        *d += gv;
                    }
                }
            });
        }
        Op::RmsNorm { x, gain, inv } => {
            let d = *x.shape.last().expect("rms_norm axis");
            let dn = S::from_f64(d as f64);
            with_grad(grads, x, |dx| {
                for (r, (g_row, x_row)) in g.chunks(d).zip(x.data.chunks(d)).enumerate() {
                    let iv = inv[r];
                    let mut dot = S::ZERO;
                    for j in 0..d {
                        dot += g_row[j] * gain.data[j] * x_row[j];
                    }
                    let coef = iv * iv * iv * dot / dn;
                    let dx_row = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dx_row[j] += g_row[j] * gain.data[j] * iv - x_row[j] * coef;
                    }
                }
            });
            with_grad(grads, gain, |dg| {
                for (r, (g_row, x_row)) in g.chunks(d).zip(x.data.chunks(d)).enumerate() {
                    let iv = inv[r];
                    for j in 0..d {
                        dg[j] += g_row[j] * x_row[j] * iv;
                    }
                }
            });
        }
        Op::Rope { a, pos_offset, base } => {
            let sh = &a.shape;
            let (b_, h, p, hd) = (sh[0], sh[1], sh[2], sh[3]);
            with_grad(grads, a, |da| {
                rope_apply(g, da, b_, h, p, hd, *pos_offset, *base, true);
            });
        }
        Op::CausalMask { a, offset } => {
            let r = a.shape.len();
            let (q, kv) = (a.shape[r - 2], a.shape[r - 1]);
            with_grad(grads, a, |da| {
                for (mi, mat) in g.chunks(q * kv).enumerate() {
                    let base = mi * q * kv;
                    for qi in 0..q {
                        let limit = (qi + offset + 1).min(kv);
                        for j in 0..limit {
                            da[base + qi * kv + j] += mat[qi * kv + j];
                        }
                    }
                }
            });
        }
        Op::Dropout { a, keep, scale } => {
            with_grad(grads, a, |da| {
                for i in 0..g.len() {
                    if keep[i] {
                        da[i] += g[i] * *scale;
                    }
                }
            });
        }
        Op::Embedding { w, ids } => {
            let d = w.shape[1];
            with_grad(grads, w, |dw| {
                for (r, &id) in ids.iter().enumerate() {
                    let row = id as usize * d;
                    for j in 0..d {
                        dw[row + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::TopkRenorm {
            probs,
            selected,
            k,
            renorm,
            out,
        } => {
            let n = *probs.shape.last().expect("topk axis");
            let tokens = probs.data.len() / n;
            with_grad(grads, probs, |dp| {
                for t in 0..tokens {
                    let sel = &selected[t * k..(t + 1) * k];
                    if *renorm {
                        let mut z = S::ZERO;
                        for &e in sel {
                            z += probs.data[t * n + e as usize];
                        }
                        let mut dot = S::ZERO;
                        for &e in sel {
                            let idx = t * n + e as usize;
                            dot += g[idx] * out[idx];
                        }
                        for &e in sel {
                            let idx = t * n + e as usize;
                            dp[idx] += (g[idx] - dot) / z;
                        }
                    } else {
                        for &e in sel {
                            let idx = t * n + e as usize;
                            dp[idx] += g[idx];
                        }
                    }
                }
            });
        }
        Op::GatherRows { a, idx } => {
            let d = a.shape[1];
            with_grad(grads, a, |da| {
                for (r, &src_row) in idx.iter().enumerate() {
                    for j in 0..d {
                        da[src_row * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::ScatterRows { rows, idx, .. } => {
            let d = rows.shape[1];
            with_grad(grads, rows, |dr| {
                for (r, &dst_row) in idx.iter().enumerate() {
                    for j in 0..d {
                        dr[r * d + j] += g[dst_row * d + j];
                    }
                }
            });
        }
        Op::ScaleRows { a, w } => {
            let d = a.shape[1];
            with_grad(grads, a, |da| {
                for r in 0..w.data.len() {
                    let wv = w.data[r];
                    for j in 0..d {
                        da[r * d + j] += g[r * d + j] * wv;
                    }
                }
            });
            with_grad(grads, w, |dw| {
                for r in 0..w.data.len() {
                    let mut acc = S::ZERO;
                    for j in 0..d {
                        acc += g[r * d + j] * a.data[r * d + j];
                    }
                    dw[r] += acc;
                }
            });
        }
        Op::SelectEntries { a, entries } => {
            with_grad(grads, a, |da| {
                for (r, &e) in entries.iter().enumerate() {
                    da[e] += g[r];
                }
            });
        }
        Op::MeanOverRows { a } => {
            let n = a.shape[1];
            let m = a.shape[0];
            let inv_m = S::ONE / S::from_f64(m as f64);
            with_grad(grads, a, |da| {
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] += g[j] * inv_m;
                    }
                }
            });
        }
        Op::SumAll { a } => {
            with_grad(grads, a, |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            count,
        } => {
            let v = *logits.shape.last().expect("logits vocab axis");
            let inv_count = S::ONE / S::from_f64(*count as f64);
            with_grad(grads, logits, |dl| {
                let mut probs = vec![S::ZERO; v];
                for (t, row) in logits.data.chunks(v).enumerate() {
                    if !mask[t] {
                        continue;
                    }
                    kernels::softmax_rows(row, 1, v, &mut probs);
                    let dl_row = &mut dl[t * v..(t + 1) * v];
                    let coef = g[0] * inv_count;
                    for j in 0..v {
                        dl_row[j] += probs[j] * coef;
                    }
                    dl_row[targets[t] as usize] -= coef;
                }
            });
        }
    }
}

fn backward_binary_linear<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    a: &Src<S>,
    b: &Src<S>,
    g: &[S],
    ca: S,
    cb: S,
) {
    with_grad(grads, a, |da| {
        if a.data.len() == 1 && g.len() > 1 {
            let mut acc = S::ZERO;
            for &gv in g {
                acc += gv;
            }
            da[0] += acc * ca;
        } else {
            for (d, &gv) in da.iter_mut().zip(g) {
                *d += gv * ca;
            }
        }
    });
    with_grad(grads, b, |db| {
        if b.data.len() == 1 && g.len() > 1 {
            let mut acc = S::ZERO;
            for &gv in g {
                acc += gv;
            }
            db[0] += acc * cb;
        } else {
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv * cb;
            }
        }
    });
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn unravel(mut idx: usize, strides: &[usize], out: &mut [usize]) {
    for (o, &st) in out.iter_mut().zip(strides) {
        *o = idx / st;
        idx %= st;
    }
}

/// Rotates pairs (2i, 2i+1) of the head dimension by position-dependent
/// angles; `inverse` applies the transposed rotation (used by backward).
#[allow(clippy::too_many_arguments)]
pub(crate) fn rope_apply<S: Scalar>(
    input: &[S],
    out: &mut [S],
    b: usize,
    h: usize,
    p: usize,
    hd: usize,
    pos_offset: usize,
    base: f64,
    inverse: bool,
) {
    let half = hd / 2;
    // Angle table: [p, half].
    let mut cos_t = vec![S::ZERO; p * half];
    let mut sin_t = vec![S::ZERO; p * half];
    for pi in 0..p {
        let pos = (pos_offset + pi) as f64;
        for i in 0..half {
            let theta = pos * base.powf(-2.0 * i as f64 / hd as f64);
            cos_t[pi * half + i] = S::from_f64(theta.cos());
            sin_t[pi * half + i] = S::from_f64(theta.sin());
        }
    }
    for bi in 0..b {
        for hi in 0..h {
            for pi in 0..p {
                let off = ((bi * h + hi) * p + pi) * hd;
                for i in 0..half {
                    let (c, s) = (cos_t[pi * half + i], sin_t[pi * half + i]);
                    let x0 = input[off + 2 * i];
                    let x1 = input[off + 2 * i + 1];
                    if inverse {
                        out[off + 2 * i] += x0 * c + x1 * s;
                        out[off + 2 * i + 1] += -x0 * s + x1 * c;
                    } else {
                        out[off + 2 * i] += x0 * c - x1 * s;
                        out[off + 2 * i + 1] += x0 * s + x1 * c;
                    }
                }
            }
        }
    }
}
