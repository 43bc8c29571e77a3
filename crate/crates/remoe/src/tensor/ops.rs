//! Differentiable operations.
//!
//! Each method validates shapes, computes the forward value with the
//! deterministic kernels, and records a node when any operand is tracked.
//! Mixing operands from two different tapes is a contract error.

use super::kernels;
use super::tape::{rope_apply, run_backward, Op, Src, Tape};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Silu,
    SoftmaxLast,
}

fn dim_err<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Error {
    Error::Dim {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// All tracked operands must live on one tape; returns it.
fn unify<S: Scalar>(ts: &[&Tensor<S>]) -> Result<Option<Tape<S>>> {
    let mut found: Option<Tape<S>> = None;
    for t in ts {
        if let Some(tape) = t.tape() {
            match &found {
                None => found = Some(tape.clone()),
                Some(f) if f.same(tape) => {}
                Some(_) => {
                    return Err(Error::Contract(
                        "operands belong to different tapes".into(),
                    ))
                }
            }
        }
    }
    Ok(found)
}

fn emit<S: Scalar>(
    tape: Option<Tape<S>>,
    shape: Vec<usize>,
    data: Vec<S>,
    op: impl FnOnce() -> Op<S>,
) -> Tensor<S> {
    match tape {
        Some(t) => {
            let node = t.push(op());
            Tensor::tracked(shape, data, t, node)
        }
        None => Tensor::from_vec(shape, data).expect("emit: shape/data agree"),
    }
}

impl<S: Scalar> Tensor<S> {
    /// `self [..., m, k]` times a 2-D `rhs [k, n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if rhs.rank() != 2 || self.rank() < 2 || self.shape().last() != rhs.shape().first() {
            return Err(dim_err("matmul", self, rhs));
        }
        let k = rhs.shape()[0];
        let n = rhs.shape()[1];
        let m_total = self.len() / k;
        let mut out = vec![S::ZERO; m_total * n];
        kernels::mm_nn(self.data(), rhs.data(), m_total, k, n, &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let tape = unify(&[self, rhs])?;
        Ok(emit(tape, shape, out, || Op::Matmul {
            a: Src::of(self),
            b: Src::of(rhs),
        }))
    }

    /// Batched product: `self [.., m, k]` times `rhs [.., k, n]`, equal leading dims.
    pub fn bmm(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let ra = self.rank();
        let rb = rhs.rank();
        if ra < 2
            || ra != rb
            || self.shape()[..ra - 2] != rhs.shape()[..rb - 2]
            || self.shape()[ra - 1] != rhs.shape()[rb - 2]
        {
            return Err(dim_err("bmm", self, rhs));
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let n = rhs.shape()[rb - 1];
        let batch = self.len() / (m * k);
        let mut out = vec![S::ZERO; batch * m * n];
        for bi in 0..batch {
            kernels::mm_nn(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &rhs.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = self.shape().to_vec();
        shape[ra - 1] = n;
        let tape = unify(&[self, rhs])?;
        Ok(emit(tape, shape, out, || Op::Bmm {
            a: Src::of(self),
            b: Src::of(rhs),
        }))
    }

    pub fn transpose2d(&self) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "transpose2d on shape {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data()[i * n + j];
            }
        }
        let tape = unify(&[self])?;
        Ok(emit(tape, vec![n, m], out, || Op::Transpose2d {
            a: Src::of(self),
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Contract(format!(
                "permute axes {:?} invalid for shape {:?}",
                axes,
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let in_strides = super::tape::strides(self.shape());
        let out_strides = super::tape::strides(&out_shape);
        let mut out = vec![S::ZERO; self.len()];
        let mut coords = vec![0usize; r];
        for (oi, o) in out.iter_mut().enumerate() {
            let mut rem = oi;
            for (c, &st) in coords.iter_mut().zip(&out_strides) {
                *c = rem / st;
                rem %= st;
            }
            let mut ii = 0;
            for (k, &c) in coords.iter().enumerate() {
                ii += c * in_strides[axes[k]];
            }
            *o = self.data()[ii];
        }
        let tape = unify(&[self])?;
        Ok(emit(tape, out_shape, out, || Op::Permute {
            a: Src::of(self),
            axes: axes.to_vec(),
        }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        if numel(&shape) != self.len() {
            return Err(Error::Contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let tape = unify(&[self])?;
        Ok(emit(tape, shape, self.data().to_vec(), || Op::Reshape {
            a: Src::of(self),
        }))
    }

    fn binary(
        &self,
        rhs: &Tensor<S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: impl FnOnce(Src<S>, Src<S>) -> Op<S>,
    ) -> Result<Tensor<S>> {
        // Shapes must match exactly; a rank-0 operand broadcasts.
        let (shape, len) = if self.shape() == rhs.shape() {
            (self.shape().to_vec(), self.len())
        } else if rhs.rank() == 0 {
            (self.shape().to_vec(), self.len())
        } else if self.rank() == 0 {
            (rhs.shape().to_vec(), rhs.len())
        } else {
            return Err(dim_err(name, self, rhs));
        };
        let mut out = vec![S::ZERO; len];
        for (i, o) in out.iter_mut().enumerate() {
            let a = if self.len() == 1 { self.data()[0] } else { self.data()[i] };
            let b = if rhs.len() == 1 { rhs.data()[0] } else { rhs.data()[i] };
            *o = f(a, b);
        }
        let tape = unify(&[self, rhs])?;
        Ok(emit(tape, shape, out, || op(Src::of(self), Src::of(rhs))))
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(rhs, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(rhs, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(rhs, "hadamard", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&self, c: S) -> Result<Tensor<S>> {
        let out: Vec<S> = self.data().iter().map(|&v| v * c).collect();
        let tape = unify(&[self])?;
        Ok(emit(tape, self.shape().to_vec(), out, || Op::Scale {
            a: Src::of(self),
            c,
        }))
    }

    /// `self [..., d]` plus a bias vector `[d]`.
    pub fn add_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        if bias.rank() != 1 || self.rank() == 0 || self.shape().last() != bias.shape().first() {
            return Err(dim_err("add_bias", self, bias));
        }
        let d = bias.len();
        let mut out = vec![S::ZERO; self.len()];
        for (o_row, x_row) in out.chunks_mut(d).zip(self.data().chunks(d)) {
            for ((o, &x), &b) in o_row.iter_mut().zip(x_row).zip(bias.data()) {
                *o = x + b;
            }
        }
        let tape = unify(&[self, bias])?;
        Ok(emit(tape, self.shape().to_vec(), out, || Op::AddBias {
            a: Src::of(self),
            b: Src::of(bias),
        }))
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor<S>> {
        let out = match kind {
            Activation::Sigmoid => self.data().iter().map(|&v| v.sigmoid()).collect(),
            Activation::Tanh => self.data().iter().map(|&v| v.tanh()).collect(),
            Activation::Silu => self.data().iter().map(|&v| v.silu()).collect(),
            Activation::SoftmaxLast => {
                let cols = *self.shape().last().ok_or_else(|| {
                    Error::Contract("softmax_last needs at least one axis".into())
                })?;
                let rows = self.len() / cols;
                let mut out = vec![S::ZERO; self.len()];
                kernels::softmax_rows(self.data(), rows, cols, &mut out);
                out
            }
        };
        let out_rc = Rc::new(out);
        let tape = unify(&[self])?;
        let shape = self.shape().to_vec();
        match tape {
            Some(t) => {
                let node = t.push(Op::Act {
                    a: Src::of(self),
                    kind,
                    out: Rc::clone(&out_rc),
                });
                Ok(Tensor::tracked_shared(shape, out_rc, t, node))
            }
            None => Ok(Tensor::shared(shape, out_rc)),
        }
    }

    pub fn sigmoid(&self) -> Result<Tensor<S>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor<S>> {
        self.activation(Activation::Tanh)
    }

    pub fn silu(&self) -> Result<Tensor<S>> {
        self.activation(Activation::Silu)
    }

    pub fn softmax_last(&self) -> Result<Tensor<S>> {
        self.activation(Activation::SoftmaxLast)
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (ra, rb) = (a.rank(), b.rank());
        if ra == 0 || ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
            return Err(dim_err("concat_last", a, b));
        }
        let p = a.shape()[ra - 1];
        let q = b.shape()[rb - 1];
        let rows = a.len() / p.max(1);
        let rows = if p == 0 { b.len() / q.max(1) } else { rows };
        let mut out = vec![S::ZERO; rows * (p + q)];
        for r in 0..rows {
            out[r * (p + q)..r * (p + q) + p].copy_from_slice(&a.data()[r * p..(r + 1) * p]);
            out[r * (p + q) + p..(r + 1) * (p + q)].copy_from_slice(&b.data()[r * q..(r + 1) * q]);
        }
        let mut shape = a.shape().to_vec();
        shape[ra - 1] = p + q;
        let tape = unify(&[a, b])?;
        Ok(emit(tape, shape, out, || Op::ConcatLast {
            a: Src::of(a),
            b: Src::of(b),
        }))
    }

    /// RMS normalization over the last axis with a per-channel gain.
    pub fn rms_norm(&self, gain: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        if gain.rank() != 1 || self.shape().last() != gain.shape().first() {
            return Err(dim_err("rms_norm", self, gain));
        }
        let d = gain.len();
        let rows = self.len() / d;
        let mut out = vec![S::ZERO; self.len()];
        let mut inv = vec![S::ZERO; rows];
        let dn = S::from_f64(d as f64);
        let eps = S::from_f64(eps);
        for (r, (x_row, o_row)) in self.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let mut ss = S::ZERO;
            for &x in x_row {
                ss += x * x;
            }
            let iv = S::ONE / (ss / dn + eps).sqrt();
            inv[r] = iv;
            for ((o, &x), &g) in o_row.iter_mut().zip(x_row).zip(gain.data()) {
                *o = x * iv * g;
            }
        }
        let tape = unify(&[self, gain])?;
        Ok(emit(tape, self.shape().to_vec(), out, || Op::RmsNorm {
            x: Src::of(self),
            gain: Src::of(gain),
            inv,
        }))
    }

    /// Rotary position mixing on `[b, h, p, hd]` (hd even).
    pub fn rope(&self, pos_offset: usize, base: f64) -> Result<Tensor<S>> {
        if self.rank() != 4 || self.shape()[3] % 2 != 0 {
            return Err(Error::Contract(format!(
                "rope expects [b, h, p, hd] with even hd, got {:?}",
                self.shape()
            )));
        }
        let sh = self.shape().to_vec();
        let mut out = vec![S::ZERO; self.len()];
        rope_apply(
            self.data(),
            &mut out,
            sh[0],
            sh[1],
            sh[2],
            sh[3],
            pos_offset,
            base,
            false,
        );
        let tape = unify(&[self])?;
        Ok(emit(tape, sh, out, || Op::Rope {
            a: Src::of(self),
            pos_offset,
            base,
        }))
    }

    /// Masks attention scores `[..., q, kv]` so query `i` sees keys `<= i + offset`.
    pub fn causal_mask(&self, offset: usize) -> Result<Tensor<S>> {
        if self.rank() < 2 {
            return Err(Error::Contract(format!(
                "causal_mask on shape {:?}",
                self.shape()
            )));
        }
        let r = self.rank();
        let (q, kv) = (self.shape()[r - 2], self.shape()[r - 1]);
        let neg = S::from_f64(-1e30);
        let mut out = self.data().to_vec();
        for mat in out.chunks_mut(q * kv) {
            for qi in 0..q {
                for j in (qi + offset + 1).min(kv)..kv {
                    mat[qi * kv + j] = neg;
                }
            }
        }
        let tape = unify(&[self])?;
        Ok(emit(tape, self.shape().to_vec(), out, || Op::CausalMask {
            a: Src::of(self),
            offset,
        }))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Tensor<S>> {
        if rate == 0.0 {
            return Ok(self.clone());
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let scale = S::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<bool> = (0..self.len()).map(|_| rng.random::<f64>() >= rate).collect();
        let out: Vec<S> = self
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { S::ZERO })
            .collect();
        let tape = unify(&[self])?;
        Ok(emit(tape, self.shape().to_vec(), out, || Op::Dropout {
            a: Src::of(self),
            keep,
            scale,
        }))
    }

    /// Row lookup: `weight [v, d]` gathered by `ids`, shaped `[lead..., d]`.
    pub fn embedding(weight: &Tensor<S>, ids: &[u32], lead: &[usize]) -> Result<Tensor<S>> {
        if weight.rank() != 2 {
            return Err(Error::Contract(format!(
                "embedding weight must be 2-D, got {:?}",
                weight.shape()
            )));
        }
        if numel(lead) != ids.len() {
            return Err(Error::Contract(format!(
                "embedding lead shape {:?} vs {} ids",
                lead,
                ids.len()
            )));
        }
        let v = weight.shape()[0];
        let d = weight.shape()[1];
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocab {v}"
            )));
        }
        let mut out = vec![S::ZERO; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d]
                .copy_from_slice(&weight.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let tape = unify(&[weight])?;
        Ok(emit(tape, shape, out, || Op::Embedding {
            w: Src::of(weight),
            ids: ids.to_vec(),
        }))
    }

    /// Keeps the k largest entries per row (ties: lowest index), optionally
    /// renormalizing survivors to sum to one. Returns the sparse tensor and
    /// the selected indices (k per row, ascending by rank then index).
    ///
    /// Gradients flow only through surviving entries; when `renorm` is on the
    /// survivor Jacobian of the normalization is applied. `k == n` is an
    /// exact pass-through.
    pub fn topk_renorm(&self, k: usize, renorm: bool) -> Result<(Tensor<S>, Vec<u32>)> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("topk_renorm needs at least one axis".into()))?;
        if k < 1 || k > n {
            return Err(Error::Config(format!(
                "top-k k={k} outside [1, n={n}]"
            )));
        }
        let tokens = self.len() / n;
        let mut selected = Vec::with_capacity(tokens * k);
        let mut out = vec![S::ZERO; self.len()];
        let effective_renorm = renorm && k < n;
        let mut taken = vec![false; n];
        let mut picks = vec![0usize; k];
        for (t, row) in self.data().chunks(n).enumerate() {
            taken.iter_mut().for_each(|t| *t = false);
            // Repeated strict-max scans: equal values resolve to the lowest index.
            for slot in picks.iter_mut() {
                let mut best = usize::MAX;
                for (j, &v) in row.iter().enumerate() {
                    if !taken[j] && (best == usize::MAX || v > row[best]) {
                        best = j;
                    }
                }
                taken[best] = true;
                *slot = best;
            }
            picks.sort_unstable();
            let o_row = &mut out[t * n..(t + 1) * n];
            if effective_renorm {
                let mut z = S::ZERO;
                for &j in picks.iter() {
                    z += row[j];
                }
                for &j in picks.iter() {
                    o_row[j] = row[j] / z;
                }
            } else {
                for &j in picks.iter() {
                    o_row[j] = row[j];
                }
            }
            selected.extend(picks.iter().map(|&j| j as u32));
        }
        let tape = unify(&[self])?;
        let sparse = emit(tape, self.shape().to_vec(), out.clone(), || Op::TopkRenorm {
            probs: Src::of(self),
            selected: selected.clone(),
            k,
            renorm: effective_renorm,
            out: Rc::new(out),
        });
        Ok((sparse, selected))
    }

    /// Gathers rows of a 2-D tensor.
    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows on shape {:?}",
                self.shape()
            )));
        }
        let (m, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&r| r >= m) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut out = vec![S::ZERO; idx.len() * d];
        for (r, &src_row) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&self.data()[src_row * d..(src_row + 1) * d]);
        }
        let shape = vec![idx.len(), d];
        let tape = unify(&[self])?;
        Ok(emit(tape, shape, out, || Op::GatherRows {
            a: Src::of(self),
            idx,
        }))
    }

    /// Places the rows of `self [m, d]` at `idx` within a zero `[total, d]`.
    pub fn scatter_rows(&self, idx: Rc<Vec<usize>>, total: usize) -> Result<Tensor<S>> {
        if self.rank() != 2 || self.shape()[0] != idx.len() {
            return Err(Error::Contract(format!(
                "scatter_rows: rows {:?} vs {} indices",
                self.shape(),
                idx.len()
            )));
        }
        let d = self.shape()[1];
        let mut out = vec![S::ZERO; total * d];
        for (r, &dst) in idx.iter().enumerate() {
            if dst >= total {
                return Err(Error::Contract(format!(
                    "scatter_rows index {dst} out of range for {total} rows"
                )));
            }
            out[dst * d..(dst + 1) * d].copy_from_slice(&self.data()[r * d..(r + 1) * d]);
        }
        let tape = unify(&[self])?;
        Ok(emit(tape, vec![total, d], out, || Op::ScatterRows {
            rows: Src::of(self),
            idx,
        }))
    }

    /// Scales row `r` of `self [m, d]` by `w[r]`.
    pub fn scale_rows(&self, w: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 || w.rank() != 1 || self.shape()[0] != w.len() {
            return Err(dim_err("scale_rows", self, w));
        }
        let d = self.shape()[1];
        let mut out = vec![S::ZERO; self.len()];
        for (r, (o_row, x_row)) in out.chunks_mut(d).zip(self.data().chunks(d)).enumerate() {
            let wv = w.data()[r];
            for (o, &x) in o_row.iter_mut().zip(x_row) {
                *o = x * wv;
            }
        }
        let tape = unify(&[self, w])?;
        Ok(emit(tape, self.shape().to_vec(), out, || Op::ScaleRows {
            a: Src::of(self),
            w: Src::of(w),
        }))
    }

    /// Gathers flat entries of a 2-D tensor into a vector.
    pub fn select_entries(&self, entries: Vec<usize>) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "select_entries on shape {:?}",
                self.shape()
            )));
        }
        if let Some(&bad) = entries.iter().find(|&&e| e >= self.len()) {
            return Err(Error::Contract(format!(
                "select_entries index {bad} out of range"
            )));
        }
        let out: Vec<S> = entries.iter().map(|&e| self.data()[e]).collect();
        let shape = vec![entries.len()];
        let tape = unify(&[self])?;
        Ok(emit(tape, shape, out, || Op::SelectEntries {
            a: Src::of(self),
            entries,
        }))
    }

    /// Column means of `[m, n] -> [n]`.
    pub fn mean_over_rows(&self) -> Result<Tensor<S>> {
        if self.rank() != 2 || self.shape()[0] == 0 {
            return Err(Error::Degenerate(format!(
                "mean_over_rows on shape {:?}",
                self.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![S::ZERO; n];
        for row in self.data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = S::ONE / S::from_f64(m as f64);
        for o in out.iter_mut() {
            *o *= inv;
        }
        let tape = unify(&[self])?;
        Ok(emit(tape, vec![n], out, || Op::MeanOverRows {
            a: Src::of(self),
        }))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let mut acc = S::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let tape = unify(&[self])?;
        Ok(emit(tape, vec![], vec![acc], || Op::SumAll { a: Src::of(self) }))
    }

    /// Mean negative log-likelihood over unmasked positions.
    ///
    /// `self` is `[..., v]` logits; `targets`/`mask` are flat over the leading
    /// dims. Log-softmax is max-subtracted for stability.
    pub fn cross_entropy(&self, targets: &[u32], mask: &[bool]) -> Result<Tensor<S>> {
        let v = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("cross_entropy needs a vocab axis".into()))?;
        let tokens = self.len() / v;
        if targets.len() != tokens || mask.len() != tokens {
            return Err(Error::Contract(format!(
                "cross_entropy: {tokens} logit rows vs {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Contract(format!(
                "target id {bad} out of range for vocab {v}"
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate(
                "cross_entropy: every position is masked".into(),
            ));
        }
        let mut total = S::ZERO;
        for (t, row) in self.data().chunks(v).enumerate() {
            if !mask[t] {
                continue;
            }
            let lse = kernels::logsumexp_row(row);
            total += lse - row[targets[t] as usize];
        }
        let mean = total / S::from_f64(count as f64);
        let tape = unify(&[self])?;
        Ok(emit(tape, vec![], vec![mean], || Op::CrossEntropy {
            logits: Src::of(self),
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
        }))
    }

    /// Reverse pass from a scalar loss. Single use per tape.
    pub fn backward(&self) -> Result<()> {
        run_backward(self)
    }
}
