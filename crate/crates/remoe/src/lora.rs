//! Low-rank adapters and the LoRA-fused expert feed-forward network.
//!
//! Every adapted weight is a frozen base matrix plus a scaled low-rank
//! product: W~ = W + (alpha / r) * B * A. B starts at zero, so a freshly
//! built model computes exactly what the frozen backbone computes.

use crate::error::{Error, Result};
use crate::param::{AdapterSite, Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A rank-r adapter for one `[d_out, d_in]` base matrix.
pub struct LoraPair<S: Scalar> {
    /// `[r, d_in]`, small uniform init.
    pub a: Param<S>,
    /// `[d_out, r]`, zero init.
    pub b: Param<S>,
    pub rank: usize,
    pub alpha: f64,
}

impl<S: Scalar> Clone for LoraPair<S> {
    fn clone(&self) -> Self {
        LoraPair {
            a: self.a.clone(),
            b: self.b.clone(),
            rank: self.rank,
            alpha: self.alpha,
        }
    }
}

/// Uniform init in [-limit, limit).
pub(crate) fn uniform_init<S: Scalar>(
    rng: &mut ChaCha8Rng,
    len: usize,
    limit: f64,
) -> Vec<S> {
    (0..len)
        .map(|_| S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit))
        .collect()
}

impl<S: Scalar> LoraPair<S> {
    /// A gets a fan-in-scaled uniform init, B starts at zero.
    pub fn init(
        name: &str,
        site: AdapterSite,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let limit = 1.0 / (d_in as f64).sqrt();
        LoraPair {
            a: Param::new(
                format!("{name}.lora_a"),
                ParamKind::LoraA(site),
                vec![rank, d_in],
                uniform_init(rng, rank * d_in, limit),
                true,
            ),
            b: Param::new(
                format!("{name}.lora_b"),
                ParamKind::LoraB(site),
                vec![d_out, rank],
                vec![S::ZERO; d_out * rank],
                true,
            ),
            rank,
            alpha,
        }
    }

    /// Randomizes both matrices (gradient-probe initialization).
    pub fn randomize(&self, rng: &mut ChaCha8Rng, limit: f64) {
        let _ = self
            .a
            .set_value(uniform_init(rng, self.a.len(), limit));
        let _ = self
            .b
            .set_value(uniform_init(rng, self.b.len(), limit));
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// base + (alpha / r) * B * A, on `tape` when one is given.
    pub fn fuse(&self, base: &Tensor<S>, tape: Option<&Tape<S>>) -> Result<Tensor<S>> {
        let a = leaf_or_tensor(&self.a, tape);
        let b = leaf_or_tensor(&self.b, tape);
        if base.rank() != 2
            || b.shape() != [base.shape()[0], self.rank]
            || a.shape() != [self.rank, base.shape()[1]]
        {
            return Err(Error::Dim {
                op: "lora_fuse",
                lhs: base.shape().to_vec(),
                rhs: vec![b.shape()[0], a.shape()[1]],
            });
        }
        let delta = b.matmul(&a)?.scale(S::from_f64(self.scaling()))?;
        base.add(&delta)
    }
}

/// The parameter leaf when training, a plain view otherwise.
pub fn leaf_or_tensor<S: Scalar>(p: &Param<S>, tape: Option<&Tape<S>>) -> Tensor<S> {
    match tape {
        Some(t) => p.leaf(t),
        None => p.tensor(),
    }
}

/// Frozen FFN matrices shared by all experts of one layer.
pub struct MoeBases<S: Scalar> {
    /// `[d', d]`
    pub gate: Param<S>,
    /// `[d', d]`
    pub up: Param<S>,
    /// `[d, d']`
    pub down: Param<S>,
}

impl<S: Scalar> Clone for MoeBases<S> {
    fn clone(&self) -> Self {
        MoeBases {
            gate: self.gate.clone(),
            up: self.up.clone(),
            down: self.down.clone(),
        }
    }
}

impl<S: Scalar> MoeBases<S> {
    pub fn init(name: &str, dim: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let lim_in = 1.0 / (dim as f64).sqrt();
        let lim_ffn = 1.0 / (ffn_dim as f64).sqrt();
        MoeBases {
            gate: Param::new(
                format!("{name}.gate.base"),
                ParamKind::FrozenBase,
                vec![ffn_dim, dim],
                uniform_init(rng, ffn_dim * dim, lim_in),
                false,
            ),
            up: Param::new(
                format!("{name}.up.base"),
                ParamKind::FrozenBase,
                vec![ffn_dim, dim],
                uniform_init(rng, ffn_dim * dim, lim_in),
                false,
            ),
            down: Param::new(
                format!("{name}.down.base"),
                ParamKind::FrozenBase,
                vec![dim, ffn_dim],
                uniform_init(rng, dim * ffn_dim, lim_ffn),
                false,
            ),
        }
    }
}

/// One expert: the shared frozen bases plus its three adapter pairs.
pub struct Expert<S: Scalar> {
    pub bases: MoeBases<S>,
    pub gate: LoraPair<S>,
    pub up: LoraPair<S>,
    pub down: LoraPair<S>,
}

impl<S: Scalar> Expert<S> {
    pub fn init(
        name: &str,
        bases: MoeBases<S>,
        dim: usize,
        ffn_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Expert {
            bases,
            gate: LoraPair::init(
                &format!("{name}.gate"),
                AdapterSite::Expert,
                ffn_dim,
                dim,
                rank,
                alpha,
                rng,
            ),
            up: LoraPair::init(
                &format!("{name}.up"),
                AdapterSite::Expert,
                ffn_dim,
                dim,
                rank,
                alpha,
                rng,
            ),
            down: LoraPair::init(
                &format!("{name}.down"),
                AdapterSite::Expert,
                dim,
                ffn_dim,
                rank,
                alpha,
                rng,
            ),
        }
    }

    /// Fused weights, each transposed for right-multiplication by rows of x:
    /// (gate^T `[d, d']`, up^T `[d, d']`, down^T `[d', d]`).
    pub fn fused_transposed(
        &self,
        tape: Option<&Tape<S>>,
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        let g = self
            .gate
            .fuse(&leaf_or_tensor(&self.bases.gate, tape), tape)?
            .transpose2d()?;
        let u = self
            .up
            .fuse(&leaf_or_tensor(&self.bases.up, tape), tape)?
            .transpose2d()?;
        let d = self
            .down
            .fuse(&leaf_or_tensor(&self.bases.down, tape), tape)?
            .transpose2d()?;
        Ok((g, u, d))
    }
}

/// silu(x W~_gate^T) ⊙ (x W~_up^T), projected down. `x` is `[..., d]`.
pub fn expert_forward_fused<S: Scalar>(
    fused_t: &(Tensor<S>, Tensor<S>, Tensor<S>),
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let gate = x.matmul(&fused_t.0)?.silu()?;
    let up = x.matmul(&fused_t.1)?;
    gate.hadamard(&up)?.matmul(&fused_t.2)
}

/// Convenience wrapper: fuse and run one expert on `x`.
pub fn expert_forward<S: Scalar>(
    expert: &Expert<S>,
    x: &Tensor<S>,
    tape: Option<&Tape<S>>,
) -> Result<Tensor<S>> {
    let fused = expert.fused_transposed(tape)?;
    expert_forward_fused(&fused, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_b_fuses_to_base_exactly() {
        let mut r = rng();
        let pair = LoraPair::<f64>::init("t", AdapterSite::Expert, 4, 3, 2, 4.0, &mut r);
        let base =
            Tensor::from_vec(vec![4, 3], (0..12).map(|i| i as f64 * 0.5 - 2.0).collect()).unwrap();
        let fused = pair.fuse(&base, None).unwrap();
        assert!(fused.all_eq(&base));
    }

    #[test]
    fn fuse_hand_case() {
        // base = 0, A = [[1, 0]], B = [[2], [0]], alpha = r  =>  [[2, 0], [0, 0]]
        let mut r = rng();
        let pair = LoraPair::<f64>::init("t", AdapterSite::Expert, 2, 2, 1, 1.0, &mut r);
        pair.a.set_value(vec![1.0, 0.0]).unwrap();
        pair.b.set_value(vec![2.0, 0.0]).unwrap();
        let base = Tensor::zeros(vec![2, 2]);
        let fused = pair.fuse(&base, None).unwrap();
        assert_eq!(fused.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fuse_is_linear_in_b() {
        let mut r = rng();
        let pair = LoraPair::<f64>::init("t", AdapterSite::Expert, 3, 3, 2, 8.0, &mut r);
        pair.b
            .set_value(uniform_init(&mut r, pair.b.len(), 0.3))
            .unwrap();
        let base = Tensor::from_vec(vec![3, 3], uniform_init(&mut r, 9, 1.0)).unwrap();
        let f1 = pair.fuse(&base, None).unwrap();
        let b2: Vec<f64> = pair.b.value().iter().map(|v| v * 2.0).collect();
        pair.b.set_value(b2).unwrap();
        let f2 = pair.fuse(&base, None).unwrap();
        for i in 0..9 {
            let d1 = f1.data()[i] - base.data()[i];
            let d2 = f2.data()[i] - base.data()[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lora_expert_equals_frozen_ffn_exactly() {
        let mut r = rng();
        let bases = MoeBases::<f64>::init("l0.ffn", 6, 9, &mut r);
        let expert = Expert::init("l0.e0", bases.clone(), 6, 9, 2, 4.0, &mut r);
        let x = Tensor::from_vec(vec![2, 6], uniform_init(&mut r, 12, 1.0)).unwrap();
        let adapted = expert_forward(&expert, &x, None).unwrap();

        // Frozen path, written directly from the base matrices.
        let gate_t = bases.gate.tensor().transpose2d().unwrap();
        let up_t = bases.up.tensor().transpose2d().unwrap();
        let down_t = bases.down.tensor().transpose2d().unwrap();
        let frozen = x
            .matmul(&gate_t)
            .unwrap()
            .silu()
            .unwrap()
            .hadamard(&x.matmul(&up_t).unwrap())
            .unwrap()
            .matmul(&down_t)
            .unwrap();
        assert!(adapted.all_eq(&frozen));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = rng();
        let bases = MoeBases::<f64>::init("l0.ffn", 5, 7, &mut r);
        let expert = Expert::init("l0.e0", bases, 5, 7, 2, 4.0, &mut r);
        let x = Tensor::zeros(vec![3, 5]);
        let y = expert_forward(&expert, &x, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dim_toy_matches_silu() {
        let mut r = rng();
        let bases = MoeBases::<f64>::init("t", 1, 1, &mut r);
        bases.gate.set_value(vec![1.0]).unwrap();
        bases.up.set_value(vec![1.0]).unwrap();
        bases.down.set_value(vec![1.0]).unwrap();
        let expert = Expert::init("t.e", bases, 1, 1, 1, 1.0, &mut r);
        let x = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let y = expert_forward(&expert, &x, None).unwrap();
        let silu1 = 1.0f64 / (1.0 + (-1.0f64).exp());
        assert!((y.data()[0] - silu1).abs() < 1e-15);
        assert!((y.data()[0] - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn experts_share_frozen_bases() {
        let mut r = rng();
        let bases = MoeBases::<f64>::init("l0.ffn", 4, 6, &mut r);
        let e0 = Expert::init("l0.e0", bases.clone(), 4, 6, 2, 4.0, &mut r);
        let e1 = Expert::init("l0.e1", bases.clone(), 4, 6, 2, 4.0, &mut r);
        assert!(e0.bases.gate.same(&e1.bases.gate));
        assert!(e0.bases.down.same(&e1.bases.down));
        assert!(!e0.gate.a.same(&e1.gate.a));
    }
}
