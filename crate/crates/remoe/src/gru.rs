//! The low-rank GRU that aggregates expert outputs between rounds.
//!
//! Hidden width d_bar is much smaller than the model width; a `[d, d_bar]`
//! output projection maps the hidden state back into the residual stream.

use crate::config::CandidateActivation;
use crate::error::Result;
use crate::lora::{leaf_or_tensor, uniform_init};
use crate::param::{Param, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use rand_chacha::ChaCha8Rng;

/// The four trainable linear maps (plus the candidate bias) of one layer's GRU.
pub struct GruParams<S: Scalar> {
    /// Update gate, `[d_bar, d_bar + d]`.
    pub w_z: Param<S>,
    /// Reset gate, `[d_bar, d_bar + d]`.
    pub w_r: Param<S>,
    /// Candidate map, `[d_bar, d_bar + d]`.
    pub w_o: Param<S>,
    /// Candidate bias, `[d_bar]`.
    pub b_o: Param<S>,
    /// Output projection, `[d, d_bar]`. Starts at zero so a fresh model's
    /// rounds see an unchanged input.
    pub w_g: Param<S>,
    pub hidden: usize,
    pub dim: usize,
}

impl<S: Scalar> GruParams<S> {
    pub fn init(name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let cat = hidden + dim;
        let lim = 1.0 / (cat as f64).sqrt();
        let gate = |suffix: &str, kind, rng: &mut ChaCha8Rng| {
            Param::new(
                format!("{name}.{suffix}"),
                kind,
                vec![hidden, cat],
                uniform_init(rng, hidden * cat, lim),
                true,
            )
        };
        GruParams {
            w_z: gate("w_z", ParamKind::GruWz, rng),
            w_r: gate("w_r", ParamKind::GruWr, rng),
            w_o: gate("w_o", ParamKind::GruWo, rng),
            b_o: Param::new(
                format!("{name}.b_o"),
                ParamKind::GruBo,
                vec![hidden],
                vec![S::ZERO; hidden],
                true,
            ),
            w_g: Param::new(
                format!("{name}.w_g"),
                ParamKind::GruWg,
                vec![dim, hidden],
                vec![S::ZERO; dim * hidden],
                true,
            ),
            hidden,
            dim,
        }
    }

    /// One recurrence step over the round axis.
    ///
    /// `h_prev` is `[..., d_bar]`, `y` the round's expert mixture `[..., d]`.
    /// Returns the new hidden state and the `[..., d]` output projection.
    pub fn step(
        &self,
        h_prev: &Tensor<S>,
        y: &Tensor<S>,
        candidate: CandidateActivation,
        tape: Option<&Tape<S>>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let w_z = leaf_or_tensor(&self.w_z, tape).transpose2d()?;
        let w_r = leaf_or_tensor(&self.w_r, tape).transpose2d()?;
        let w_o = leaf_or_tensor(&self.w_o, tape).transpose2d()?;
        let b_o = leaf_or_tensor(&self.b_o, tape);
        let w_g = leaf_or_tensor(&self.w_g, tape).transpose2d()?;

        let hy = Tensor::concat_last(h_prev, y)?;
        let z = hy.matmul(&w_z)?.sigmoid()?;
        let r = hy.matmul(&w_r)?.sigmoid()?;
        let gated = Tensor::concat_last(&r.hadamard(h_prev)?, y)?;
        let pre = gated.matmul(&w_o)?.add_bias(&b_o)?;
        let cand = match candidate {
            CandidateActivation::Tanh => pre.tanh()?,
            CandidateActivation::Sigmoid => pre.sigmoid()?,
        };
        let ones = Tensor::full(z.shape().to_vec(), S::ONE);
        let h_new = ones
            .sub(&z)?
            .hadamard(h_prev)?
            .add(&z.hadamard(&cand)?)?;
        let g_out = h_new.matmul(&w_g)?;
        Ok((h_new, g_out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn zeroed(g: &GruParams<f64>) {
        for p in [&g.w_z, &g.w_r, &g.w_o, &g.w_g] {
            p.set_value(vec![0.0; p.len()]).unwrap();
        }
        g.b_o.set_value(vec![0.0; g.b_o.len()]).unwrap();
    }

    #[test]
    fn all_zero_params_give_zero_state_and_output() {
        let mut r = rng();
        let g = GruParams::<f64>::init("g", 4, 2, &mut r);
        zeroed(&g);
        let h0 = Tensor::zeros(vec![1, 3, 2]);
        let y = Tensor::from_vec(vec![1, 3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (h1, out) = g.step(&h0, &y, CandidateActivation::Tanh, None).unwrap();
        // z = r = sigmoid(0) = 0.5, candidate = tanh(0) = 0, so h stays zero.
        assert!(h1.data().iter().all(|&v| v == 0.0));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_hidden_makes_candidate_depend_only_on_y() {
        let mut r = rng();
        let g = GruParams::<f64>::init("g", 4, 2, &mut r);
        let h0 = Tensor::zeros(vec![1, 2, 2]);
        let y = Tensor::from_vec(vec![1, 2, 4], uniform_init(&mut r, 8, 1.0)).unwrap();
        let (h1, _) = g.step(&h0, &y, CandidateActivation::Tanh, None).unwrap();
        // Changing the reset weights cannot matter when h_prev = 0.
        g.w_r
            .set_value(uniform_init(&mut r, g.w_r.len(), 5.0))
            .unwrap();
        let (h2, _) = g.step(&h0, &y, CandidateActivation::Tanh, None).unwrap();
        assert!(h1.all_eq(&h2));
    }

    #[test]
    fn one_dim_toy_matches_direct_evaluation() {
        // d = d_bar = 1, unit weights, zero bias, h0 = 0, y = 1:
        // z = sigmoid(1), candidate = tanh(1), h = z * tanh(1), g = h.
        let mut r = rng();
        let g = GruParams::<f64>::init("g", 1, 1, &mut r);
        for p in [&g.w_z, &g.w_r, &g.w_o] {
            p.set_value(vec![1.0, 1.0]).unwrap();
        }
        g.b_o.set_value(vec![0.0]).unwrap();
        g.w_g.set_value(vec![1.0]).unwrap();
        let h0 = Tensor::zeros(vec![1, 1, 1]);
        let y = Tensor::from_vec(vec![1, 1, 1], vec![1.0]).unwrap();
        let (h1, out) = g.step(&h0, &y, CandidateActivation::Tanh, None).unwrap();
        let sig1 = 1.0f64 / (1.0 + (-1.0f64).exp());
        let expect = sig1 * 1.0f64.tanh();
        assert!((h1.data()[0] - expect).abs() < 1e-15);
        assert!((out.data()[0] - expect).abs() < 1e-15);
        assert!((expect - 0.5567).abs() < 1e-4);
    }
}
