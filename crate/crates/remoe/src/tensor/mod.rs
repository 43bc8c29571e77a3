//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: every forward pass records primitive
//! operations onto a fresh [`Tape`], and [`Tensor::backward`] replays it in
//! reverse. Scalars are rank-0 tensors. There is no implicit broadcasting
//! beyond rank-0 operands.

pub(crate) mod kernels;
mod ops;
mod tape;

pub use ops::Activation;
pub use tape::Tape;

/// Builds a leaf node record (used by [`crate::param::Param`]).
pub(crate) fn leaf_op<S: Scalar>(param: Option<crate::param::Param<S>>) -> tape::Op<S> {
    tape::Op::Leaf { param }
}

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::rc::Rc;

/// A dense n-dimensional array, optionally tracked on a differentiation tape.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    /// Node handle on `tape`, present iff this value is tracked.
    node: Option<usize>,
    tape: Option<Tape<S>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    /// Untracked tensor from raw data. `data.len()` must equal the shape product.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node: None,
            tape: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Rc::new(vec![S::ZERO; n]),
            node: None,
            tape: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Rc::new(vec![v; n]),
            node: None,
            tape: None,
        }
    }

    /// Rank-0 tensor.
    pub fn scalar_value(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: Rc::new(vec![v]),
            node: None,
            tape: None,
        }
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Vec<S>, tape: Tape<S>, node: usize) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Rc::new(data),
            node: Some(node),
            tape: Some(tape),
        }
    }

    /// Leaf sharing an existing buffer (used by parameters; zero-copy).
    pub(crate) fn tracked_shared(
        shape: Vec<usize>,
        data: Rc<Vec<S>>,
        tape: Tape<S>,
        node: usize,
    ) -> Self {
        Tensor {
            shape,
            data,
            node: Some(node),
            tape: Some(tape),
        }
    }

    /// Untracked tensor sharing an existing buffer.
    pub(crate) fn shared(shape: Vec<usize>, data: Rc<Vec<S>>) -> Self {
        Tensor {
            shape,
            data,
            node: None,
            tape: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<S>> {
        Rc::clone(&self.data)
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<usize> {
        self.node
    }

    pub(crate) fn tape(&self) -> Option<&Tape<S>> {
        self.tape.as_ref()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn scalar(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "scalar() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
            tape: None,
        }
    }

    /// Cast every element through f64 into another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
            node: None,
            tape: None,
        }
    }

    /// Exact elementwise equality (numeric `==`; treats -0.0 == +0.0).
    pub fn all_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape && self.data.iter().zip(other.data.iter()).all(|(a, b)| a == b)
    }

    /// Largest absolute elementwise difference, as f64.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{:?}(tracked={}, first={:?})",
            self.shape,
            self.node.is_some(),
            self.data.first()
        )
    }
}
