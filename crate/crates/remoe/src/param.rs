//! Named parameters that live across training steps.
//!
//! Tapes are rebuilt every forward pass, so parameters sit outside the tape
//! and register themselves as leaves (`leaf`) when a pass begins. Gradients
//! accumulate into the parameter until `zero_grad`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

/// Which census row a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// LoRA A matrix (attention or expert site).
    LoraA(AdapterSite),
    /// LoRA B matrix (attention or expert site).
    LoraB(AdapterSite),
    Router,
    GruWz,
    GruWr,
    GruWo,
    /// Bias of the candidate linear map; belongs to the W_o layer.
    GruBo,
    GruWg,
    Embedding,
    Head,
    NormGain,
    FrozenBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSite {
    Attention,
    Expert,
}

impl ParamKind {
    pub fn is_gru_linear(self) -> bool {
        matches!(
            self,
            ParamKind::GruWz | ParamKind::GruWr | ParamKind::GruWo | ParamKind::GruWg
        )
    }
}

struct ParamInner<S: Scalar> {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    value: Rc<Vec<S>>,
    grad: Option<Vec<S>>,
    trainable: bool,
}

/// Shared handle to one parameter tensor.
pub struct Param<S: Scalar>(Rc<RefCell<ParamInner<S>>>);

impl<S: Scalar> Clone for Param<S> {
    fn clone(&self) -> Self {
        Param(Rc::clone(&self.0))
    }
}

impl<S: Scalar> Param<S> {
    pub fn new(
        name: impl Into<String>,
        kind: ParamKind,
        shape: Vec<usize>,
        data: Vec<S>,
        trainable: bool,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            kind,
            shape,
            value: Rc::new(data),
            grad: None,
            trainable,
        })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn kind(&self) -> ParamKind {
        self.0.borrow().kind
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    /// Snapshot of the current values.
    pub fn value(&self) -> Vec<S> {
        self.0.borrow().value.as_ref().clone()
    }

    /// Reads the value buffer without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.0.borrow().value)
    }

    /// Replaces the values; shape must be preserved.
    pub fn set_value(&self, data: Vec<S>) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if data.len() != inner.value.len() {
            return Err(Error::Contract(format!(
                "set_value on {}: {} elements vs {}",
                inner.name,
                data.len(),
                inner.value.len()
            )));
        }
        inner.value = Rc::new(data);
        Ok(())
    }

    /// Mutates values in place (optimizer update path).
    pub fn update_value(&self, f: impl FnOnce(&mut [S])) {
        let mut inner = self.0.borrow_mut();
        // Old tapes may still hold the previous buffer; make_mut clones then.
        let buf: &mut Vec<S> = Rc::make_mut(&mut inner.value);
        f(buf.as_mut_slice());
    }

    /// Registers this parameter as a leaf on `tape`. Frozen parameters join
    /// untracked so no gradient work is ever spent on them.
    pub fn leaf(&self, tape: &Tape<S>) -> Tensor<S> {
        let inner = self.0.borrow();
        if inner.trainable {
            let node = tape.push(crate::tensor::leaf_op(Some(self.clone())));
            Tensor::tracked_shared(inner.shape.clone(), Rc::clone(&inner.value), tape.clone(), node)
        } else {
            Tensor::shared(inner.shape.clone(), Rc::clone(&inner.value))
        }
    }

    /// Untracked view (evaluation paths).
    pub fn tensor(&self) -> Tensor<S> {
        let inner = self.0.borrow();
        Tensor::shared(inner.shape.clone(), Rc::clone(&inner.value))
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        let mut inner = self.0.borrow_mut();
        let buf = match inner.grad.as_mut() {
            Some(b) => b,
            None => {
                let n = g.len();
                inner.grad = Some(vec![S::ZERO; n]);
                inner.grad.as_mut().unwrap()
            }
        };
        for (b, &gv) in buf.iter_mut().zip(g) {
            *b += gv;
        }
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Identity comparison: true when both handles refer to one parameter.
    pub fn same(&self, other: &Param<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl<S: Scalar> std::fmt::Debug for Param<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Param({}, {:?}, {:?}, trainable={})",
            inner.name, inner.kind, inner.shape, inner.trainable
        )
    }
}
