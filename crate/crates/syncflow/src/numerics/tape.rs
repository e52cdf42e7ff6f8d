//! The gradient tape, generic over the scalar type.
//!
//! A [`Tape`] owns every intermediate tensor of one forward computation.
//! Primitives append nodes; each node carries a flag saying whether anything
//! upstream requires gradients, and a backward closure that routes the
//! node's output gradient to its parents. [`Tape::backward`] walks the nodes
//! newest-to-oldest, which is a valid reverse topological order because
//! parents always precede children.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::GTensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradient router: receives all node values, the gradient flowing into this
/// node, and the mutable per-node gradient accumulators.
pub(crate) type BackFn<T> = Box<dyn Fn(&[GTensor<T>], &GTensor<T>, &mut [Option<GTensor<T>>])>;

struct NodeMeta<T> {
    requires_grad: bool,
    back: Option<BackFn<T>>,
    /// f64 view of scalar reductions, carried so test oracles can read
    /// sums at higher precision than the stored value.
    shadow: Option<f64>,
}

pub struct Tape<T = f32> {
    values: Vec<GTensor<T>>,
    meta: Vec<NodeMeta<T>>,
}

impl<T> Default for Tape<T> {
    fn default() -> Tape<T> {
        Tape {
            values: Vec::new(),
            meta: Vec::new(),
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<GTensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&GTensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<GTensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Record a leaf. Whether gradients flow to it is taken from
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: GTensor<T>) -> Var {
        let rq = t.requires_grad;
        self.push(t, rq, None)
    }

    /// Record a constant leaf that never receives gradients.
    pub fn constant(&mut self, t: GTensor<T>) -> Var {
        self.push(t, false, None)
    }

    pub(crate) fn push(
        &mut self,
        value: GTensor<T>,
        requires_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Var {
        self.values.push(value);
        self.meta.push(NodeMeta {
            requires_grad,
            back,
            shadow: None,
        });
        Var(self.values.len() - 1)
    }

    pub(crate) fn set_shadow(&mut self, v: Var, shadow: f64) {
        self.meta[v.0].shadow = Some(shadow);
    }

    /// Higher-precision view of a scalar node when one was recorded.
    pub fn shadow(&self, v: Var) -> Option<f64> {
        self.meta[v.0].shadow
    }

    pub fn value(&self, v: Var) -> &GTensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.meta[v.0].requires_grad
    }

    /// Reverse pass from a scalar root. Seeds the root with gradient 1 and
    /// replays the tape backward; returns one gradient per contributing node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::config(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        if !self.meta[root.0].requires_grad {
            return Err(Error::config(
                "backward root does not depend on any tracked leaf".to_string(),
            ));
        }
        let mut grads: Vec<Option<GTensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(GTensor::full(root_val.shape(), T::ONE));

        for i in (0..=root.0).rev() {
            if !self.meta[i].requires_grad {
                continue;
            }
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            if let Some(back) = &self.meta[i].back {
                back(&self.values, &grad_out, &mut grads);
            }
            grads[i] = Some(grad_out);
        }
        Ok(Gradients { grads })
    }
}

/// Accumulate `delta` into `slot`, allocating on first touch.
pub(crate) fn accumulate<T: Scalar>(slot: &mut Option<GTensor<T>>, shape: &[usize], delta: &[T]) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += *b;
            }
        }
        None => {
            let mut t = GTensor::zeros(shape);
            t.data_mut().copy_from_slice(delta);
            *slot = Some(t);
        }
    }
}
