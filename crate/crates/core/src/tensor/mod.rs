//! Minimal reverse-mode autodiff over `ndarray`, generic in `f32`/`f64`.
//!
//! The engine is a flat tape: every op pushes one node holding the forward
//! value plus an optional backward closure. Closures capture `Arc` clones of
//! whatever forward values they need, so the backward pass never re-borrows
//! the tape. Nodes whose inputs all have `requires_grad == false` skip the
//! closure entirely, which makes eval-mode forward passes plain inference.
//!
//! Everything is single-threaded and allocation-order deterministic: the same
//! inputs produce bit-identical outputs and gradients across runs.

pub mod conv;
pub mod ops;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::Float;
use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;
use std::sync::Arc;

/// Element type the engine is generic over. Training uses `f32`; gradient
/// checks and oracles use `f64`.
pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + AddAssign
    + Send
    + Sync
    + Debug
    + Display
    + Sum
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Backward closure: given the gradient flowing into this node, produce
/// `(parent_id, contribution)` pairs. Only parents that require grad are
/// reported.
pub type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>) -> Vec<(usize, ArrayD<S>)>>;

struct Node<S: Scalar> {
    value: Arc<ArrayD<S>>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Gradient store produced by [`Tape::backward`].
pub struct Grads<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value that gradients never flow into.
    pub fn constant(&self, value: ArrayD<S>) -> Var {
        self.push_node(Arc::new(value), false, None)
    }

    pub fn constant_arc(&self, value: Arc<ArrayD<S>>) -> Var {
        self.push_node(value, false, None)
    }

    /// Differentiable leaf (a parameter or a gradient-checked input).
    pub fn leaf(&self, value: Arc<ArrayD<S>>) -> Var {
        self.push_node(value, true, None)
    }

    /// Register an op result. `requires_grad` should be true iff any parent
    /// requires grad; pass `backward` only in that case.
    pub fn push(
        &self,
        value: ArrayD<S>,
        requires_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Var {
        debug_assert!(backward.is_none() || requires_grad);
        self.push_node(Arc::new(value), requires_grad, backward)
    }

    fn push_node(
        &self,
        value: Arc<ArrayD<S>>,
        requires_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, backward });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<ArrayD<S>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> S {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        debug_assert_eq!(val.ndim(), 0, "scalar() on non-0d node");
        val[IxDyn(&[])]
    }

    /// Reverse pass from `root` (must be 0-d). Gradients of intermediate
    /// nodes are dropped as soon as they have been propagated; leaf
    /// gradients survive in the returned store.
    pub fn backward(&self, root: Var) -> Grads<S> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<S>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        debug_assert_eq!(nodes[root.0].value.ndim(), 0, "backward() root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), S::one()));

        for id in (0..=root.0).rev() {
            if nodes[id].backward.is_none() {
                continue; // leaf or constant: keep accumulated grad
            }
            let Some(grad_out) = grads[id].take() else { continue };
            let back = nodes[id].backward.as_ref().unwrap();
            for (pid, contrib) in back(&grad_out) {
                debug_assert!(pid < id, "tape order violated");
                debug_assert!(nodes[pid].requires_grad);
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr0;

    #[test]
    fn backward_chain_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Arc::new(arr0(3.0).into_dyn()));
        // y = x * x via two references to the same parent
        let xv = tape.value(x);
        let y_val = (&*xv * &*xv).into_dyn();
        let xv2 = Arc::clone(&xv);
        let y = tape.push(
            y_val,
            true,
            Some(Box::new(move |g| {
                let gx = &*xv2 * g;
                vec![(x.0, (&gx * 2.0).into_dyn())]
            })),
        );
        let grads = tape.backward(y);
        assert_eq!(grads.get(x).unwrap()[ndarray::IxDyn(&[])], 6.0);
    }

    #[test]
    fn constants_do_not_collect_grads() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(arr0(1.0f32).into_dyn());
        assert!(!tape.requires_grad(c));
    }
}
