//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of a forward computation as a node
//! holding its value and a one-shot backward closure. [`Tape::backward`]
//! walks the nodes in reverse, accumulating gradients for every node that
//! (transitively) depends on a parameter. The engine is single-threaded and
//! fully deterministic: identical inputs yield bit-identical values and
//! gradients across runs.
//!
//! Training runs the tape at `f32`; finite-difference oracles instantiate it
//! at `f64`.

use ndarray::{ArrayD, NdFloat};

pub mod conv;
pub mod linalg;
pub mod ops;

pub use conv::Pad;

/// Floating-point element type of tensors: `f32` or `f64`.
pub trait Scalar: NdFloat + num_traits::FromPrimitive + std::iter::Sum {
    fn from_float(v: f64) -> Self;
    fn to_float(self) -> f64;
}

impl Scalar for f32 {
    fn from_float(v: f64) -> f32 {
        v as f32
    }
    fn to_float(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_float(v: f64) -> f64 {
        v
    }
    fn to_float(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward closure: (grad_out, parent_values, own_value) -> parent grads.
type BackwardFn<S> = Box<dyn FnOnce(&ArrayD<S>, &[&ArrayD<S>], &ArrayD<S>) -> Vec<ArrayD<S>>>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    needs_grad: bool,
}

/// Gradient tape: a linear record of one forward computation.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record a leaf that does not require gradients (inputs, fixed windows).
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// Record a leaf that requires gradients (learnable parameters).
    pub fn param(&mut self, value: ArrayD<S>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: ArrayD<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an interior node. The backward closure must return one gradient
    /// per parent, in the same order as `parents`.
    pub(crate) fn push(
        &mut self,
        value: ArrayD<S>,
        parents: Vec<Var>,
        backward: BackwardFn<S>,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let parents: Vec<usize> = parents.into_iter().map(|v| v.0).collect();
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Consumes the recorded backward
    /// closures, so it can be called once per tape.
    ///
    /// Panics if `root` is not a single-element tensor.
    pub fn backward(&mut self, root: Var) -> Gradients<S> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (backward, parents) = {
                let node = &mut self.nodes[i];
                (node.backward.take(), node.parents.clone())
            };
            let Some(backward) = backward else { continue };
            let gout = grads[i].as_ref().unwrap();
            let parent_values: Vec<&ArrayD<S>> =
                parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(gout, &parent_values, &self.nodes[i].value);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (&pid, pg) in parents.iter().zip(parent_grads) {
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients are no longer needed once propagated.
            if !self.nodes[i].parents.is_empty() {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `v`, if `v` required gradients
    /// and was reached by the reverse pass.
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Remove and return the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
