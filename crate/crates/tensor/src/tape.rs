//! Reverse-mode gradient tape.
//!
//! Every differentiable op pushes a node holding a backward closure onto the tape. A
//! [`Var`] owns its value through an `Rc`, so values of an inference tape are freed as soon as
//! the caller drops them; only a recording tape keeps what the backward closures capture.

use std::cell::RefCell;
use std::rc::Rc;

use crate::real::Real;
use crate::tensor::Tensor;

/// Maps the upstream gradient to one gradient per parent. The mask says which parents
/// actually need a gradient; entries for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that records ops for a later [`Tape::backward`].
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that never records; every `Var` it produces is a constant.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        if !self.recording {
            return self.constant(value);
        }
        let id = self.push(Node { parents: Vec::new(), backward: None });
        Var { tape: self, id: Some(id), value: Rc::new(value) }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, id: None, value: Rc::new(value) }
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records a custom op. `backward` receives the upstream gradient (shaped like `value`)
    /// and must return one gradient per parent, in order.
    pub fn op<'t, F>(&'t self, value: Tensor<T>, parents: &[&Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        for p in parents {
            assert!(std::ptr::eq(p.tape, self), "op mixes vars from different tapes");
        }
        if !self.recording || parents.iter().all(|p| p.id.is_none()) {
            return self.constant(value);
        }
        let id = self.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var { tape: self, id: Some(id), value: Rc::new(value) }
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: &Var<'_, T>) -> Gradients<T> {
        assert_eq!(root.value.numel(), 1, "backward root must be a scalar, got {:?}", root.value.shape());
        let seed = Tensor::full(root.value.shape(), T::one());
        self.backward_with(root, seed)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` (shaped like `root`).
    ///
    /// Consumes the recorded closures: a tape supports a single backward pass.
    pub fn backward_with(&self, root: &Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), root.value.shape(), "seed shape must match root");
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Gradients { grads };
        };
        grads[root_id] = Some(seed);
        for i in (0..=root_id).rev() {
            let Some(backward) = nodes[i].backward.take() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents = &nodes[i].parents;
            let needs: Vec<bool> = parents.iter().map(|p| p.is_some()).collect();
            let pgrads = backward(&g, &needs);
            debug_assert_eq!(pgrads.len(), parents.len());
            for (pid, pg) in parents.iter().zip(pgrads) {
                if let (Some(pid), Some(pg)) = (pid, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of leaves after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var<'_, T>) -> Option<Tensor<T>> {
        v.id.and_then(|id| self.grads.get_mut(id)).and_then(|g| g.take())
    }
}

/// A value on a tape.
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: Option<usize>,
    pub(crate) value: Rc<Tensor<T>>,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        Var { tape: self.tape, id: self.id, value: Rc::clone(&self.value) }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var { tape: self.tape, id: None, value: Rc::clone(&self.value) }
    }
}
