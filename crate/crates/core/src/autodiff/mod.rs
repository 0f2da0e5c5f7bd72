//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation executed on [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar result replays the record in reverse and
//! returns the gradient of every leaf that was registered with
//! [`Tape::leaf`]. The tape is consumed by `backward`; recording a new forward
//! pass requires a new tape.

mod conv;
mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{grad_check, grad_check_inputs, GradCheckOptions};
pub use ops::concat;

pub type NodeId = usize;

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradBuffer<T>)>;

struct Node<T> {
    shape: Vec<usize>,
    value: Rc<[T]>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    backward_fault: Option<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            backward_fault: None,
        }
    }

    /// A tape whose backward rules are deliberately wrong: every upstream
    /// gradient is multiplied by `factor` before being propagated. Used as a
    /// negative control for gradient checking.
    pub fn with_corrupted_backward(factor: T) -> Self {
        Self {
            backward_fault: Some(factor),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.insert(tensor.shape().to_vec(), tensor.data().into(), true, true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.insert(tensor.shape().to_vec(), tensor.data().into(), false, true)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var<'_, T>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    fn insert(
        &self,
        shape: Vec<usize>,
        value: Rc<[T]>,
        requires_grad: bool,
        is_leaf: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        if self.consumed.get() {
            // a fresh forward pass on a consumed tape starts a new record
            nodes.clear();
            self.consumed.set(false);
        }
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            is_leaf,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends the result of an operation. `backward` receives the upstream
    /// gradient of the output and pushes contributions into its parents'
    /// slots.
    pub(crate) fn push(
        &self,
        op: &'static str,
        parents: &[Var<'_, T>],
        shape: Vec<usize>,
        value: Vec<T>,
        backward: impl Fn(&[T], &mut GradBuffer<T>) + 'static,
    ) -> Result<Var<'_, T>> {
        if self.consumed.get() {
            return Err(Error::Tape(format!(
                "{op}: operands belong to a tape that was already consumed by backward"
            )));
        }
        for p in parents {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::Tape(format!(
                    "{op}: operands come from different tapes"
                )));
            }
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let var = self.insert(shape, value.into(), requires_grad, false);
        if requires_grad {
            self.nodes.borrow_mut()[var.id].backward = Some(Box::new(backward));
        }
        Ok(var)
    }

    fn value(&self, id: NodeId) -> Rc<[T]> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`. Returns the gradient of every
    /// leaf registered with [`Tape::leaf`] and clears the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::Tape(
                "backward called twice without a new forward pass".to_string(),
            ));
        }
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Tape("loss belongs to a different tape".to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }

        let mut buffer = GradBuffer {
            grads: vec![None; nodes.len()],
            lens: nodes.iter().map(|n| n.value.len()).collect(),
            needed: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        let mut leaf_grads = vec![None; nodes.len()];
        if let Some(slot) = buffer.slot(loss.id) {
            slot[0] = T::one();
        }
        for id in (0..=loss.id).rev() {
            let Some(mut grad) = buffer.grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                if let Some(f) = self.backward_fault {
                    grad.iter_mut().for_each(|g| *g = *g * f);
                }
                rule(&grad, &mut buffer);
            }
            if node.is_leaf {
                leaf_grads[id] = Some(grad);
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        nodes.clear();
        self.consumed.set(true);
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }
}

/// Gradient slots indexed by node, allocated on first use.
pub struct GradBuffer<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
    needed: Vec<bool>,
}

impl<T: Scalar> GradBuffer<T> {
    /// Mutable gradient slot of `id`, or `None` when that node does not need
    /// a gradient.
    pub fn slot(&mut self, id: NodeId) -> Option<&mut [T]> {
        if !self.needed[id] {
            return None;
        }
        let len = self.lens[id];
        Some(
            self.grads[id]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice(),
        )
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.get(var)?;
        Tensor::new(self.shapes[var.id].clone(), g.to_vec()).ok()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(self.id)
    }

    pub fn value(&self) -> Rc<[T]> {
        self.tape.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn numel(&self) -> usize {
        self.value().len()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(self.shape(), self.value().to_vec()).expect("recorded shape is consistent")
    }

    /// Value of a single-element result.
    pub fn item(&self) -> T {
        self.value()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(vec![2, 3], |i| i as f64));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_two_x() {
        let tape = Tape::<f64>::new();
        let t = Tensor::from_fn(vec![4], |i| i as f64 - 1.5);
        let x = tape.leaf(&t);
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let expect: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let loss = x.mul(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(vec![3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn tape_is_cleared_after_backward() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::scalar(1.0));
        let y = x.scale(3.0).unwrap();
        assert_eq!(tape.len(), 2);
        tape.backward(y).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let c = tape.constant(&Tensor::scalar(5.0));
        let y = x.mul(c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let unused = tape.leaf(&Tensor::zeros(vec![2]));
        let g = tape.backward(x.scale(2.0).unwrap()).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // f = sum(x*x) + sum(3x): df/dx = 2x + 3
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let a = x.mul(x).unwrap().sum().unwrap();
        let b = x.scale(3.0).unwrap().sum().unwrap();
        let g = tape.backward(a.add(b).unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0, -1.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::scalar(f32::MAX));
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite { .. })));
    }
}
