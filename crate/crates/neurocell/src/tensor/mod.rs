//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors. A [`Tape`] records one forward pass; [`Tape::backward`]
//! replays it in reverse, accumulating gradients additively into every
//! reachable tensor that requires them.

mod gradcheck;
mod ops;
mod optim;

pub use gradcheck::{finite_difference_grad, max_rel_error};
pub use ops::*;
pub use optim::Sgd;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
}

/// Dense n-dimensional array with an optional gradient buffer.
/// Cheap to clone; clones share storage.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); n]).expect("consistent")
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n]).expect("consistent")
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(&[1], vec![v]).expect("consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(self, flag: bool) -> Self {
        self.inner.requires_grad.set(flag);
        self
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![T::one(); self.len()]);
    }

    /// Pointer identity of the shared storage; used to key optimizer state.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

type BackwardStep = Box<dyn Fn()>;

/// Ordered record of one forward pass. Single-writer: one forward/backward
/// at a time per tape.
pub struct Tape<T: Scalar> {
    steps: RefCell<Vec<BackwardStep>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { steps: RefCell::new(Vec::new()), _marker: std::marker::PhantomData }
    }

    pub fn len(&self) -> usize {
        self.steps.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(&self, step: impl Fn() + 'static) {
        self.steps.borrow_mut().push(Box::new(step));
    }

    /// Seeds `loss` with gradient 1 and visits every recorded step exactly
    /// once in reverse order. The tape is consumed (cleared).
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.seed_grad_ones();
        let steps = std::mem::take(&mut *self.steps.borrow_mut());
        for step in steps.iter().rev() {
            step();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap().requires_grad(true);
        let loss = sum(&tape, &x);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let tape = Tape::new();
        let x = Tensor::scalar(2.0f64).requires_grad(true);
        let y = add(&tape, &x, &x).unwrap();
        let loss = sum(&tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }
}
