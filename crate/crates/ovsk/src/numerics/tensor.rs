use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::scalar::Scalar;

// Node ids are global so that creation order doubles as topological order
// even when several graphs live on different threads.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T])>; // (output grad, output data)

pub(crate) struct OpRecord<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    pub(crate) op: Option<OpRecord<T>>,
}

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A `Tensor` is a cheap handle (`Rc`) onto its storage. Operations record
/// themselves onto the implicit tape whenever an operand requires gradients;
/// [`super::backward`] replays those records in reverse creation order. All
/// values are checked finite at every operation boundary — NaN/Inf is an
/// error, never a silent state.
///
/// Handles are deliberately `!Send`: a graph and its tensors stay on the
/// thread that built them. Independent graphs on different threads are fine.
pub struct Tensor<T: Scalar> {
    pub(crate) inner: Rc<Inner<T>>,
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
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn check_shape<T: Scalar>(op: &'static str, shape: &[usize], data: &[T]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape {
            op,
            detail: format!("extents must be positive, got {shape:?}"),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Shape {
            op,
            detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<OpRecord<T>>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape("from_vec", &shape, &data)?;
        check_finite("from_vec", &data)?;
        Ok(Self::new_inner(shape, data, false, None))
    }

    /// Trainable leaf: gradients accumulate here during `backward`.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape("param", &shape, &data)?;
        check_finite("param", &data)?;
        Ok(Self::new_inner(shape, data, true, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape, vec![T::zero(); n], false, None)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape, vec![value; n], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_inner(vec![1], vec![value], false, None)
    }

    /// Internal constructor for op results. Records the backward closure only
    /// when some parent tracks gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        check_shape(op, &shape, &data)?;
        check_finite(op, &data)?;
        let track = parents.iter().any(|p| p.requires_grad());
        if track {
            Ok(Self::new_inner(shape, data, true, Some(OpRecord { parents, backward })))
        } else {
            Ok(Self::new_inner(shape, data, false, None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of this tensor detached from the tape: same values, no history,
    /// no gradient tracking.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// In-place value update (optimizer steps). The tensor keeps its identity
    /// so existing handles observe the new values.
    pub fn set_data(&self, new: &[T]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                detail: format!("expected {} elements, got {}", self.numel(), new.len()),
            });
        }
        check_finite("set_data", new)?;
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Accumulate a gradient contribution. No-op on tensors that do not
    /// require gradients, which is what keeps frozen weights frozen.
    pub(crate) fn accum_grad(&self, delta: &[T]) {
        if !self.inner.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, d) in buf.iter_mut().zip(delta) {
                    *g += *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn seed_grad(&self, value: T) {
        *self.inner.grad.borrow_mut() = Some(vec![value; self.numel()]);
    }

    pub(crate) fn take_grad_for_backward(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }
}
