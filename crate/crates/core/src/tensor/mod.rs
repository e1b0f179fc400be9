//! Row-major contiguous tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once created; the optimizer and checkpoint loader are
//! the only writers (via [`Tensor::copy_from_slice`]). Every operation that
//! sees a gradient-tracked input records a backward rule on the resulting
//! tensor, forming the tape that [`Tensor::backward`] traverses.

mod autograd;
mod conv;
mod gradcheck;
pub(crate) mod norm;
pub(crate) mod ops;
mod rng;

pub use autograd::{no_grad, Tape};
pub use gradcheck::grad_check;
pub use rng::{RngState, RngStream};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use thiserror::Error;

use autograd::BackwardRule;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} is out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value (checked mode)")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is not connected to any gradient-tracked tensor")]
    DetachedGraph,
}

pub type Result<T> = std::result::Result<T, TensorError>;

static CHECKED_MODE: AtomicBool = AtomicBool::new(false);

/// In checked mode every op scans its output and turns NaN/Inf into an error;
/// otherwise non-finite values propagate.
pub fn set_checked_mode(on: bool) {
    CHECKED_MODE.store(on, Ordering::Relaxed);
}

pub fn checked_mode() -> bool {
    CHECKED_MODE.load(Ordering::Relaxed)
}

/// Scalar type a [`Tensor`] can hold: `f32` for training, `f64` for gradient
/// checks. The type parameter is the library's precision switch.
pub trait Element:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn neg_infinity() -> Self;
    fn erf(self) -> Self;

    /// C = alpha * A(m,k) * B(k,n) + beta * C with explicit strides.
    ///
    /// # Safety
    /// Pointers must be valid for the strided extents, as in
    /// `matrixmultiply::sgemm`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    #[inline]
    fn zero() -> Self {
        0.0
    }
    #[inline]
    fn one() -> Self {
        1.0
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline]
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    #[inline]
    fn zero() -> Self {
        0.0
    }
    #[inline]
    fn one() -> Self {
        1.0
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline]
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    rule: Option<BackwardRule<T>>,
}

/// An n-dimensional array of `T` with optional gradient tracking.
///
/// Cloning is cheap (reference-counted); the underlying buffer is shared.
pub struct Tensor<T: Element> {
    inner: Rc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "from_vec",
                msg: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(Self::leaf(shape, data))
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                rule: None,
            }),
        }
    }

    pub(crate) fn from_rule(shape: Vec<usize>, data: Vec<T>, rule: Option<BackwardRule<T>>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                rule,
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::leaf(shape, vec![T::zero(); n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::leaf(shape, vec![T::one(); n])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::leaf(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![], vec![value])
    }

    /// Marks this tensor as a gradient leaf and returns it.
    pub fn with_grad(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// True when a backward pass can reach this tensor.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.rule.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrites the buffer in place (optimizer updates, checkpoint restore).
    pub fn copy_from_slice(&self, src: &[T]) {
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(data.len(), src.len(), "copy_from_slice: length mismatch");
        data.copy_from_slice(src);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A fresh leaf holding a copy of this tensor's values, detached from the
    /// autograd graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::leaf(self.inner.shape.clone(), self.to_vec())
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn rule(&self) -> Option<&BackwardRule<T>> {
        self.inner.rule.as_ref()
    }

    /// Adds `g` into the gradient buffer (the backward pass uses this; tests
    /// and optimizers may inject gradients directly).
    pub fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Runs reverse-mode differentiation from this scalar, populating `grad`
    /// on every reachable tensor marked `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.tracked() {
            return Err(TensorError::DetachedGraph);
        }
        Tape::trace(self).backprop(self)
    }

    /// Converts element type; the result is a detached leaf.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor::leaf(self.inner.shape.clone(), data)
    }
}
