//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major array. Operations live in [`ops`]
//! and record themselves on a [`Tape`]; calling [`Tape::backward`] on a
//! scalar loss fills the `grad` slot of every reachable leaf that was
//! created with `requires_grad`. [`gradcheck`] provides the
//! finite-difference oracle the test suites check every operation against.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
mod tape;

pub use tape::Tape;

/// Row-major dense array of f64 values.
///
/// Cloning is cheap (reference-counted). The value buffer is immutable after
/// creation; only the gradient slot of a leaf is written, by
/// [`Tape::backward`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// (tape uid, node index) of the op that produced this tensor, if any.
    node: Cell<Option<(u64, u32)>>,
}

impl Tensor {
    /// Build a tensor from row-major data. Fails unless
    /// `shape.iter().product() == data.len()`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                shape,
                format!("shape wants {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: like [`Tensor::new`] but with `requires_grad` set.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.requires_grad_(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], vec![], false)
    }

    pub(crate) fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: Rc::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    /// Same data buffer, new shape (metadata only). Internal; callers go
    /// through `ops::reshape` so the tape sees the edge.
    pub(crate) fn view(&self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: Rc::clone(&self.inner.data),
                requires_grad: false,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    fn requires_grad_(self, flag: bool) -> Self {
        // Only valid on freshly created leaves (single owner).
        let mut inner = Rc::try_unwrap(self.inner).unwrap_or_else(|rc| Inner {
            shape: rc.shape.clone(),
            data: Rc::clone(&rc.data),
            requires_grad: rc.requires_grad,
            grad: RefCell::new(rc.grad.borrow().clone()),
            node: Cell::new(None),
        });
        inner.requires_grad = flag;
        Tensor {
            inner: Rc::new(inner),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a 0-d or 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of {} values", self.len());
        self.inner.data[0]
    }

    /// Element at a full multi-index (test helper; row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        self.inner.data[off]
    }

    /// Accumulated gradient of a leaf, as a tensor of the same shape.
    pub fn grad(&self) -> Option<Tensor> {
        self.inner
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::leaf(g.clone(), self.inner.shape.clone(), false))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Leaf copy sharing this tensor's data but cut off from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                requires_grad: false,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    pub(crate) fn node(&self) -> Option<(u64, u32)> {
        self.inner.node.get()
    }

    pub(crate) fn set_node(&self, tape_uid: u64, idx: u32) {
        self.inner.node.set(Some((tape_uid, idx)));
    }

    pub(crate) fn accumulate_leaf_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.len());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{:?}[grad={}]",
            self.inner.shape, self.inner.requires_grad
        )?;
        if self.len() <= 16 {
            write!(f, " {:?}", &self.inner.data[..])?;
        }
        Ok(())
    }
}

/// Debug-mode guard: forward ops on finite inputs must produce finite data.
#[inline]
pub(crate) fn debug_check_finite(op: &'static str, data: &[f64]) {
    if cfg!(debug_assertions) {
        for &v in data {
            debug_assert!(v.is_finite(), "{op}: produced non-finite value {v}");
        }
    }
}
