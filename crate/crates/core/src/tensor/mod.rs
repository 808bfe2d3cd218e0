//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable value types: the payload lives behind an `Arc` and
//! is never written after construction, so reading from many threads is safe.
//! Differentiable computation goes through a [`Graph`] tape; every op checks
//! its output for NaN/Inf so numeric blowups surface as errors instead of
//! propagating silently.

mod graph;

pub use graph::{backward, Graph};

use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::rng::Rng;

/// Element type for tensors. Training runs in `f32`; gradient-check oracles
/// run in `f64`.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn of_f64(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }
    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

/// On-disk element tag for checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("softmax row {row} has no visible entries")]
    EmptyRow { row: usize },
    #[error("backward root must be a scalar, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("tensor is not attached to a graph")]
    DetachedTensor,
    #[error("tensors belong to different graphs")]
    GraphMismatch,
    #[error("op `{op}` produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("bad argument: {0}")]
    BadArg(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

type GradSlot<T> = Arc<Mutex<Vec<T>>>;

/// Dense row-major tensor. Cheap to clone: clones share the payload and,
/// for parameters, the gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    grad: Option<GradSlot<T>>,
    /// (graph id, node id) when this tensor is an op output on a live tape.
    node: Option<(u64, usize)>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            node: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![], vec![v]).expect("scalar")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); n]).expect("zeros")
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n]).expect("full")
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(rng.normal() * std)).collect();
        Tensor::from_vec(shape, data).expect("randn")
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Tensor::from_vec(vec![n, n], data).expect("eye")
    }

    /// Marks the tensor as trainable, allocating its gradient accumulator.
    pub fn with_grad(mut self) -> Self {
        let n = self.numel();
        self.grad = Some(Arc::new(Mutex::new(vec![T::zero(); n])));
        self
    }

    /// Value-only copy: drops graph attachment and gradient tracking.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Scalar value; panics if the tensor is not a scalar.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Snapshot of the accumulated gradient, if tracked.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad.as_ref().map(|g| g.lock().unwrap().clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.grad {
            g.lock().unwrap().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds a contribution into the gradient accumulator.
    pub fn accumulate_grad(&self, contrib: &[T]) {
        if let Some(g) = &self.grad {
            let mut slot = g.lock().unwrap();
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s = *s + *c;
            }
        }
    }

    /// Replaces the payload, keeping the gradient slot and identity.
    /// Used by the optimizer; shapes must match.
    pub fn assign(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "assign of {} elements into {}",
                data.len(),
                self.numel()
            )));
        }
        self.data = Arc::new(data);
        self.node = None;
        Ok(())
    }

    /// Converts element type (used to run f32 models under the f64 checker).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::of_f64(v.as_f64())).collect();
        let mut t = Tensor::from_vec(self.shape.clone(), data).expect("cast");
        if self.grad.is_some() {
            t = t.with_grad();
        }
        t
    }

    pub(crate) fn grad_slot(&self) -> Option<&GradSlot<T>> {
        self.grad.as_ref()
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    pub(crate) fn node(&self) -> Option<(u64, usize)> {
        self.node
    }

    pub(crate) fn with_node(mut self, graph: u64, node: usize) -> Self {
        self.node = Some((graph, node));
        self
    }

    /// Key identifying the shared payload, used to dedupe leaf registration.
    pub(crate) fn ident(&self) -> usize {
        match &self.grad {
            Some(g) => Arc::as_ptr(g) as usize,
            None => Arc::as_ptr(&self.data) as *const () as usize,
        }
    }
}

/// Central-difference gradient of a scalar function, the oracle that every
/// analytic gradient in this crate is checked against.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(TensorError::BadArg("finite_diff_grad needs h > 0".into()));
    }
    let mut grad = vec![T::zero(); x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] = plus[i] + h;
        let mut minus = x.data().to_vec();
        minus[i] = minus[i] - h;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad[i] = (fp - fm) / (h + h);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}
