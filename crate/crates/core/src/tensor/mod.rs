//! Dense-tensor compute substrate with tape-based reverse-mode differentiation.
//!
//! All learnable state in this crate lives in [`Tensor`]s (row-major `f64`
//! storage behind an `Arc`, so clones are cheap and values can cross threads).
//! Differentiable computations run through a [`tape::Tape`], which records
//! each op together with a closure that propagates gradients backward.

use std::sync::Arc;

use rand::Rng;

pub mod checkpoint;
pub mod tape;

pub use tape::{Gradients, Tape, Var};

/// Errors raised by tensor construction and shape-checked ops.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: index {index} out of range {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: row {row} is fully masked")]
    FullyMasked { op: &'static str, row: usize },
}

/// Row-major dense tensor of `f64` values.
///
/// Data is immutable once constructed; `requires_grad` marks parameters so
/// that [`Tape::param`] records them as gradient roots.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    /// Panicking constructor for shapes known statically correct.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::from_vec(shape, data).expect("tensor shape/data mismatch")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![1.0; n])
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self::new(vec![rows, cols], data)
    }

    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Identity of the backing allocation; used to match parameters to
    /// their tape leaves and gradients.
    pub(crate) fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.data) as *const f64 as usize
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum, consuming neither side. Panics on shape mismatch;
    /// used internally for gradient accumulation where shapes are known.
    pub(crate) fn add_assign_into(acc: &mut Vec<f64>, t: &Tensor) {
        debug_assert_eq!(acc.len(), t.numel());
        for (a, b) in acc.iter_mut().zip(t.data.iter()) {
            *a += b;
        }
    }

    /// Replaces the backing data, keeping the shape. Used by the optimizer;
    /// allocates fresh storage so outstanding clones are unaffected.
    pub fn replace_data(&mut self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "replace_data length mismatch");
        self.data = Arc::new(data);
    }
}

/// Numerically stable log(sum(exp(v))) over a nonempty slice.
pub fn logsumexp_slice(v: &[f64]) -> f64 {
    debug_assert!(!v.is_empty());
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// In-place stable softmax of one row.
pub fn softmax_slice(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}
