//! Linear-chain CRF decoding: an exact reference implementation and the
//! scalable approximation used by the model (low-rank transitions, beam
//! truncation with gold forcing, dynamic per-position transitions).

use rand::Rng;

use crate::tensor::tape::{matmul_nt_raw, matmul_raw};
use crate::tensor::Tensor;

pub mod approx;
pub mod exact;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CrfError {
    #[error("{what} has invalid shape {shape:?}")]
    BadShape { what: &'static str, shape: Vec<usize> },
    #[error("label {label} at position {position} out of range for vocab {vocab}")]
    LabelOutOfRange {
        position: usize,
        label: usize,
        vocab: usize,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("search space of {paths:.3e} paths exceeds brute-force limit {limit:.1e}")]
    SearchSpaceTooLarge { paths: f64, limit: f64 },
    #[error("beam size must be at least 1")]
    EmptyBeam,
    #[error("lattice was built with gold forcing; Viterbi expects an inference lattice")]
    GoldForcedLattice,
    #[error("lattice has no forced gold path; build it with the gold sequence")]
    MissingGold,
    #[error("tensor op failed: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Low-rank transition factors `E1, E2 ∈ R^{V×d_t}`; the full matrix
/// `M = E1·E2ᵀ` is only ever materialized in blocks.
#[derive(Debug, Clone)]
pub struct TransitionFactors {
    pub e1: Tensor,
    pub e2: Tensor,
}

impl TransitionFactors {
    pub fn new(vocab: usize, d_t: usize, rng: &mut impl Rng) -> Self {
        Self {
            e1: Tensor::glorot(vocab, d_t, rng).with_grad(),
            e2: Tensor::glorot(vocab, d_t, rng).with_grad(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.e1.rows()
    }

    pub fn d_t(&self) -> usize {
        self.e1.cols()
    }

    /// Dense `V×V` product for small-vocabulary tests only.
    pub fn materialize(&self) -> Tensor {
        assert!(
            self.vocab() <= 4096,
            "refusing to materialize a {}x{} transition matrix",
            self.vocab(),
            self.vocab()
        );
        matmul_nt_raw(&self.e1, &self.e2)
    }
}

/// Two-layer FFN mapping `[h_prev, h_cur]` (length `2·d_model`) to a
/// `d_t×d_t` matrix inserted between the transition factors.
#[derive(Debug, Clone)]
pub struct DynamicTransitionNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    d_model: usize,
    d_t: usize,
}

impl DynamicTransitionNet {
    /// Hidden width follows the model width.
    pub fn new(d_model: usize, d_t: usize, rng: &mut impl Rng) -> Self {
        let d_h = d_model;
        Self {
            w1: Tensor::glorot(2 * d_model, d_h, rng).with_grad(),
            b1: Tensor::zeros(vec![d_h]).with_grad(),
            w2: Tensor::glorot(d_h, d_t * d_t, rng).with_grad(),
            b2: Tensor::zeros(vec![d_t * d_t]).with_grad(),
            d_model,
            d_t,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    /// Plain forward pass producing the per-pair `d_t×d_t` matrix.
    pub fn matrix(&self, h_prev: &[f64], h_cur: &[f64]) -> Result<Tensor, CrfError> {
        if h_prev.len() != self.d_model || h_cur.len() != self.d_model {
            return Err(CrfError::BadShape {
                what: "dynamic-net hidden input",
                shape: vec![h_prev.len(), h_cur.len()],
            });
        }
        let mut joint = Vec::with_capacity(2 * self.d_model);
        joint.extend_from_slice(h_prev);
        joint.extend_from_slice(h_cur);
        let x = Tensor::new(vec![1, 2 * self.d_model], joint);
        let mut h = matmul_raw(&x, &self.w1).data().to_vec();
        for (v, b) in h.iter_mut().zip(self.b1.data()) {
            *v = (*v + b).max(0.0);
        }
        let h = Tensor::new(vec![1, self.w1.cols()], h);
        let mut out = matmul_raw(&h, &self.w2).data().to_vec();
        for (v, b) in out.iter_mut().zip(self.b2.data()) {
            *v += b;
        }
        Ok(Tensor::new(vec![self.d_t, self.d_t], out))
    }
}
