//! Operation tape for reverse-mode differentiation.
//!
//! A [`Tape`] is created per forward pass (one training step, one loss),
//! is single-threaded, and is discarded after [`Tape::backward`]. Each op
//! pushes a node holding the forward value and, when any parameter is
//! reachable, a closure that maps the node's output gradient to gradients
//! for its parents.

use std::cell::RefCell;
use std::collections::HashMap;

use super::{logsumexp_slice, Tensor, TensorError};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Records ops applied during a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_leaves: RefCell<HashMap<usize, usize>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Leaf holding a constant; no gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: false,
        });
        Var { tape: self, id }
    }

    /// Leaf for a parameter tensor. Calls with the same backing allocation
    /// return the same leaf, so gradients from repeated uses accumulate.
    /// Tensors without `requires_grad` are treated as constants.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        if !value.requires_grad() {
            return self.constant(value.clone());
        }
        let key = value.ptr_id();
        if let Some(&id) = self.param_leaves.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let id = self.push(Node {
            value: value.clone(),
            parents: vec![],
            backward: None,
            needs_grad: true,
        });
        self.param_leaves.borrow_mut().insert(key, id);
        Var { tape: self, id }
    }

    /// Registers an externally computed op. `backward` receives the output
    /// gradient and returns per-input gradients aligned with `inputs`.
    pub fn custom(
        &self,
        inputs: &[Var<'_>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var<'_> {
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        let id = self.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Runs backpropagation from a scalar loss. Returns a gradient per
    /// reachable parameter leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        assert!(std::ptr::eq(self, loss.tape), "loss from a different tape");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(grad_data) = grads[id].take() else {
                continue;
            };
            let grad = Tensor::new(node.value.shape().to_vec(), grad_data);
            if let Some(back) = &node.backward {
                let parent_grads = back(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[*pid].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.numel(), nodes[*pid].value.numel());
                    match &mut grads[*pid] {
                        Some(acc) => Tensor::add_assign_into(acc, &pg),
                        slot => *slot = Some(pg.data().to_vec()),
                    }
                }
            }
            if node.parents.is_empty() {
                // Parameter leaf: keep its gradient for the caller.
                grads[id] = Some(grad.data().to_vec());
            }
        }
        let mut by_ptr = HashMap::new();
        let mut leaves = Vec::new();
        for (&ptr, &id) in self.param_leaves.borrow().iter() {
            if let Some(g) = grads[id].take() {
                by_ptr.insert(ptr, leaves.len());
                leaves.push(Tensor::new(nodes[id].value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { by_ptr, leaves })
    }
}

/// Gradients of a scalar loss with respect to parameter tensors.
pub struct Gradients {
    by_ptr: HashMap<usize, usize>,
    leaves: Vec<Tensor>,
}

impl Gradients {
    /// Gradient for the given parameter, if it was reachable from the loss.
    pub fn wrt(&self, param: &Tensor) -> Option<&Tensor> {
        self.by_ptr.get(&param.ptr_id()).map(|&i| &self.leaves[i])
    }
}

impl<'t> Var<'t> {
    fn same_tape(self, other: Var<'t>, op: &'static str) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "{op}: operands from different tapes"
        );
    }

    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(
        self,
        value: Tensor,
        backward: Option<BackwardFn>,
    ) -> Var<'t> {
        let needs_grad = self.tape.nodes.borrow()[self.id].needs_grad;
        let id = self.tape.push(Node {
            value,
            parents: vec![self.id],
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var {
            tape: self.tape,
            id,
        }
    }

    fn binary(
        self,
        rhs: Var<'t>,
        value: Tensor,
        backward: Option<BackwardFn>,
    ) -> Var<'t> {
        let needs_grad = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].needs_grad || nodes[rhs.id].needs_grad
        };
        let id = self.tape.push(Node {
            value,
            parents: vec![self.id, rhs.id],
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var {
            tape: self.tape,
            id,
        }
    }

    /// Standard matrix product `self[m×p] · rhs[p×q]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(rhs, "matmul");
        let (a, b) = (self.value(), rhs.value());
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = matmul_raw(&a, &b);
        Ok(self.binary(
            rhs,
            value,
            Some(Box::new(move |g| {
                vec![
                    Some(matmul_nt_raw(g, &b)),
                    Some(matmul_tn_raw(&a, g)),
                ]
            })),
        ))
    }

    /// `self[m×p] · rhs[q×p]ᵀ`, avoiding an explicit transpose node.
    pub fn matmul_nt(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(rhs, "matmul_nt");
        let (a, b) = (self.value(), rhs.value());
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let value = matmul_nt_raw(&a, &b);
        Ok(self.binary(
            rhs,
            value,
            Some(Box::new(move |g| {
                vec![
                    Some(matmul_raw(g, &b)),
                    Some(matmul_tn_raw(g, &a)),
                ]
            })),
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(rhs, "add");
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        Ok(self.binary(
            rhs,
            value,
            Some(Box::new(|g| vec![Some(g.clone()), Some(g.clone())])),
        ))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.add(rhs.scale(-1.0))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        self.unary(
            value,
            Some(Box::new(move |g| {
                let d = g.data().iter().map(|x| x * c).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            })),
        )
    }

    /// Adds `bias[m]` to every row of `self[n×m]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(bias, "add_bias");
        let (a, b) = (self.value(), bias.value());
        if !a.is_matrix() || b.shape() != [a.cols()] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let cols = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.at(i % cols))
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        Ok(self.binary(
            bias,
            value,
            Some(Box::new(move |g| {
                let mut db = vec![0.0; cols];
                for (i, x) in g.data().iter().enumerate() {
                    db[i % cols] += x;
                }
                vec![Some(g.clone()), Some(Tensor::new(vec![cols], db))]
            })),
        ))
    }

    /// Multiplies column `j` of `self[n×m]` by `gain[j]`.
    pub fn scale_cols(self, gain: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(gain, "scale_cols");
        let (a, b) = (self.value(), gain.value());
        if !a.is_matrix() || b.shape() != [a.cols()] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let cols = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * b.at(i % cols))
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        let (a2, b2) = (a.clone(), b.clone());
        Ok(self.binary(
            gain,
            value,
            Some(Box::new(move |g| {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * b2.at(i % cols))
                    .collect();
                let mut dg = vec![0.0; cols];
                for (i, x) in g.data().iter().enumerate() {
                    dg[i % cols] += x * a2.at(i);
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), dx)),
                    Some(Tensor::new(vec![cols], dg)),
                ]
            })),
        ))
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        self.unary(
            value,
            Some(Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(gx, x)| if *x > 0.0 { *gx } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            })),
        )
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        if !a.is_matrix() || a.cols() == 0 {
            return Err(TensorError::EmptyInput { op: "layer_norm" });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = a.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) / s;
            }
        }
        let value = Tensor::new(a.shape().to_vec(), out);
        let y = value.clone();
        let x = a;
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                // dx_j = (1/s) * (g_j - mean(g) - y_j * mean(g .* y)) per row
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                    let s = (var + eps).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let g_mean = gr.iter().sum::<f64>() / cols as f64;
                    let gy_mean =
                        gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = (gr[c] - g_mean - yr[c] * gy_mean) / s;
                    }
                }
                vec![Some(Tensor::new(vec![rows, cols], dx))]
            })),
        ))
    }

    /// Stable softmax over each row (a rank-1 tensor is one row).
    pub fn softmax(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        if a.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let cols = a.cols();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(cols) {
            super::softmax_slice(row);
        }
        let value = Tensor::new(a.shape().to_vec(), out);
        let y = value.clone();
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; g.numel()];
                for (r, (gr, yr)) in g
                    .data()
                    .chunks(cols)
                    .zip(y.data().chunks(cols))
                    .enumerate()
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx))]
            })),
        ))
    }

    /// Stable log-softmax over each row.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        if a.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "log_softmax" });
        }
        let cols = a.cols();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(cols) {
            let lse = logsumexp_slice(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(a.shape().to_vec(), out);
        let lp = value.clone();
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; g.numel()];
                for (r, (gr, lr)) in g
                    .data()
                    .chunks(cols)
                    .zip(lp.data().chunks(cols))
                    .enumerate()
                {
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - lr[c].exp() * gsum;
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx))]
            })),
        ))
    }

    /// log(sum(exp(v))) of a vector, as a scalar.
    pub fn logsumexp(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        if a.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "logsumexp" });
        }
        let lse = logsumexp_slice(a.data());
        let value = Tensor::scalar(lse);
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let gs = g.item();
                let d = a.data().iter().map(|x| (x - lse).exp() * gs).collect();
                vec![Some(Tensor::new(a.shape().to_vec(), d))]
            })),
        ))
    }

    /// Gathers rows of `self` by index; this is also the embedding lookup.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(a.row(i));
        }
        let value = Tensor::new(vec![ids.len(), cols], out);
        let ids = ids.to_vec();
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let mut da = vec![0.0; rows * cols];
                for (k, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        da[i * cols + c] += g.at2(k, c);
                    }
                }
                vec![Some(Tensor::new(vec![rows, cols], da))]
            })),
        ))
    }

    /// Contiguous column slice `[start, start+len)`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out);
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..len {
                        da[r * cols + start + c] = g.at2(r, c);
                    }
                }
                vec![Some(Tensor::new(vec![rows, cols], da))]
            })),
        ))
    }

    /// Replaces entries where `mask` is true with `fill` (no gradient flows
    /// through masked entries).
    pub fn masked_fill(self, mask: &[bool], fill: f64) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        if mask.len() != a.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: a.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = a
            .data()
            .iter()
            .zip(mask)
            .map(|(x, &m)| if m { fill } else { *x })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        let mask = mask.to_vec();
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(x, &m)| if m { 0.0 } else { *x })
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            })),
        ))
    }

    /// Gathers scalar entries `(row, col)` of a matrix into a vector.
    pub fn gather_entries(self, coords: &[(usize, usize)]) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        for &(r, c) in coords {
            if r >= rows || c >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_entries",
                    index: r * cols + c,
                    bound: rows * cols,
                });
            }
        }
        let out: Vec<f64> = coords.iter().map(|&(r, c)| a.at2(r, c)).collect();
        let value = Tensor::new(vec![coords.len()], out);
        let coords = coords.to_vec();
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let mut da = vec![0.0; rows * cols];
                for (k, &(r, c)) in coords.iter().enumerate() {
                    da[r * cols + c] += g.at(k);
                }
                vec![Some(Tensor::new(vec![rows, cols], da))]
            })),
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(TensorError::DataLength {
                expected: n,
                got: a.numel(),
            });
        }
        let old_shape = a.shape().to_vec();
        let value = Tensor::new(shape, a.data().to_vec());
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                vec![Some(Tensor::new(old_shape.clone(), g.data().to_vec()))]
            })),
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let value = Tensor::scalar(a.data().iter().sum());
        let shape = a.shape().to_vec();
        let n = a.numel();
        self.unary(
            value,
            Some(Box::new(move |g| {
                let gs = g.item();
                vec![Some(Tensor::new(shape.clone(), vec![gs; n]))]
            })),
        )
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn hadamard_const(self, m: &Tensor) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        if a.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "hadamard_const",
                lhs: a.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(m.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        let m = m.clone();
        Ok(self.unary(
            value,
            Some(Box::new(move |g| {
                let d = g.data().iter().zip(m.data()).map(|(x, y)| x * y).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d))]
            })),
        ))
    }
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    assert!(!parts.is_empty(), "concat_cols: no inputs");
    let tape = parts[0].tape;
    let values: Vec<Tensor> = parts.iter().map(|v| v.value()).collect();
    let rows = values[0].rows();
    for v in &values {
        if !v.is_matrix() || v.rows() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: values[0].shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            out.extend_from_slice(v.row(r));
        }
    }
    let value = Tensor::new(vec![rows, total], out);
    let widths2 = widths.clone();
    Ok(tape.custom(
        parts,
        value,
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(widths2.len());
            let mut offset = 0;
            for &w in &widths2 {
                let mut d = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    d.extend_from_slice(&g.row(r)[offset..offset + w]);
                }
                grads.push(Some(Tensor::new(vec![rows, w], d)));
                offset += w;
            }
            grads
        }),
    ))
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, p, q) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(p, b.rows());
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * q..(i + 1) * q];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            for j in 0..q {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, q], out)
}

/// `a · bᵀ` for `a[m×p]`, `b[q×p]`.
pub(crate) fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, p, q) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(p, b.cols());
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..q {
            let brow = b.row(j);
            out[i * q + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, q], out)
}

/// `aᵀ · b` for `a[p×m]`, `b[p×q]`.
pub(crate) fn matmul_tn_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, m, q) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(p, b.rows());
    let mut out = vec![0.0; m * q];
    for k in 0..p {
        let arow = a.row(k);
        let brow = b.row(k);
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * q..(i + 1) * q];
            for j in 0..q {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, q], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_difference, max_grad_mismatch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(vec![2, 2]));
        assert_eq!(a.matmul(eye).unwrap().value().data(), a.value().data());
        assert_eq!(a.matmul(zero).unwrap().value().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_hand_computed() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            a.matmul(b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_singleton() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]));
        let s = v.softmax().unwrap().value();
        for x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = tape.constant(Tensor::new(vec![1], vec![42.0]));
        assert_eq!(one.softmax().unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = tape.constant(Tensor::uniform(vec![5, 9], -40.0, 40.0, &mut rng));
        let s = a.softmax().unwrap().value();
        for r in 0..5 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![0], vec![]));
        assert!(matches!(
            v.softmax(),
            Err(TensorError::EmptyInput { op: "softmax" })
        ));
    }

    #[test]
    fn logsumexp_singleton_and_uniform() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::new(vec![1], vec![-2.5]));
        assert!((one.logsumexp().unwrap().value().item() + 2.5).abs() < 1e-15);
        let v = tape.constant(Tensor::new(vec![4], vec![1.5; 4]));
        let got = v.logsumexp().unwrap().value().item();
        assert!((got - (1.5 + 4.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -4.0]).with_grad();
        let loss = tape.param(&w).sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_norm_is_identity() {
        let tape = Tape::new();
        let w = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).with_grad();
        let v = tape.param(&w);
        // ||w||^2 / 2 via <w, w> assembled from a matmul
        let row = v.reshape(vec![1, 4]).unwrap();
        let loss = row.matmul_nt(row).unwrap().sum().scale(0.5);
        let grads = tape.backward(loss).unwrap();
        for (g, x) in grads.wrt(&w).unwrap().data().iter().zip(w.data()) {
            assert!((g - x).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let w = Tensor::zeros(vec![2, 2]).with_grad();
        let v = tape.param(&w);
        assert!(matches!(
            tape.backward(v),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let tape = Tape::new();
        let w = Tensor::new(vec![2], vec![1.0, 2.0]).with_grad();
        let a = tape.param(&w);
        let b = tape.param(&w);
        let loss = a.add(b).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&w).unwrap().data(), &[2.0, 2.0]);
    }

    /// Composite finite-difference check over every differentiable op.
    #[test]
    fn composite_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w1 = Tensor::glorot(5, 4, &mut rng).with_grad();
        let w2 = Tensor::glorot(4, 6, &mut rng).with_grad();
        let bias = Tensor::uniform(vec![6], -0.5, 0.5, &mut rng).with_grad();
        let gain = Tensor::uniform(vec![4], 0.5, 1.5, &mut rng).with_grad();
        let table = Tensor::glorot(7, 5, &mut rng).with_grad();

        fn build_loss<'t>(
            tape: &'t Tape,
            table: &Tensor,
            w1: &Tensor,
            w2: &Tensor,
            bias: &Tensor,
            gain: &Tensor,
        ) -> Var<'t> {
            let emb = tape.param(table).gather_rows(&[0, 3, 6, 3]).unwrap();
            let h = emb.matmul(tape.param(w1)).unwrap();
            let h = h.layer_norm(1e-5).unwrap();
            let h = h.scale_cols(tape.param(gain)).unwrap();
            let h = h.relu();
            let left = h.slice_cols(0, 2).unwrap();
            let right = h.slice_cols(2, 2).unwrap();
            let h = concat_cols(&[right, left]).unwrap();
            let z = h
                .matmul(tape.param(w2))
                .unwrap()
                .add_bias(tape.param(bias))
                .unwrap();
            let mask = vec![
                false, false, true, false, false, false, //
                false, false, false, false, false, false, //
                false, true, false, false, false, false, //
                false, false, false, false, false, false,
            ];
            let z = z.masked_fill(&mask, -30.0).unwrap();
            let lp = z.log_softmax().unwrap();
            let picked = lp.gather_entries(&[(0, 1), (1, 4), (2, 0), (3, 5)]).unwrap();
            let a = picked.sum().scale(-0.9);
            let b = lp.sum().scale(-0.1 / 6.0);
            let sm = z.softmax().unwrap().sum().scale(0.01);
            let lse = z
                .reshape(vec![24])
                .unwrap()
                .logsumexp()
                .unwrap()
                .scale(0.05);
            a.add(b).unwrap().add(sm).unwrap().add(lse).unwrap()
        }

        let eval = |table: &Tensor, w1: &Tensor, w2: &Tensor, bias: &Tensor, gain: &Tensor| {
            let tape = Tape::new();
            build_loss(&tape, table, w1, w2, bias, gain).value().item()
        };

        let tape = Tape::new();
        let loss = build_loss(&tape, &table, &w1, &w2, &bias, &gain);
        let grads = tape.backward(loss).unwrap();

        let params: Vec<(&str, &Tensor)> = vec![
            ("table", &table),
            ("w1", &w1),
            ("w2", &w2),
            ("bias", &bias),
            ("gain", &gain),
        ];
        for (name, p) in params {
            let analytic = grads.wrt(p).unwrap().data().to_vec();
            let numeric = finite_difference(
                |xs| {
                    let mut q = (*p).clone();
                    q.replace_data(xs.to_vec());
                    let q = q.with_grad();
                    match name {
                        "table" => eval(&q, &w1, &w2, &bias, &gain),
                        "w1" => eval(&table, &q, &w2, &bias, &gain),
                        "w2" => eval(&table, &w1, &q, &bias, &gain),
                        "bias" => eval(&table, &w1, &w2, &q, &gain),
                        _ => eval(&table, &w1, &w2, &bias, &q),
                    }
                },
                p.data(),
                1e-5,
            );
            let err = max_grad_mismatch(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: gradient mismatch {err}");
        }
    }

    #[test]
    fn forward_ops_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(vec![4, 4], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(vec![4, 4], -2.0, 2.0, &mut rng);
        let run = || {
            let tape = Tape::new();
            let x = tape.constant(a.clone());
            let y = tape.constant(b.clone());
            x.matmul(y)
                .unwrap()
                .softmax()
                .unwrap()
                .value()
                .data()
                .to_vec()
        };
        assert_eq!(run(), run());
    }
}
