//! Beam-approximated CRF: per-position truncation to the top-k labels by
//! emission score, cropped transition blocks, and DP confined to the
//! resulting lattice (`O(n·k²)` instead of `O(n·V²)`).
//!
//! During training the gold label is forced into every position's beam so
//! the approximate partition upper-bounds the gold path score and the loss
//! stays nonnegative.

use crate::tensor::tape::{matmul_nt_raw, matmul_raw, Tape, Var};
use crate::tensor::{logsumexp_slice, Tensor};

use super::{CrfError, DynamicTransitionNet, TransitionFactors};

/// Transition source used when cropping blocks for a lattice.
pub enum Transitions<'a> {
    /// `M = E1·E2ᵀ`, position-independent.
    Static(&'a TransitionFactors),
    /// `M^i = E1·f([h_{i-1},h_i])·E2ᵀ`, depending on decoder states.
    Dynamic {
        factors: &'a TransitionFactors,
        net: &'a DynamicTransitionNet,
        hidden: &'a Tensor,
    },
    /// Crops of an explicit `V×V` matrix (exactness tests).
    Full(&'a Tensor),
}

/// Per-position top-k candidate sets with cropped transition blocks.
#[derive(Debug, Clone)]
pub struct BeamLattice {
    n: usize,
    k_eff: usize,
    cand: Vec<usize>,
    cand_scores: Vec<f64>,
    trans: Vec<f64>,
    gold_index: Option<Vec<usize>>,
}

impl BeamLattice {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k_eff(&self) -> usize {
        self.k_eff
    }

    pub fn label(&self, pos: usize, idx: usize) -> usize {
        self.cand[pos * self.k_eff + idx]
    }

    pub fn labels(&self, pos: usize) -> &[usize] {
        &self.cand[pos * self.k_eff..(pos + 1) * self.k_eff]
    }

    pub fn score(&self, pos: usize, idx: usize) -> f64 {
        self.cand_scores[pos * self.k_eff + idx]
    }

    /// Transition score between candidate `a` at `pos` and candidate `b`
    /// at `pos + 1`.
    pub fn trans(&self, pos: usize, a: usize, b: usize) -> f64 {
        let k = self.k_eff;
        self.trans[pos * k * k + a * k + b]
    }

    pub fn gold_indices(&self) -> Option<&[usize]> {
        self.gold_index.as_deref()
    }

    /// Score of a path given as candidate indices per position.
    pub fn path_score(&self, indices: &[usize]) -> f64 {
        debug_assert_eq!(indices.len(), self.n);
        let mut total = self.score(0, indices[0]);
        for i in 1..self.n {
            total += self.trans(i - 1, indices[i - 1], indices[i]) + self.score(i, indices[i]);
        }
        total
    }
}

/// Emission-score block for the given label ids: `block[a][b] =
/// ⟨E1[rows[a]], E2[cols[b]]⟩`. The `V×V` matrix is never formed.
pub fn static_transition_block(
    factors: &TransitionFactors,
    rows: &[usize],
    cols: &[usize],
) -> Result<Tensor, CrfError> {
    let v = factors.vocab();
    check_ids(rows, v)?;
    check_ids(cols, v)?;
    let e1_rows = gather(&factors.e1, rows);
    let e2_rows = gather(&factors.e2, cols);
    Ok(matmul_nt_raw(&e1_rows, &e2_rows))
}

/// Dynamic block `E1[rows]·f([h_prev,h_cur])·E2[cols]ᵀ`.
pub fn dynamic_transition_block(
    net: &DynamicTransitionNet,
    factors: &TransitionFactors,
    h_prev: &[f64],
    h_cur: &[f64],
    rows: &[usize],
    cols: &[usize],
) -> Result<Tensor, CrfError> {
    let v = factors.vocab();
    check_ids(rows, v)?;
    check_ids(cols, v)?;
    let mid = net.matrix(h_prev, h_cur)?;
    let e1_rows = gather(&factors.e1, rows);
    let e2_rows = gather(&factors.e2, cols);
    Ok(matmul_nt_raw(&matmul_raw(&e1_rows, &mid), &e2_rows))
}

fn check_ids(ids: &[usize], v: usize) -> Result<(), CrfError> {
    for (i, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(CrfError::LabelOutOfRange {
                position: i,
                label: id,
                vocab: v,
            });
        }
    }
    Ok(())
}

fn gather(t: &Tensor, ids: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &i in ids {
        out.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![ids.len(), cols], out)
}

/// Top `k_eff = min(k, V)` labels per position by emission score, ties
/// toward the smaller id; `gold[i]`, when given and absent, replaces the
/// lowest-scoring candidate. Returned rows are sorted by descending score
/// apart from that replacement.
pub fn select_candidates(
    scores: &Tensor,
    k: usize,
    gold: Option<&[usize]>,
) -> Result<(Vec<usize>, Option<Vec<usize>>, usize), CrfError> {
    if k == 0 {
        return Err(CrfError::EmptyBeam);
    }
    if !scores.is_matrix() || scores.rows() == 0 || scores.cols() == 0 {
        return Err(CrfError::BadShape {
            what: "label scores",
            shape: scores.shape().to_vec(),
        });
    }
    let (n, v) = (scores.rows(), scores.cols());
    if let Some(g) = gold {
        if g.len() != n {
            return Err(CrfError::LengthMismatch {
                expected: n,
                got: g.len(),
            });
        }
        check_ids(g, v)?;
    }
    let k_eff = k.min(v);
    let mut cand = Vec::with_capacity(n * k_eff);
    let mut gold_index = gold.map(|_| Vec::with_capacity(n));
    let mut ids: Vec<usize> = Vec::with_capacity(v);
    for i in 0..n {
        let row = scores.row(i);
        ids.clear();
        ids.extend(0..v);
        let by_score = |x: &usize, y: &usize| {
            row[*y].total_cmp(&row[*x]).then(x.cmp(y))
        };
        if k_eff < v {
            ids.select_nth_unstable_by(k_eff - 1, by_score);
            ids.truncate(k_eff);
        }
        ids.sort_unstable_by(by_score);
        if let Some(g) = gold {
            let gi = match ids.iter().position(|&id| id == g[i]) {
                Some(pos) => pos,
                None => {
                    ids[k_eff - 1] = g[i];
                    k_eff - 1
                }
            };
            gold_index.as_mut().expect("gold present").push(gi);
        }
        cand.extend_from_slice(&ids);
    }
    Ok((cand, gold_index, k_eff))
}

/// Builds the lattice: candidate selection plus cropped transition blocks.
pub fn build_beam(
    scores: &Tensor,
    k: usize,
    gold: Option<&[usize]>,
    transitions: &Transitions<'_>,
) -> Result<BeamLattice, CrfError> {
    let (cand, gold_index, k_eff) = select_candidates(scores, k, gold)?;
    let n = scores.rows();
    let mut cand_scores = Vec::with_capacity(n * k_eff);
    for i in 0..n {
        let row = scores.row(i);
        for &id in &cand[i * k_eff..(i + 1) * k_eff] {
            cand_scores.push(row[id]);
        }
    }
    let mut trans = Vec::with_capacity(n.saturating_sub(1) * k_eff * k_eff);
    for i in 0..n.saturating_sub(1) {
        let rows = &cand[i * k_eff..(i + 1) * k_eff];
        let cols = &cand[(i + 1) * k_eff..(i + 2) * k_eff];
        let block = match transitions {
            Transitions::Static(factors) => static_transition_block(factors, rows, cols)?,
            Transitions::Dynamic {
                factors,
                net,
                hidden,
            } => dynamic_transition_block(
                net,
                factors,
                hidden.row(i),
                hidden.row(i + 1),
                rows,
                cols,
            )?,
            Transitions::Full(m) => {
                check_ids(rows, m.rows())?;
                check_ids(cols, m.rows())?;
                let mut block = Vec::with_capacity(k_eff * k_eff);
                for &a in rows {
                    for &b in cols {
                        block.push(m.at2(a, b));
                    }
                }
                Tensor::new(vec![k_eff, k_eff], block)
            }
        };
        trans.extend_from_slice(block.data());
    }
    Ok(BeamLattice {
        n,
        k_eff,
        cand,
        cand_scores,
        trans,
        gold_index,
    })
}

/// Log-space forward recursion over the lattice candidates.
pub fn beam_log_partition(lat: &BeamLattice) -> f64 {
    let k = lat.k_eff;
    let mut alpha: Vec<f64> = (0..k).map(|j| lat.score(0, j)).collect();
    let mut scratch = vec![0.0; k];
    for i in 1..lat.n {
        let mut next = vec![0.0; k];
        for (b, nb) in next.iter_mut().enumerate() {
            for (a, s) in scratch.iter_mut().enumerate() {
                *s = alpha[a] + lat.trans(i - 1, a, b);
            }
            *nb = logsumexp_slice(&scratch) + lat.score(i, b);
        }
        alpha = next;
    }
    logsumexp_slice(&alpha)
}

/// Max-plus DP over the lattice; ties go to the smaller label id. Requires
/// an inference lattice (no gold forcing).
pub fn beam_viterbi(lat: &BeamLattice) -> Result<(Vec<usize>, f64), CrfError> {
    if lat.gold_index.is_some() {
        return Err(CrfError::GoldForcedLattice);
    }
    Ok(beam_viterbi_unchecked(lat))
}

fn beam_viterbi_unchecked(lat: &BeamLattice) -> (Vec<usize>, f64) {
    let k = lat.k_eff;
    let mut best: Vec<f64> = (0..k).map(|j| lat.score(0, j)).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(lat.n.saturating_sub(1));
    for i in 1..lat.n {
        let mut cur = vec![f64::NEG_INFINITY; k];
        let mut ptr = vec![0usize; k];
        for b in 0..k {
            let mut arg = 0usize;
            let mut val = f64::NEG_INFINITY;
            let mut arg_label = usize::MAX;
            for a in 0..k {
                let cand = best[a] + lat.trans(i - 1, a, b);
                let label = lat.label(i - 1, a);
                if cand > val || (cand == val && label < arg_label) {
                    val = cand;
                    arg = a;
                    arg_label = label;
                }
            }
            cur[b] = val + lat.score(i, b);
            ptr[b] = arg;
        }
        best = cur;
        back.push(ptr);
    }
    let mut arg = 0usize;
    let mut score = f64::NEG_INFINITY;
    let mut arg_label = usize::MAX;
    for (j, &s) in best.iter().enumerate() {
        let label = lat.label(lat.n - 1, j);
        if s > score || (s == score && label < arg_label) {
            score = s;
            arg = j;
            arg_label = label;
        }
    }
    let mut idx_path = vec![arg];
    for ptr in back.iter().rev() {
        arg = ptr[arg];
        idx_path.push(arg);
    }
    idx_path.reverse();
    let path = idx_path
        .iter()
        .enumerate()
        .map(|(i, &j)| lat.label(i, j))
        .collect();
    (path, score)
}

/// Lattice posterior marginals (unary `n×k`, pairwise per pair `k×k`).
pub fn beam_marginals(lat: &BeamLattice) -> (Tensor, Vec<Tensor>) {
    let (n, k) = (lat.n, lat.k_eff);
    let mut alphas = Vec::with_capacity(n);
    alphas.push((0..k).map(|j| lat.score(0, j)).collect::<Vec<f64>>());
    let mut scratch = vec![0.0; k];
    for i in 1..n {
        let prev = alphas.last().expect("nonempty");
        let mut cur = vec![0.0; k];
        for (b, cb) in cur.iter_mut().enumerate() {
            for (a, s) in scratch.iter_mut().enumerate() {
                *s = prev[a] + lat.trans(i - 1, a, b);
            }
            *cb = logsumexp_slice(&scratch) + lat.score(i, b);
        }
        alphas.push(cur);
    }
    let mut betas = vec![vec![0.0; k]; n];
    for i in (0..n.saturating_sub(1)).rev() {
        for a in 0..k {
            for (b, s) in scratch.iter_mut().enumerate() {
                *s = lat.trans(i, a, b) + lat.score(i + 1, b) + betas[i + 1][b];
            }
            betas[i][a] = logsumexp_slice(&scratch);
        }
    }
    let log_z = logsumexp_slice(&alphas[n - 1]);
    let mut unary = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            unary[i * k + j] = (alphas[i][j] + betas[i][j] - log_z).exp();
        }
    }
    let mut pairwise = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n.saturating_sub(1) {
        let mut block = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                block[a * k + b] = (alphas[i][a]
                    + lat.trans(i, a, b)
                    + lat.score(i + 1, b)
                    + betas[i + 1][b]
                    - log_z)
                    .exp();
            }
        }
        pairwise.push(Tensor::new(vec![k, k], block));
    }
    (Tensor::new(vec![n, k], unary), pairwise)
}

/// Beam NLL of the forced gold path: `log Z_beam − score(gold)`.
/// Nonnegative because the gold path is one of the summed paths.
pub fn beam_nll(lat: &BeamLattice) -> Result<f64, CrfError> {
    let gold = lat.gold_index.as_ref().ok_or(CrfError::MissingGold)?;
    Ok(beam_log_partition(lat) - lat.path_score(gold))
}

/// Beam NLL with analytic gradients wrt candidate scores and transition
/// blocks: lattice marginals minus gold indicators.
pub fn beam_nll_and_grad(lat: &BeamLattice) -> Result<(f64, Tensor, Vec<Tensor>), CrfError> {
    let gold = lat.gold_index.clone().ok_or(CrfError::MissingGold)?;
    let nll = beam_log_partition(lat) - lat.path_score(&gold);
    let (unary, pairwise) = beam_marginals(lat);
    let k = lat.k_eff;
    let mut grad_scores = unary.data().to_vec();
    for (i, &g) in gold.iter().enumerate() {
        grad_scores[i * k + g] -= 1.0;
    }
    let grad_blocks = pairwise
        .into_iter()
        .enumerate()
        .map(|(i, block)| {
            let mut data = block.data().to_vec();
            data[gold[i] * k + gold[i + 1]] -= 1.0;
            Tensor::new(vec![k, k], data)
        })
        .collect();
    Ok((nll, Tensor::new(vec![lat.n, k], grad_scores), grad_blocks))
}

/// Transition source for the differentiable training path.
pub enum TapedTransitions<'a, 't> {
    Static(&'a TransitionFactors),
    Dynamic {
        factors: &'a TransitionFactors,
        net: &'a DynamicTransitionNet,
        hidden: Var<'t>,
    },
}

/// Differentiable beam CRF NLL. Builds the gold-forced lattice from the
/// emission values, assembles candidate scores and transition blocks as
/// taped ops, and registers the DP as one custom node whose backward pass
/// is the marginals-minus-indicators gradient. Gradients therefore flow to
/// emissions, `E1`, `E2`, and the dynamic net.
pub fn crf_nll_taped<'t>(
    tape: &'t Tape,
    emissions: Var<'t>,
    gold: &[usize],
    k: usize,
    transitions: &TapedTransitions<'_, 't>,
) -> Result<Var<'t>, CrfError> {
    let scores = emissions.value();
    let (cand, gold_index, k_eff) = select_candidates(&scores, k, Some(gold))?;
    let n = scores.rows();
    let gold_index = gold_index.expect("gold supplied");

    let coords: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| {
            let row = &cand[i * k_eff..(i + 1) * k_eff];
            row.iter().map(move |&id| (i, id)).collect::<Vec<_>>()
        })
        .collect();
    let cand_scores = emissions
        .gather_entries(&coords)?
        .reshape(vec![n, k_eff])?;

    let mut block_vars: Vec<Var<'t>> = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n.saturating_sub(1) {
        let rows = &cand[i * k_eff..(i + 1) * k_eff];
        let cols = &cand[(i + 1) * k_eff..(i + 2) * k_eff];
        let block = match transitions {
            TapedTransitions::Static(factors) => {
                let e1 = tape.param(&factors.e1).gather_rows(rows)?;
                let e2 = tape.param(&factors.e2).gather_rows(cols)?;
                e1.matmul_nt(e2)?
            }
            TapedTransitions::Dynamic {
                factors,
                net,
                hidden,
            } => {
                let h_prev = hidden.gather_rows(&[i])?;
                let h_cur = hidden.gather_rows(&[i + 1])?;
                let joint = crate::tensor::tape::concat_cols(&[h_prev, h_cur])?;
                let mid = joint
                    .matmul(tape.param(&net.w1))?
                    .add_bias(tape.param(&net.b1))?
                    .relu()
                    .matmul(tape.param(&net.w2))?
                    .add_bias(tape.param(&net.b2))?
                    .reshape(vec![net.d_t(), net.d_t()])?;
                let e1 = tape.param(&factors.e1).gather_rows(rows)?;
                let e2 = tape.param(&factors.e2).gather_rows(cols)?;
                e1.matmul(mid)?.matmul_nt(e2)?
            }
        };
        block_vars.push(block);
    }

    // Assemble the lattice from the taped values so the custom node sees
    // exactly what its inputs computed.
    let mut trans = Vec::with_capacity(n.saturating_sub(1) * k_eff * k_eff);
    for b in &block_vars {
        trans.extend_from_slice(b.value().data());
    }
    let lat = BeamLattice {
        n,
        k_eff,
        cand,
        cand_scores: cand_scores.value().data().to_vec(),
        trans,
        gold_index: Some(gold_index),
    };
    let (nll, grad_scores, grad_blocks) = beam_nll_and_grad(&lat)?;

    let mut inputs = vec![cand_scores];
    inputs.extend_from_slice(&block_vars);
    Ok(tape.custom(
        &inputs,
        Tensor::scalar(nll),
        Box::new(move |g| {
            let gs = g.item();
            let mut out = Vec::with_capacity(1 + grad_blocks.len());
            out.push(Some(scale_tensor(&grad_scores, gs)));
            for b in &grad_blocks {
                out.push(Some(scale_tensor(b, gs)));
            }
            out
        }),
    ))
}

fn scale_tensor(t: &Tensor, c: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
}
