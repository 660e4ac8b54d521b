//! Exact linear-chain CRF over a full transition matrix.
//!
//! Everything here runs in log space over plain `f64` data and serves as the
//! ground truth for the beam-approximated CRF: brute-force enumeration
//! backs the forward/Viterbi recursions, and the recursions back the beam.
//!
//! Shapes: `scores` is `n×V` with `scores[i][y] = s(y, x, i)`; a stationary
//! transition matrix is `V×V` with `trans[a][b] = t(a, b)`. The `_seq`
//! variants take one `V×V` block per adjacent pair for position-dependent
//! transitions.

use crate::tensor::{logsumexp_slice, Tensor};

use super::CrfError;

/// Cap on `V^n` for the brute-force enumerations.
const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Partition value, best path, and its unnormalized score for one instance.
#[derive(Debug, Clone)]
pub struct CrfResult {
    pub log_partition: f64,
    pub best_path: Vec<usize>,
    pub best_path_score: f64,
}

fn check_scores(scores: &Tensor) -> Result<(usize, usize), CrfError> {
    if !scores.is_matrix() || scores.rows() == 0 || scores.cols() == 0 {
        return Err(CrfError::BadShape {
            what: "label scores",
            shape: scores.shape().to_vec(),
        });
    }
    Ok((scores.rows(), scores.cols()))
}

fn check_trans(trans: &Tensor, v: usize) -> Result<(), CrfError> {
    if !trans.is_matrix() || trans.rows() != v || trans.cols() != v {
        return Err(CrfError::BadShape {
            what: "transition matrix",
            shape: trans.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_path(path: &[usize], n: usize, v: usize) -> Result<(), CrfError> {
    if path.len() != n {
        return Err(CrfError::LengthMismatch {
            expected: n,
            got: path.len(),
        });
    }
    for (i, &y) in path.iter().enumerate() {
        if y >= v {
            return Err(CrfError::LabelOutOfRange {
                position: i,
                label: y,
                vocab: v,
            });
        }
    }
    Ok(())
}

fn guard_brute_force(n: usize, v: usize) -> Result<(), CrfError> {
    let paths = (v as f64).powi(n as i32);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(CrfError::SearchSpaceTooLarge {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    Ok(())
}

/// Visits every label path of length `n` over `v` labels in lexicographic
/// order. Caller is responsible for the size guard.
fn for_each_path(n: usize, v: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; n];
    loop {
        f(&path);
        let mut i = n;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Unnormalized score of one path: emissions plus adjacent transitions.
pub fn path_score(scores: &Tensor, trans: &Tensor, path: &[usize]) -> Result<f64, CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    check_path(path, n, v)?;
    Ok(path_score_unchecked(scores, |_, a, b| trans.at2(a, b), path))
}

/// Path score with one transition block per adjacent pair.
pub fn path_score_seq(
    scores: &Tensor,
    blocks: &[Tensor],
    path: &[usize],
) -> Result<f64, CrfError> {
    let (n, v) = check_scores(scores)?;
    check_blocks(blocks, n, v)?;
    check_path(path, n, v)?;
    Ok(path_score_unchecked(scores, |i, a, b| blocks[i].at2(a, b), path))
}

fn check_blocks(blocks: &[Tensor], n: usize, v: usize) -> Result<(), CrfError> {
    if blocks.len() != n.saturating_sub(1) {
        return Err(CrfError::LengthMismatch {
            expected: n - 1,
            got: blocks.len(),
        });
    }
    for b in blocks {
        check_trans(b, v)?;
    }
    Ok(())
}

fn path_score_unchecked(
    scores: &Tensor,
    trans: impl Fn(usize, usize, usize) -> f64,
    path: &[usize],
) -> f64 {
    let mut total = scores.at2(0, path[0]);
    for i in 1..path.len() {
        total += trans(i - 1, path[i - 1], path[i]) + scores.at2(i, path[i]);
    }
    total
}

/// log Z by summing over all `V^n` paths. Refuses when the search space
/// exceeds 1e7 paths.
pub fn log_partition_bruteforce(scores: &Tensor, trans: &Tensor) -> Result<f64, CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    guard_brute_force(n, v)?;
    Ok(brute_lse(scores, |_, a, b| trans.at2(a, b), n, v))
}

pub fn log_partition_bruteforce_seq(
    scores: &Tensor,
    blocks: &[Tensor],
) -> Result<f64, CrfError> {
    let (n, v) = check_scores(scores)?;
    check_blocks(blocks, n, v)?;
    guard_brute_force(n, v)?;
    Ok(brute_lse(scores, |i, a, b| blocks[i].at2(a, b), n, v))
}

fn brute_lse(
    scores: &Tensor,
    trans: impl Fn(usize, usize, usize) -> f64,
    n: usize,
    v: usize,
) -> f64 {
    // Streaming logsumexp: rescale the running sum when the max moves.
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for_each_path(n, v, |path| {
        let s = path_score_unchecked(scores, &trans, path);
        if s <= max {
            sum += (s - max).exp();
        } else {
            sum = sum * (max - s).exp() + 1.0;
            max = s;
        }
    });
    max + sum.ln()
}

/// log Z by the forward recursion.
pub fn log_partition_forward(scores: &Tensor, trans: &Tensor) -> Result<f64, CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    Ok(forward_alphas(scores, |_, a, b| trans.at2(a, b), n, v)
        .last()
        .map(|alpha| logsumexp_slice(alpha))
        .expect("n >= 1"))
}

pub fn log_partition_forward_seq(scores: &Tensor, blocks: &[Tensor]) -> Result<f64, CrfError> {
    let (n, v) = check_scores(scores)?;
    check_blocks(blocks, n, v)?;
    Ok(
        forward_alphas(scores, |i, a, b| blocks[i].at2(a, b), n, v)
            .last()
            .map(|alpha| logsumexp_slice(alpha))
            .expect("n >= 1"),
    )
}

/// `alpha[i][b]` = log-sum of scores of all length-`i+1` prefixes ending in
/// label `b`, emission at `i` included.
fn forward_alphas(
    scores: &Tensor,
    trans: impl Fn(usize, usize, usize) -> f64,
    n: usize,
    v: usize,
) -> Vec<Vec<f64>> {
    let mut alphas = Vec::with_capacity(n);
    alphas.push(scores.row(0).to_vec());
    let mut scratch = vec![0.0; v];
    for i in 1..n {
        let prev = alphas.last().expect("nonempty");
        let mut cur = vec![0.0; v];
        for b in 0..v {
            for (a, s) in scratch.iter_mut().enumerate() {
                *s = prev[a] + trans(i - 1, a, b);
            }
            cur[b] = logsumexp_slice(&scratch) + scores.at2(i, b);
        }
        alphas.push(cur);
    }
    alphas
}

/// `beta[i][a]` = log-sum over suffixes starting after position `i` given
/// label `a` at `i` (emission at `i` excluded).
fn backward_betas(
    scores: &Tensor,
    trans: impl Fn(usize, usize, usize) -> f64,
    n: usize,
    v: usize,
) -> Vec<Vec<f64>> {
    let mut betas = vec![vec![0.0; v]; n];
    let mut scratch = vec![0.0; v];
    for i in (0..n - 1).rev() {
        for a in 0..v {
            for (b, s) in scratch.iter_mut().enumerate() {
                *s = trans(i, a, b) + scores.at2(i + 1, b) + betas[i + 1][b];
            }
            betas[i][a] = logsumexp_slice(&scratch);
        }
    }
    betas
}

/// Max-plus recursion with backpointers; ties broken toward the smaller
/// label id at every decision.
pub fn viterbi_exact(scores: &Tensor, trans: &Tensor) -> Result<(Vec<usize>, f64), CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    Ok(viterbi_unchecked(scores, |_, a, b| trans.at2(a, b), n, v))
}

pub fn viterbi_exact_seq(
    scores: &Tensor,
    blocks: &[Tensor],
) -> Result<(Vec<usize>, f64), CrfError> {
    let (n, v) = check_scores(scores)?;
    check_blocks(blocks, n, v)?;
    Ok(viterbi_unchecked(scores, |i, a, b| blocks[i].at2(a, b), n, v))
}

fn viterbi_unchecked(
    scores: &Tensor,
    trans: impl Fn(usize, usize, usize) -> f64,
    n: usize,
    v: usize,
) -> (Vec<usize>, f64) {
    let mut best = scores.row(0).to_vec();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let mut cur = vec![f64::NEG_INFINITY; v];
        let mut ptr = vec![0usize; v];
        for b in 0..v {
            let mut arg = 0;
            let mut val = f64::NEG_INFINITY;
            for a in 0..v {
                let cand = best[a] + trans(i - 1, a, b);
                if cand > val {
                    val = cand;
                    arg = a;
                }
            }
            cur[b] = val + scores.at2(i, b);
            ptr[b] = arg;
        }
        best = cur;
        back.push(ptr);
    }
    let mut last = 0;
    let mut score = f64::NEG_INFINITY;
    for (y, &s) in best.iter().enumerate() {
        if s > score {
            score = s;
            last = y;
        }
    }
    let mut path = vec![last];
    for ptr in back.iter().rev() {
        last = ptr[last];
        path.push(last);
    }
    path.reverse();
    (path, score)
}

/// Best path by exhaustive enumeration; ties go to the lexicographically
/// first (hence smallest-id) path, matching the Viterbi tie rule.
pub fn viterbi_bruteforce(
    scores: &Tensor,
    trans: &Tensor,
) -> Result<(Vec<usize>, f64), CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    guard_brute_force(n, v)?;
    let mut best_path = vec![0; n];
    let mut best = f64::NEG_INFINITY;
    for_each_path(n, v, |path| {
        let s = path_score_unchecked(scores, |_, a, b| trans.at2(a, b), path);
        if s > best {
            best = s;
            best_path.copy_from_slice(path);
        }
    });
    Ok((best_path, best))
}

/// Posterior marginals via forward-backward: unary `n×V` and one `V×V`
/// pairwise table per adjacent pair.
pub fn marginals(scores: &Tensor, trans: &Tensor) -> Result<(Tensor, Vec<Tensor>), CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    Ok(marginals_unchecked(scores, |_, a, b| trans.at2(a, b), n, v))
}

pub fn marginals_seq(
    scores: &Tensor,
    blocks: &[Tensor],
) -> Result<(Tensor, Vec<Tensor>), CrfError> {
    let (n, v) = check_scores(scores)?;
    check_blocks(blocks, n, v)?;
    Ok(marginals_unchecked(scores, |i, a, b| blocks[i].at2(a, b), n, v))
}

fn marginals_unchecked(
    scores: &Tensor,
    trans: impl Fn(usize, usize, usize) -> f64,
    n: usize,
    v: usize,
) -> (Tensor, Vec<Tensor>) {
    let alphas = forward_alphas(scores, &trans, n, v);
    let betas = backward_betas(scores, &trans, n, v);
    let log_z = logsumexp_slice(&alphas[n - 1]);
    let mut unary = vec![0.0; n * v];
    for i in 0..n {
        for y in 0..v {
            unary[i * v + y] = (alphas[i][y] + betas[i][y] - log_z).exp();
        }
    }
    let mut pairwise = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let mut block = vec![0.0; v * v];
        for a in 0..v {
            for b in 0..v {
                block[a * v + b] = (alphas[i][a]
                    + trans(i, a, b)
                    + scores.at2(i + 1, b)
                    + betas[i + 1][b]
                    - log_z)
                    .exp();
            }
        }
        pairwise.push(Tensor::new(vec![v, v], block));
    }
    (Tensor::new(vec![n, v], unary), pairwise)
}

/// Marginals by exhaustive path enumeration; oracle for [`marginals`].
pub fn marginals_bruteforce(
    scores: &Tensor,
    trans: &Tensor,
) -> Result<(Tensor, Vec<Tensor>), CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    guard_brute_force(n, v)?;
    let log_z = log_partition_bruteforce(scores, trans)?;
    let mut unary = vec![0.0; n * v];
    let mut pairwise = vec![vec![0.0; v * v]; n - 1];
    for_each_path(n, v, |path| {
        let w = (path_score_unchecked(scores, |_, a, b| trans.at2(a, b), path) - log_z).exp();
        for (i, &y) in path.iter().enumerate() {
            unary[i * v + y] += w;
        }
        for i in 0..n - 1 {
            pairwise[i][path[i] * v + path[i + 1]] += w;
        }
    });
    Ok((
        Tensor::new(vec![n, v], unary),
        pairwise
            .into_iter()
            .map(|b| Tensor::new(vec![v, v], b))
            .collect(),
    ))
}

/// Negative log-likelihood of `gold` plus its analytic gradient:
/// marginals minus gold indicator counts.
pub fn nll_and_grad(
    scores: &Tensor,
    trans: &Tensor,
    gold: &[usize],
) -> Result<(f64, Tensor, Tensor), CrfError> {
    let (n, v) = check_scores(scores)?;
    check_trans(trans, v)?;
    check_path(gold, n, v)?;
    let log_z = log_partition_forward(scores, trans)?;
    let gold_score = path_score_unchecked(scores, |_, a, b| trans.at2(a, b), gold);
    let (unary, pairwise) = marginals_unchecked(scores, |_, a, b| trans.at2(a, b), n, v);
    let mut grad_scores = unary.data().to_vec();
    for (i, &y) in gold.iter().enumerate() {
        grad_scores[i * v + y] -= 1.0;
    }
    let mut grad_trans = vec![0.0; v * v];
    for block in &pairwise {
        for (g, p) in grad_trans.iter_mut().zip(block.data()) {
            *g += p;
        }
    }
    for i in 1..n {
        grad_trans[gold[i - 1] * v + gold[i]] -= 1.0;
    }
    Ok((
        log_z - gold_score,
        Tensor::new(vec![n, v], grad_scores),
        Tensor::new(vec![v, v], grad_trans),
    ))
}

/// Forward partition, Viterbi path, and path score in one call.
pub fn solve(scores: &Tensor, trans: &Tensor) -> Result<CrfResult, CrfError> {
    let log_partition = log_partition_forward(scores, trans)?;
    let (best_path, best_path_score) = viterbi_exact(scores, trans)?;
    debug_assert!(best_path_score <= log_partition + 1e-9);
    Ok(CrfResult {
        log_partition,
        best_path,
        best_path_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_difference, max_grad_mismatch};
    use crate::tensor::softmax_slice;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, v: usize) -> (Tensor, Tensor) {
        let scores = Tensor::uniform(vec![n, v], -2.0, 2.0, rng);
        let trans = Tensor::uniform(vec![v, v], -1.5, 1.5, rng);
        (scores, trans)
    }

    #[test]
    fn path_score_single_position() {
        let scores = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]);
        let trans = Tensor::zeros(vec![3, 3]);
        assert_eq!(path_score(&scores, &trans, &[2]).unwrap(), 2.0);
    }

    #[test]
    fn path_score_all_zero_instance() {
        let scores = Tensor::zeros(vec![4, 3]);
        let trans = Tensor::zeros(vec![3, 3]);
        assert_eq!(path_score(&scores, &trans, &[0, 2, 1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn path_score_matches_term_by_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (scores, trans) = random_instance(&mut rng, 3, 4);
        let path = [2, 0, 3];
        let want = scores.at2(0, 2)
            + trans.at2(2, 0)
            + scores.at2(1, 0)
            + trans.at2(0, 3)
            + scores.at2(2, 3);
        let got = path_score(&scores, &trans, &path).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn path_score_rejects_out_of_range_label() {
        let scores = Tensor::zeros(vec![2, 3]);
        let trans = Tensor::zeros(vec![3, 3]);
        assert!(matches!(
            path_score(&scores, &trans, &[0, 3]),
            Err(CrfError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn brute_force_partition_trivial_cases() {
        let scores = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]);
        let trans = Tensor::zeros(vec![3, 3]);
        let want = logsumexp_slice(scores.row(0));
        assert!((log_partition_bruteforce(&scores, &trans).unwrap() - want).abs() < 1e-12);

        let scores = Tensor::zeros(vec![4, 5]);
        let trans = Tensor::zeros(vec![5, 5]);
        let want = 4.0 * 5.0f64.ln();
        assert!((log_partition_bruteforce(&scores, &trans).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn brute_force_refuses_oversized_instances() {
        let scores = Tensor::zeros(vec![10, 8]);
        let trans = Tensor::zeros(vec![8, 8]);
        assert!(matches!(
            log_partition_bruteforce(&scores, &trans),
            Err(CrfError::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn forward_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.gen_range(1..=5);
            let v = rng.gen_range(1..=6);
            let (scores, trans) = random_instance(&mut rng, n, v);
            let brute = log_partition_bruteforce(&scores, &trans).unwrap();
            let fwd = log_partition_forward(&scores, &trans).unwrap();
            assert!((brute - fwd).abs() < 1e-9, "n={n} v={v}: {brute} vs {fwd}");
        }
    }

    #[test]
    fn forward_seq_matches_brute_force_seq() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let n = rng.gen_range(2..=5);
            let v = rng.gen_range(1..=5);
            let scores = Tensor::uniform(vec![n, v], -2.0, 2.0, &mut rng);
            let blocks: Vec<Tensor> = (0..n - 1)
                .map(|_| Tensor::uniform(vec![v, v], -1.0, 1.0, &mut rng))
                .collect();
            let brute = log_partition_bruteforce_seq(&scores, &blocks).unwrap();
            let fwd = log_partition_forward_seq(&scores, &blocks).unwrap();
            assert!((brute - fwd).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_decouples_when_transitions_are_zero() {
        // Ties must go to the smaller label id.
        let scores = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, -1.0, 2.0, 2.0]);
        let trans = Tensor::zeros(vec![3, 3]);
        let (path, score) = viterbi_exact(&scores, &trans).unwrap();
        assert_eq!(path, vec![0, 1]);
        assert!((score - 3.0).abs() < 1e-12);
    }

    #[test]
    fn viterbi_single_position_is_argmax() {
        let scores = Tensor::new(vec![1, 4], vec![0.0, 3.0, -1.0, 3.0]);
        let trans = Tensor::zeros(vec![4, 4]);
        let (path, score) = viterbi_exact(&scores, &trans).unwrap();
        assert_eq!(path, vec![1]);
        assert_eq!(score, 3.0);
    }

    #[test]
    fn viterbi_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = rng.gen_range(1..=5);
            let v = rng.gen_range(1..=6);
            let (scores, trans) = random_instance(&mut rng, n, v);
            let (path, score) = viterbi_exact(&scores, &trans).unwrap();
            let (bpath, bscore) = viterbi_bruteforce(&scores, &trans).unwrap();
            assert!((score - bscore).abs() < 1e-9);
            assert_eq!(path, bpath);
            let rescored = path_score(&scores, &trans, &path).unwrap();
            assert!((rescored - score).abs() < 1e-9);
        }
    }

    #[test]
    fn marginals_single_position_is_softmax() {
        let scores = Tensor::new(vec![1, 3], vec![0.2, 1.4, -0.6]);
        let trans = Tensor::zeros(vec![3, 3]);
        let (unary, pairwise) = marginals(&scores, &trans).unwrap();
        assert!(pairwise.is_empty());
        let mut want = scores.row(0).to_vec();
        softmax_slice(&mut want);
        for (a, b) in unary.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_uniform_on_all_zero_instance() {
        let scores = Tensor::zeros(vec![3, 4]);
        let trans = Tensor::zeros(vec![4, 4]);
        let (unary, _) = marginals(&scores, &trans).unwrap();
        for x in unary.data() {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_match_enumeration_and_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (scores, trans) = random_instance(&mut rng, 3, 4);
        let (unary, pairwise) = marginals(&scores, &trans).unwrap();
        let (bunary, bpairwise) = marginals_bruteforce(&scores, &trans).unwrap();
        for (a, b) in unary.data().iter().zip(bunary.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (p, bp) in pairwise.iter().zip(&bpairwise) {
            for (a, b) in p.data().iter().zip(bp.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // Unary rows sum to 1; pairwise row/col sums match adjacent unaries.
        for i in 0..3 {
            let s: f64 = unary.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for (i, block) in pairwise.iter().enumerate() {
            let total: f64 = block.data().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            for a in 0..4 {
                let row_sum: f64 = (0..4).map(|b| block.at2(a, b)).sum();
                assert!((row_sum - unary.at2(i, a)).abs() < 1e-9);
            }
            for b in 0..4 {
                let col_sum: f64 = (0..4).map(|a| block.at2(a, b)).sum();
                assert!((col_sum - unary.at2(i + 1, b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nll_near_zero_for_dominant_gold_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut_scores, trans) = random_instance(&mut rng, 3, 4);
        let gold = [1, 2, 0];
        let mut data = mut_scores.data().to_vec();
        for (i, &y) in gold.iter().enumerate() {
            data[i * 4 + y] += 1e3;
        }
        let scores = Tensor::new(vec![3, 4], data);
        let (nll, _, _) = nll_and_grad(&scores, &trans, &gold).unwrap();
        assert!(nll.abs() < 1e-6, "nll = {nll}");
    }

    #[test]
    fn nll_of_uniform_instance_is_n_ln_v() {
        let scores = Tensor::zeros(vec![4, 5]);
        let trans = Tensor::zeros(vec![5, 5]);
        let (nll, _, _) = nll_and_grad(&scores, &trans, &[0, 1, 2, 3]).unwrap();
        assert!((nll - 4.0 * 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (scores, trans) = random_instance(&mut rng, 4, 5);
        let gold = [3, 0, 4, 1];
        let (_, grad_scores, grad_trans) = nll_and_grad(&scores, &trans, &gold).unwrap();

        let fd_scores = finite_difference(
            |xs| {
                let s = Tensor::new(vec![4, 5], xs.to_vec());
                nll_and_grad(&s, &trans, &gold).unwrap().0
            },
            scores.data(),
            1e-5,
        );
        assert!(max_grad_mismatch(grad_scores.data(), &fd_scores) < 1e-4);

        let fd_trans = finite_difference(
            |xs| {
                let m = Tensor::new(vec![5, 5], xs.to_vec());
                nll_and_grad(&scores, &m, &gold).unwrap().0
            },
            trans.data(),
            1e-5,
        );
        assert!(max_grad_mismatch(grad_trans.data(), &fd_trans) < 1e-4);
    }

    #[test]
    fn nll_is_nonnegative_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let n = rng.gen_range(1..=5);
            let v = rng.gen_range(1..=6);
            let (scores, trans) = random_instance(&mut rng, n, v);
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
            let (nll, _, _) = nll_and_grad(&scores, &trans, &gold).unwrap();
            assert!(nll >= -1e-9);
        }
    }

    #[test]
    fn solve_satisfies_partition_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (scores, trans) = random_instance(&mut rng, 5, 6);
        let res = solve(&scores, &trans).unwrap();
        assert!(res.best_path_score <= res.log_partition + 1e-9);
        assert!(res.best_path.iter().all(|&y| y < 6));
    }

    proptest! {
        /// Adding c to every entry of one scores row shifts log Z by c and
        /// leaves the Viterbi argmax unchanged.
        #[test]
        fn row_shift_property(seed in 0u64..500, c in -3.0f64..3.0, row in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (scores, trans) = random_instance(&mut rng, 3, 4);
            let base_z = log_partition_forward(&scores, &trans).unwrap();
            let (base_path, _) = viterbi_exact(&scores, &trans).unwrap();
            let mut data = scores.data().to_vec();
            for y in 0..4 {
                data[row * 4 + y] += c;
            }
            let shifted = Tensor::new(vec![3, 4], data);
            let z = log_partition_forward(&shifted, &trans).unwrap();
            let (path, _) = viterbi_exact(&shifted, &trans).unwrap();
            prop_assert!((z - (base_z + c)).abs() < 1e-9);
            prop_assert_eq!(path, base_path);
        }
    }
}
