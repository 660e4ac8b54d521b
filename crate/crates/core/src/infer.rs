//! Inference: target-length prediction, parallel argmax and beam-Viterbi
//! decoding, multi-length candidate generation, and teacher rescoring.

use crate::batch;
use crate::crf::approx::{beam_viterbi, build_beam, Transitions};
use crate::crf::CrfError;
use crate::model::{CrfComponents, Dropout, ModelError, NartCrfModel, Variant};
use crate::tensor::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error("model has no CRF components; cannot decode in crf mode")]
    NoCrf,
    #[error("multi-length decoding needs a rescorer")]
    NoRescorer,
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("rescorer model must be an autoregressive teacher")]
    NotATeacher,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Deterministic target-length rule `T' = T + C`, with candidate lengths
/// `(T+C)-B ..= (T+C)+B` clamped into `[1, max_len]`.
#[derive(Debug, Clone, Copy)]
pub struct LengthRule {
    pub bias: i64,
    pub half_width: usize,
}

impl LengthRule {
    pub fn new(bias: i64, half_width: usize) -> Self {
        Self { bias, half_width }
    }

    pub fn predict(&self, src_len: usize, max_len: usize) -> usize {
        clamp_len(src_len as i64 + self.bias, max_len)
    }

    /// Distinct clamped candidate lengths, ascending; at most `2B+1`.
    pub fn candidates(&self, src_len: usize, max_len: usize) -> Vec<usize> {
        let center = src_len as i64 + self.bias;
        let b = self.half_width as i64;
        let mut out = Vec::with_capacity(2 * self.half_width + 1);
        for t in center - b..=center + b {
            let t = clamp_len(t, max_len);
            if out.last() != Some(&t) {
                out.push(t);
            }
        }
        out
    }

    /// `C = round(mean(target_len - source_len))` over a corpus.
    pub fn fit_bias(pairs: &[(Vec<usize>, Vec<usize>)]) -> i64 {
        if pairs.is_empty() {
            return 0;
        }
        let sum: i64 = pairs
            .iter()
            .map(|(s, t)| t.len() as i64 - s.len() as i64)
            .sum();
        (sum as f64 / pairs.len() as f64).round() as i64
    }
}

fn clamp_len(t: i64, max_len: usize) -> usize {
    t.clamp(1, max_len as i64) as usize
}

/// A decoded hypothesis at one candidate length.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub decode_score: f64,
    pub rescore: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Nar,
    Crf { k: usize },
}

/// Per-position argmax with ties toward the smaller id.
pub fn decode_nar_tokens(scores: &Tensor) -> Vec<usize> {
    let mut out = Vec::with_capacity(scores.rows());
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let mut arg = 0;
        let mut best = f64::NEG_INFINITY;
        for (y, &s) in row.iter().enumerate() {
            if s > best {
                best = s;
                arg = y;
            }
        }
        out.push(arg);
    }
    out
}

/// Emission scores and decoder states for one source at one target length.
pub fn forward_scores(
    model: &NartCrfModel,
    src: &[usize],
    t_prime: usize,
) -> Result<(Tensor, Tensor), InferError> {
    let tape = Tape::new();
    let ctx = model.nart.encode(&tape, src, &mut Dropout::off())?;
    let hidden = model
        .nart
        .decode_hidden(&tape, ctx, t_prime, &mut Dropout::off())?;
    let scores = model.nart.label_scores(&tape, hidden)?;
    Ok((scores.value(), hidden.value()))
}

/// The CRF decode stage on precomputed emissions: beam construction with
/// cropped transition blocks, then max-plus DP. This is the part whose
/// cost scales as `O(n·k²)`.
pub fn crf_decode_stage(
    scores: &Tensor,
    crf: &CrfComponents,
    hidden: &Tensor,
    k: usize,
) -> Result<(Vec<usize>, f64), InferError> {
    let transitions = match &crf.dynamic {
        None => Transitions::Static(&crf.factors),
        Some(net) => Transitions::Dynamic {
            factors: &crf.factors,
            net,
            hidden,
        },
    };
    let lattice = build_beam(scores, k, None, &transitions)?;
    Ok(beam_viterbi(&lattice)?)
}

/// One-pass parallel decode; score is the sum of per-position log-probs.
pub fn decode_nar(
    model: &NartCrfModel,
    src: &[usize],
    t_prime: usize,
) -> Result<Candidate, InferError> {
    let (scores, _) = forward_scores(model, src, t_prime)?;
    let tokens = decode_nar_tokens(&scores);
    let mut decode_score = 0.0;
    for (i, &y) in tokens.iter().enumerate() {
        let row = scores.row(i);
        decode_score += row[y] - crate::tensor::logsumexp_slice(row);
    }
    Ok(Candidate {
        tokens,
        decode_score,
        rescore: None,
    })
}

/// Beam-Viterbi decode; score is the unnormalized best path score.
pub fn decode_crf(
    model: &NartCrfModel,
    src: &[usize],
    t_prime: usize,
    k: usize,
) -> Result<Candidate, InferError> {
    let crf = model.crf.as_ref().ok_or(InferError::NoCrf)?;
    let (scores, hidden) = forward_scores(model, src, t_prime)?;
    let (tokens, decode_score) = crf_decode_stage(&scores, crf, &hidden, k)?;
    Ok(Candidate {
        tokens,
        decode_score,
        rescore: None,
    })
}

/// Picks the candidate maximizing the scorer; ties prefer the shorter,
/// then lexicographically smaller token sequence. Fills `rescore`.
pub fn rescore_select(
    mut candidates: Vec<Candidate>,
    scorer: impl Fn(&[usize]) -> Result<f64, InferError>,
) -> Result<Candidate, InferError> {
    if candidates.is_empty() {
        return Err(InferError::EmptyCandidates);
    }
    for cand in candidates.iter_mut() {
        cand.rescore = Some(scorer(&cand.tokens)?);
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (&candidates[i], &candidates[best]);
        let (sa, sb) = (a.rescore.unwrap(), b.rescore.unwrap());
        let better = sa > sb
            || (sa == sb
                && (a.tokens.len() < b.tokens.len()
                    || (a.tokens.len() == b.tokens.len() && a.tokens < b.tokens)));
        if better {
            best = i;
        }
    }
    Ok(candidates.swap_remove(best))
}

/// Teacher log-probability scorer, length-normalized by default so longer
/// candidates are not penalized for having more terms.
pub struct TeacherScorer<'a> {
    teacher: &'a NartCrfModel,
    pub length_normalize: bool,
}

impl<'a> TeacherScorer<'a> {
    pub fn new(teacher: &'a NartCrfModel) -> Result<Self, InferError> {
        if teacher.config().variant != Variant::AutoregressiveTeacher {
            return Err(InferError::NotATeacher);
        }
        Ok(Self {
            teacher,
            length_normalize: true,
        })
    }

    pub fn score(&self, src: &[usize], tokens: &[usize]) -> Result<f64, InferError> {
        if tokens.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let lp = self.teacher.nart.teacher_logprob(src, tokens)?;
        Ok(if self.length_normalize {
            lp / tokens.len() as f64
        } else {
            lp
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub rule: LengthRule,
    pub length_normalize: bool,
}

/// Decodes one source: single length when `B = 0`, otherwise one
/// candidate per distinct length rescored by the teacher.
pub fn decode_sentence(
    model: &NartCrfModel,
    teacher: Option<&NartCrfModel>,
    src: &[usize],
    opts: &DecodeOptions,
) -> Result<Candidate, InferError> {
    let max_len = model.config().max_len;
    let decode_one = |t: usize| match opts.mode {
        DecodeMode::Nar => decode_nar(model, src, t),
        DecodeMode::Crf { k } => decode_crf(model, src, t, k),
    };
    if opts.rule.half_width == 0 {
        return decode_one(opts.rule.predict(src.len(), max_len));
    }
    let lengths = opts.rule.candidates(src.len(), max_len);
    let candidates: Vec<Candidate> = lengths
        .iter()
        .map(|&t| decode_one(t))
        .collect::<Result<_, _>>()?;
    let teacher = teacher.ok_or(InferError::NoRescorer)?;
    let mut scorer = TeacherScorer::new(teacher)?;
    scorer.length_normalize = opts.length_normalize;
    rescore_select(candidates, |tokens| scorer.score(src, tokens))
}

/// Decodes a list of sources; sentences are independent and run through
/// the data-parallel map, collected in input order.
pub fn decode_corpus(
    model: &NartCrfModel,
    teacher: Option<&NartCrfModel>,
    sources: &[Vec<usize>],
    opts: &DecodeOptions,
) -> Result<Vec<Candidate>, InferError> {
    batch::map_items(sources, |src| decode_sentence(model, teacher, src, opts))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::TransitionFactors;
    use crate::model::{Arch, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_model(arch: Arch, vocab: usize, seed: u64) -> NartCrfModel {
        let cfg = ModelConfig {
            num_layers: 1,
            d_model: 16,
            num_heads: 2,
            d_ffn: 32,
            vocab_size: vocab,
            max_len: 20,
            variant: arch.variant(),
            dropout: 0.0,
        };
        NartCrfModel::new(arch, cfg, 4, seed).unwrap()
    }

    #[test]
    fn predict_length_applies_bias_and_clamps() {
        let max_len = 64;
        assert_eq!(LengthRule::new(2, 0).predict(10, max_len), 12);
        assert_eq!(LengthRule::new(0, 0).predict(7, max_len), 7);
        assert_eq!(LengthRule::new(-5, 0).predict(3, max_len), 1);
        assert_eq!(LengthRule::new(100, 0).predict(10, max_len), 64);
    }

    #[test]
    fn candidate_lengths_cover_the_window() {
        let rule = LengthRule::new(0, 4);
        assert_eq!(rule.candidates(10, 64).len(), 9);
        assert_eq!(LengthRule::new(0, 0).candidates(10, 64), vec![10]);
        assert_eq!(rule.candidates(2, 64), vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn candidate_lengths_are_unique_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rule = LengthRule::new(rng.gen_range(-6..6), rng.gen_range(0..6));
            let max_len = rng.gen_range(4..20);
            let lens = rule.candidates(rng.gen_range(1..30), max_len);
            let mut dedup = lens.clone();
            dedup.dedup();
            assert_eq!(lens, dedup);
            assert!(lens.iter().all(|&t| (1..=max_len).contains(&t)));
        }
    }

    #[test]
    fn fit_bias_rounds_mean_length_difference() {
        let pairs = vec![
            (vec![0; 4], vec![0; 6]),
            (vec![0; 5], vec![0; 8]),
            (vec![0; 6], vec![0; 8]),
        ];
        // diffs 2, 3, 2 -> mean 2.33 -> 2
        assert_eq!(LengthRule::fit_bias(&pairs), 2);
    }

    #[test]
    fn decode_nar_tokens_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = Tensor::uniform(vec![4, 5], -2.0, 2.0, &mut rng);
        let got = decode_nar_tokens(&scores);
        for (i, &y) in got.iter().enumerate() {
            let mut ids: Vec<usize> = (0..5).collect();
            ids.sort_by(|&a, &b| scores.at2(i, b).total_cmp(&scores.at2(i, a)).then(a.cmp(&b)));
            assert_eq!(y, ids[0]);
        }
    }

    #[test]
    fn decode_nar_tokens_one_hot_and_tie_cases() {
        let one_hot = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(decode_nar_tokens(&one_hot), vec![1, 2]);
        let flat = Tensor::zeros(vec![3, 4]);
        assert_eq!(decode_nar_tokens(&flat), vec![0, 0, 0]);
    }

    #[test]
    fn decode_crf_without_crf_components_is_refused() {
        let model = micro_model(Arch::Nart, 8, 1);
        assert!(matches!(
            decode_crf(&model, &[3, 4], 3, 4),
            Err(InferError::NoCrf)
        ));
    }

    #[test]
    fn decode_crf_is_deterministic() {
        let model = micro_model(Arch::NartCrf, 8, 2);
        let a = decode_crf(&model, &[3, 4, 5], 4, 4).unwrap();
        let b = decode_crf(&model, &[3, 4, 5], 4, 4).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.decode_score.to_bits(), b.decode_score.to_bits());
    }

    #[test]
    fn zeroed_transitions_with_full_beam_reduce_to_nar_decode() {
        let mut model = micro_model(Arch::NartCrf, 8, 3);
        let v = model.config().vocab_size;
        let d_t = model.d_t;
        model.crf.as_mut().unwrap().factors = TransitionFactors {
            e1: Tensor::zeros(vec![v, d_t]).with_grad(),
            e2: Tensor::zeros(vec![v, d_t]).with_grad(),
        };
        let src = [3, 4, 5, 6];
        let crf_out = decode_crf(&model, &src, 5, v).unwrap();
        let nar_out = decode_nar(&model, &src, 5).unwrap();
        assert_eq!(crf_out.tokens, nar_out.tokens);
    }

    #[test]
    fn rescore_select_single_candidate_is_identity() {
        let cand = Candidate {
            tokens: vec![3, 4],
            decode_score: 0.0,
            rescore: None,
        };
        let out = rescore_select(vec![cand.clone()], |_| Ok(1.0)).unwrap();
        assert_eq!(out.tokens, cand.tokens);
        assert_eq!(out.rescore, Some(1.0));
    }

    #[test]
    fn rescore_select_constant_scorer_prefers_shortest() {
        let mk = |tokens: Vec<usize>| Candidate {
            tokens,
            decode_score: 0.0,
            rescore: None,
        };
        let out = rescore_select(
            vec![mk(vec![5, 6, 7]), mk(vec![4, 9]), mk(vec![4, 3])],
            |_| Ok(0.25),
        )
        .unwrap();
        // Two two-token candidates tie on length; lexicographic order
        // breaks the tie.
        assert_eq!(out.tokens, vec![4, 3]);
    }

    #[test]
    fn rescore_select_maximizes_the_scorer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let cands: Vec<Candidate> = (0..6)
                .map(|_| Candidate {
                    tokens: (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..9)).collect(),
                    decode_score: 0.0,
                    rescore: None,
                })
                .collect();
            let scorer = |t: &[usize]| Ok(t.iter().sum::<usize>() as f64 * 0.1);
            let scores: Vec<f64> = cands
                .iter()
                .map(|c| c.tokens.iter().sum::<usize>() as f64 * 0.1)
                .collect();
            let best = rescore_select(cands, scorer).unwrap();
            let best_score = best.rescore.unwrap();
            for s in scores {
                assert!(best_score >= s);
            }
        }
    }

    #[test]
    fn rescore_select_rejects_empty_input() {
        assert!(matches!(
            rescore_select(vec![], |_| Ok(0.0)),
            Err(InferError::EmptyCandidates)
        ));
    }

    #[test]
    fn teacher_scorer_requires_teacher_variant() {
        let model = micro_model(Arch::Nart, 8, 4);
        assert!(matches!(
            TeacherScorer::new(&model),
            Err(InferError::NotATeacher)
        ));
    }

    #[test]
    fn multi_length_decode_requires_rescorer() {
        let model = micro_model(Arch::NartCrf, 8, 5);
        let opts = DecodeOptions {
            mode: DecodeMode::Nar,
            rule: LengthRule::new(0, 2),
            length_normalize: true,
        };
        assert!(matches!(
            decode_sentence(&model, None, &[3, 4], &opts),
            Err(InferError::NoRescorer)
        ));
    }

    #[test]
    fn multi_length_decode_with_teacher_returns_a_candidate_length() {
        let model = micro_model(Arch::NartCrf, 8, 6);
        let teacher = micro_model(Arch::Teacher, 8, 7);
        let opts = DecodeOptions {
            mode: DecodeMode::Crf { k: 4 },
            rule: LengthRule::new(0, 2),
            length_normalize: true,
        };
        let src = [3, 4, 5];
        let out = decode_sentence(&model, Some(&teacher), &src, &opts).unwrap();
        let lens = opts.rule.candidates(src.len(), model.config().max_len);
        assert!(lens.contains(&out.tokens.len()));
        assert!(out.rescore.is_some());
    }

    #[test]
    fn decode_corpus_matches_sentence_by_sentence() {
        let model = micro_model(Arch::NartCrf, 8, 8);
        let opts = DecodeOptions {
            mode: DecodeMode::Crf { k: 4 },
            rule: LengthRule::new(1, 0),
            length_normalize: true,
        };
        let sources = vec![vec![3, 4], vec![5, 6, 7], vec![4]];
        let batch_out = decode_corpus(&model, None, &sources, &opts).unwrap();
        for (src, got) in sources.iter().zip(&batch_out) {
            let single = decode_sentence(&model, None, src, &opts).unwrap();
            assert_eq!(got.tokens, single.tokens);
        }
    }
}
