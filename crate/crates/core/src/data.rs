//! Vocabulary handling, corpus I/O, the synthetic multimodal task, and
//! corpus-level BLEU.
//!
//! The synthetic task reifies the output-consistency failure of purely
//! parallel decoding: every source symbol has several synonymous target
//! phrases of varying length, so a per-position argmax happily mixes
//! tokens from different synonyms while a structured decoder must commit
//! to one phrase per slot.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{path}:{line}: empty sentence")]
    EmptyLine { path: String, line: usize },
    #[error("list length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sentence of {len} tokens exceeds max_len {max}")]
    Overlong { len: usize, max: usize },
    #[error("unknown source symbol {0:?}")]
    UnknownSourceSymbol(String),
    #[error("no hypotheses given")]
    EmptyHypotheses,
    #[error("invalid task spec: {0}")]
    BadSpec(String),
    #[error("malformed key=value file: {0}")]
    BadKeyValue(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Word,
    Char,
}

impl TokenMode {
    pub fn tokenize(&self, line: &str) -> Vec<String> {
        match self {
            TokenMode::Word => line.split_whitespace().map(str::to_string).collect(),
            TokenMode::Char => line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

/// Token/id bijection with pad=0, eos=1, unk=2 fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Reserved ids plus the given tokens in order (duplicates ignored).
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut ordered: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for t in tokens {
            if RESERVED.contains(&t) || seen.contains_key(t) {
                continue;
            }
            seen.insert(t, ());
            ordered.push(t.to_string());
        }
        Self::from_ordered(ordered)
    }

    /// Frequency-ordered assignment after the reserved ids; frequency ties
    /// broken lexicographically.
    pub fn build(corpus: &str, mode: TokenMode) -> Result<Self, DataError> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in corpus.lines() {
            for tok in mode.tokenize(line) {
                any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(DataError::EmptyCorpus);
        }
        let mut items: Vec<(String, usize)> = counts.into_iter().collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut ordered: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        ordered.extend(items.into_iter().map(|(t, _)| t));
        Ok(Self::from_ordered(ordered))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Ids back to tokens, dropping pad and eos.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != EOS_ID)
            .map(|&id| self.tokens[id].clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(str::to_string)
        {
            return Err(DataError::BadKeyValue(format!(
                "{} is not a vocab file",
                path.display()
            )));
        }
        Ok(Self::from_ordered(tokens))
    }
}

/// Encoded sentence pairs.
#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl ParallelCorpus {
    pub fn encode(
        src_lines: &[Vec<String>],
        tgt_lines: &[Vec<String>],
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<Self, DataError> {
        if src_lines.len() != tgt_lines.len() {
            return Err(DataError::LengthMismatch {
                left: src_lines.len(),
                right: tgt_lines.len(),
            });
        }
        if src_lines.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut pairs = Vec::with_capacity(src_lines.len());
        for (src, tgt) in src_lines.iter().zip(tgt_lines) {
            if src.is_empty() || tgt.is_empty() {
                return Err(DataError::EmptyCorpus);
            }
            for side in [src, tgt] {
                if side.len() > max_len {
                    return Err(DataError::Overlong {
                        len: side.len(),
                        max: max_len,
                    });
                }
            }
            pairs.push((vocab.encode(src), vocab.encode(tgt)));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One sentence per line, tokens joined by single spaces.
pub fn write_sentences(path: &Path, sentences: &[Vec<String>]) -> Result<(), DataError> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            return Err(DataError::EmptyLine {
                path: path.display().to_string(),
                line: i + 1,
            });
        }
        out.push(toks);
    }
    if out.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(out)
}

/// Spec of the synthetic multimodal task: each source symbol has `modes`
/// synonymous target phrases of 1..=3 tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalTaskSpec {
    pub symbols: usize,
    pub modes: usize,
    pub phrase_len_min: usize,
    pub phrase_len_max: usize,
    pub sent_len_min: usize,
    pub sent_len_max: usize,
    pub seed: u64,
}

impl Default for MultimodalTaskSpec {
    fn default() -> Self {
        Self {
            symbols: 20,
            modes: 3,
            phrase_len_min: 1,
            phrase_len_max: 2,
            sent_len_min: 3,
            sent_len_max: 10,
            seed: 2024,
        }
    }
}

impl MultimodalTaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.symbols == 0 || self.modes == 0 {
            return Err(DataError::BadSpec("symbols and modes must be positive".into()));
        }
        if self.phrase_len_min == 0
            || self.phrase_len_min > self.phrase_len_max
            || self.phrase_len_max > 3
        {
            return Err(DataError::BadSpec(
                "phrase lengths must satisfy 1 <= min <= max <= 3".into(),
            ));
        }
        if self.sent_len_min == 0 || self.sent_len_min > self.sent_len_max {
            return Err(DataError::BadSpec("bad sentence length range".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("symbols".into(), self.symbols.to_string()),
            ("modes".into(), self.modes.to_string()),
            ("phrase_len_min".into(), self.phrase_len_min.to_string()),
            ("phrase_len_max".into(), self.phrase_len_max.to_string()),
            ("sent_len_min".into(), self.sent_len_min.to_string()),
            ("sent_len_max".into(), self.sent_len_max.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_kv(kv: &HashMap<String, String>) -> Result<Self, DataError> {
        let get = |key: &str| -> Result<u64, DataError> {
            kv.get(key)
                .ok_or_else(|| DataError::BadKeyValue(format!("missing key {key}")))?
                .parse()
                .map_err(|e| DataError::BadKeyValue(format!("{key}: {e}")))
        };
        let spec = Self {
            symbols: get("symbols")? as usize,
            modes: get("modes")? as usize,
            phrase_len_min: get("phrase_len_min")? as usize,
            phrase_len_max: get("phrase_len_max")? as usize,
            sent_len_min: get("sent_len_min")? as usize,
            sent_len_max: get("sent_len_max")? as usize,
            seed: get("seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Instantiated task: the synonym groups and the vocabulary covering them.
#[derive(Debug, Clone)]
pub struct MultimodalTask {
    pub spec: MultimodalTaskSpec,
    /// `groups[s][m]` is the m-th synonym phrase of source symbol `s`.
    pub groups: Vec<Vec<Vec<String>>>,
    pub vocab: Vocab,
}

impl MultimodalTask {
    /// Deterministically derives the synonym groups from the spec seed.
    /// Every phrase uses globally unique tokens, so mixed-mode outputs are
    /// always detectable.
    pub fn build(spec: MultimodalTaskSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut groups = Vec::with_capacity(spec.symbols);
        let mut all_tokens: Vec<String> = (0..spec.symbols).map(source_symbol).collect();
        for g in 0..spec.symbols {
            let mut phrases = Vec::with_capacity(spec.modes);
            for m in 0..spec.modes {
                let len = rng.gen_range(spec.phrase_len_min..=spec.phrase_len_max);
                let phrase: Vec<String> =
                    (0..len).map(|w| format!("g{g:02}m{m}w{w}")).collect();
                all_tokens.extend(phrase.iter().cloned());
                phrases.push(phrase);
            }
            groups.push(phrases);
        }
        let vocab = Vocab::from_tokens(all_tokens.iter().map(String::as_str));
        Ok(Self { spec, groups, vocab })
    }

    /// Samples sentence pairs: uniform source symbols, one uniformly
    /// chosen synonym phrase per slot. `stream` separates train/test draws.
    pub fn sample(&self, count: usize, stream: u64) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ stream);
        let mut srcs = Vec::with_capacity(count);
        let mut tgts = Vec::with_capacity(count);
        for _ in 0..count {
            let len = rng.gen_range(self.spec.sent_len_min..=self.spec.sent_len_max);
            let mut src = Vec::with_capacity(len);
            let mut tgt = Vec::new();
            for _ in 0..len {
                let s = rng.gen_range(0..self.spec.symbols);
                src.push(source_symbol(s));
                let m = rng.gen_range(0..self.spec.modes);
                tgt.extend(self.groups[s][m].iter().cloned());
            }
            srcs.push(src);
            tgts.push(tgt);
        }
        (srcs, tgts)
    }

    fn symbol_index(&self, token: &str) -> Result<usize, DataError> {
        token
            .strip_prefix('x')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&s| s < self.spec.symbols)
            .ok_or_else(|| DataError::UnknownSourceSymbol(token.to_string()))
    }

    /// True when the hypothesis splits into exactly one complete synonym
    /// phrase per source slot, in order.
    pub fn is_consistent(&self, src: &[String], hyp: &[String]) -> Result<bool, DataError> {
        let slots: Vec<usize> = src
            .iter()
            .map(|t| self.symbol_index(t))
            .collect::<Result<_, _>>()?;
        // reachable[p] = prefix of `hyp` of length p is a valid segmentation
        // of the slots consumed so far.
        let mut reachable = vec![false; hyp.len() + 1];
        reachable[0] = true;
        for &s in &slots {
            let mut next = vec![false; hyp.len() + 1];
            for p in 0..=hyp.len() {
                if !reachable[p] {
                    continue;
                }
                for phrase in &self.groups[s] {
                    let end = p + phrase.len();
                    if end <= hyp.len() && hyp[p..end] == phrase[..] {
                        next[end] = true;
                    }
                }
            }
            reachable = next;
        }
        Ok(reachable[hyp.len()])
    }

    /// Fraction of hypotheses that are consistent with their sources.
    pub fn consistency_rate(
        &self,
        sources: &[Vec<String>],
        hypotheses: &[Vec<String>],
    ) -> Result<f64, DataError> {
        if hypotheses.is_empty() {
            return Err(DataError::EmptyHypotheses);
        }
        if sources.len() != hypotheses.len() {
            return Err(DataError::LengthMismatch {
                left: sources.len(),
                right: hypotheses.len(),
            });
        }
        let mut ok = 0usize;
        for (src, hyp) in sources.iter().zip(hypotheses) {
            if self.is_consistent(src, hyp)? {
                ok += 1;
            }
        }
        Ok(ok as f64 / hypotheses.len() as f64)
    }
}

fn source_symbol(s: usize) -> String {
    format!("x{s:02}")
}

/// Corpus-level BLEU-4: geometric mean of clipped n-gram precisions times
/// the brevity penalty, scaled to [0, 100]. No smoothing; orders with no
/// candidate n-grams at all are left out of the mean; an order with
/// candidates but zero matches yields 0.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, DataError> {
    if hypotheses.len() != references.len() {
        return Err(DataError::LengthMismatch {
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(DataError::EmptyHypotheses);
    }
    let max_order = 4;
    let mut matched = vec![0u64; max_order];
    let mut total = vec![0u64; max_order];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_order {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            if reference.len() >= n {
                for w in reference.windows(n) {
                    *ref_counts.entry(w).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
            for w in hyp.windows(n) {
                *hyp_counts.entry(w).or_insert(0) += 1;
            }
            for (gram, count) in hyp_counts {
                total[n - 1] += count;
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..max_order {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * precision)
}

/// key = value text files (configs, task specs).
pub mod kv {
    use super::DataError;
    use std::collections::HashMap;
    use std::fs;
    use std::path::Path;

    pub fn write(path: &Path, pairs: &[(String, String)]) -> Result<(), DataError> {
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = super::writeln_kv(&mut out, k, v);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<HashMap<String, String>, DataError> {
        let text = fs::read_to_string(path)?;
        let mut out = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(DataError::BadKeyValue(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    i + 1
                )));
            };
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(out)
    }
}

fn writeln_kv(out: &mut String, k: &str, v: &str) -> std::fmt::Result {
    writeln!(out, "{k} = {v}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_vocab_orders_by_frequency_then_token() {
        let vocab = Vocab::build("a b a", TokenMode::Word).unwrap();
        assert_eq!(vocab.id("a"), 3);
        assert_eq!(vocab.id("b"), 4);
        assert_eq!(vocab.len(), 5);
        let again = Vocab::build("a b a", TokenMode::Word).unwrap();
        assert_eq!(vocab, again);
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        assert!(matches!(
            Vocab::build("  \n\n ", TokenMode::Word),
            Err(DataError::EmptyCorpus)
        ));
    }

    #[test]
    fn unseen_token_encodes_to_unk() {
        let vocab = Vocab::build("a b a", TokenMode::Word).unwrap();
        assert_eq!(vocab.encode(&["c".to_string()]), vec![UNK_ID]);
    }

    #[test]
    fn char_mode_splits_characters() {
        let vocab = Vocab::build("ab ba", TokenMode::Char).unwrap();
        assert_eq!(vocab.len(), 5); // reserved + a + b
        assert_eq!(
            vocab.encode(&TokenMode::Char.tokenize("ab")),
            vec![vocab.id("a"), vocab.id("b")]
        );
    }

    proptest! {
        #[test]
        fn vocab_round_trip(tokens in proptest::collection::vec("[a-z]{1,4}", 1..12)) {
            let corpus = tokens.join(" ");
            let vocab = Vocab::build(&corpus, TokenMode::Word).unwrap();
            let toks: Vec<String> = tokens.clone();
            let decoded = vocab.decode(&vocab.encode(&toks));
            prop_assert_eq!(decoded, toks);
        }
    }

    #[test]
    fn degenerate_single_mode_task_is_deterministic() {
        let spec = MultimodalTaskSpec {
            modes: 1,
            ..Default::default()
        };
        let task = MultimodalTask::build(spec).unwrap();
        let (srcs, tgts) = task.sample(20, 1);
        // One mode per symbol: the target is a function of the source.
        let mut seen: HashMap<String, Vec<String>> = HashMap::new();
        for (s, t) in srcs.iter().zip(&tgts) {
            let key = s.join(" ");
            if let Some(prev) = seen.get(&key) {
                assert_eq!(prev, t);
            } else {
                seen.insert(key, t.clone());
            }
        }
    }

    #[test]
    fn same_seed_reproduces_corpus() {
        let task = MultimodalTask::build(MultimodalTaskSpec::default()).unwrap();
        let a = task.sample(50, 7);
        let b = task.sample(50, 7);
        assert_eq!(a, b);
        let c = task.sample(50, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn generated_corpus_is_fully_consistent() {
        let task = MultimodalTask::build(MultimodalTaskSpec::default()).unwrap();
        let (srcs, tgts) = task.sample(200, 3);
        let rate = task.consistency_rate(&srcs, &tgts).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn cross_group_token_swap_breaks_consistency() {
        let task = MultimodalTask::build(MultimodalTaskSpec::default()).unwrap();
        let (srcs, mut tgts) = task.sample(10, 4);
        // Replace the first target token with a token from a different
        // group's phrase; the damaged sentence alone must fail.
        let foreign = task.groups[5][0][0].clone();
        let orig = tgts[0][0].clone();
        assert_ne!(orig, foreign);
        tgts[0][0] = foreign;
        let rate = task.consistency_rate(&srcs, &tgts).unwrap();
        assert!((rate - 0.9).abs() < 1e-12, "rate = {rate}");
    }

    #[test]
    fn consistency_rejects_empty_hypotheses() {
        let task = MultimodalTask::build(MultimodalTaskSpec::default()).unwrap();
        assert!(matches!(
            task.consistency_rate(&[], &[]),
            Err(DataError::EmptyHypotheses)
        ));
    }

    #[test]
    fn bleu_identity_is_100() {
        let sents = vec![
            vec!["a".to_string(), "b".into(), "c".into(), "d".into(), "e".into()],
            vec!["f".to_string(), "g".into(), "h".into(), "i".into()],
        ];
        let score = bleu(&sents, &sents).unwrap();
        assert!((score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_zero_when_no_fourgram_matches() {
        let hyp = vec![vec![
            "a".to_string(),
            "b".into(),
            "x".into(),
            "c".into(),
            "d".into(),
        ]];
        let reference = vec![vec![
            "a".to_string(),
            "b".into(),
            "y".into(),
            "c".into(),
            "d".into(),
        ]];
        assert_eq!(bleu(&hyp, &reference).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_hand_computation_on_short_pair() {
        // p1 = 3/3, p2 = 2/2, p3 = 1/1; no hypothesis 4-grams, so the
        // geometric mean runs over three orders; BP = exp(1 - 4/3).
        let hyp = vec![vec!["the".to_string(), "cat".into(), "sat".into()]];
        let reference = vec![vec![
            "the".to_string(),
            "cat".into(),
            "sat".into(),
            "down".into(),
        ]];
        let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
        let got = bleu(&hyp, &reference).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn bleu_rejects_length_mismatch() {
        let a = vec![vec!["x".to_string()]];
        assert!(matches!(
            bleu(&a, &[]),
            Err(DataError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn bleu_is_permutation_invariant(seed in 0u64..200) {
            let task = MultimodalTask::build(MultimodalTaskSpec::default()).unwrap();
            let (_, refs) = task.sample(8, 11);
            let (_, hyps) = task.sample(8, seed ^ 0xabcd);
            let base = bleu(&hyps, &refs).unwrap();
            let mut order: Vec<usize> = (0..8).collect();
            // Deterministic shuffle from the seed.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..8).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                order.swap(i, j);
            }
            let hyps_p: Vec<_> = order.iter().map(|&i| hyps[i].clone()).collect();
            let refs_p: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
            let permuted = bleu(&hyps_p, &refs_p).unwrap();
            prop_assert!((base - permuted).abs() < 1e-9);
        }
    }

    #[test]
    fn sentence_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sents.txt");
        let sents = vec![
            vec!["a".to_string(), "b".into()],
            vec!["c".to_string()],
        ];
        write_sentences(&path, &sents).unwrap();
        assert_eq!(read_sentences(&path).unwrap(), sents);
    }

    #[test]
    fn task_spec_kv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.spec");
        let spec = MultimodalTaskSpec::default();
        kv::write(&path, &spec.to_kv()).unwrap();
        let loaded = MultimodalTaskSpec::from_kv(&kv::read(&path).unwrap()).unwrap();
        assert_eq!(loaded, spec);
    }
}
