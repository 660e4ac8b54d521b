//! Toy-scale Transformer encoder-decoder.
//!
//! The non-autoregressive variant decodes every position in one parallel
//! pass from a pad…pad eos decoder input, with an extra positional
//! attention sublayer; the autoregressive variant uses a causal mask and
//! serves as the rescoring teacher. Decoder hidden states feed both the
//! label projection (emission scores) and the dynamic CRF transitions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{DynamicTransitionNet, TransitionFactors};
use crate::data::EOS_ID;
use crate::tensor::tape::{concat_cols, Tape, Var};
use crate::tensor::{Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("operation requires the {required:?} variant")]
    WrongVariant { required: Variant },
    #[error("attention row {row} is fully masked")]
    AllMasked { row: usize },
    #[error("checkpoint is missing parameter {name}")]
    MissingParam { name: String },
    #[error("parameter {name}: checkpoint shape {got:?} does not match model shape {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Checkpoint(#[from] crate::tensor::checkpoint::CheckpointError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    NonAutoregressive,
    AutoregressiveTeacher,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub variant: Variant,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults; full-scale dimensions are not trainable here.
    pub fn desk_default(vocab_size: usize, variant: Variant) -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ffn: 128,
            vocab_size,
            max_len: 64,
            variant,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers == 0
            || self.d_model == 0
            || self.num_heads == 0
            || self.d_ffn == 0
            || self.vocab_size == 0
            || self.max_len == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Inverted dropout; `off` turns every apply into the identity.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: if rate > 0.0 {
                Some(ChaCha8Rng::seed_from_u64(seed))
            } else {
                None
            },
        }
    }

    fn apply<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.hadamard_const(&Tensor::new(shape, mask))
    }
}

/// Fixed sinusoidal position encodings, one row per position.
pub fn sinusoidal_encoding(max_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = (pos as f64 * rate).sin();
            data[pos * d_model + 2 * i + 1] = (pos as f64 * rate).cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

/// `softmax(Q·Kᵀ·scale)·V` with optional boolean mask over disallowed
/// query/key pairs (row-major `n_q × n_k`).
pub fn scaled_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<&[bool]>,
    scale: f64,
) -> Result<Var<'t>, ModelError> {
    let mut scores = q.matmul_nt(k)?.scale(scale);
    if let Some(mask) = mask {
        let n_k = k.shape()[0];
        for (row, chunk) in mask.chunks(n_k).enumerate() {
            if chunk.iter().all(|&m| m) {
                return Err(ModelError::AllMasked { row });
            }
        }
        scores = scores.masked_fill(mask, f64::NEG_INFINITY)?;
    }
    Ok(scores.softmax()?.matmul(v)?)
}

struct MultiHeadAttention {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    num_heads: usize,
}

impl MultiHeadAttention {
    fn new(d_model: usize, num_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Tensor::glorot(d_model, d_model, rng).with_grad(),
            wk: Tensor::glorot(d_model, d_model, rng).with_grad(),
            wv: Tensor::glorot(d_model, d_model, rng).with_grad(),
            wo: Tensor::glorot(d_model, d_model, rng).with_grad(),
            num_heads,
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        q_in: Var<'t>,
        k_in: Var<'t>,
        v_in: Var<'t>,
        mask: Option<&[bool]>,
    ) -> Result<Var<'t>, ModelError> {
        let d_model = self.wq.rows();
        let scale = 1.0 / (d_model as f64).sqrt();
        let q = q_in.matmul(tape.param(&self.wq))?;
        let k = k_in.matmul(tape.param(&self.wk))?;
        let v = v_in.matmul(tape.param(&self.wv))?;
        let d_k = d_model / self.num_heads;
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = q.slice_cols(h * d_k, d_k)?;
            let kh = k.slice_cols(h * d_k, d_k)?;
            let vh = v.slice_cols(h * d_k, d_k)?;
            heads.push(scaled_attention(qh, kh, vh, mask, scale)?);
        }
        Ok(concat_cols(&heads)?.matmul(tape.param(&self.wo))?)
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

struct FeedForward {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FeedForward {
    fn new(d_model: usize, d_ffn: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Tensor::glorot(d_model, d_ffn, rng).with_grad(),
            b1: Tensor::zeros(vec![d_ffn]).with_grad(),
            w2: Tensor::glorot(d_ffn, d_model, rng).with_grad(),
            b2: Tensor::zeros(vec![d_model]).with_grad(),
        }
    }

    /// `max(0, x·W1 + b1)·W2 + b2`
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(x
            .matmul(tape.param(&self.w1))?
            .add_bias(tape.param(&self.b1))?
            .relu()
            .matmul(tape.param(&self.w2))?
            .add_bias(tape.param(&self.b2))?)
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(vec![d]).with_grad(),
            bias: Tensor::zeros(vec![d]).with_grad(),
        }
    }

    fn apply<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(x
            .layer_norm(LN_EPS)?
            .scale_cols(tape.param(&self.gain))?
            .add_bias(tape.param(&self.bias))?)
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(cfg.d_model, cfg.num_heads, rng),
            ln1: LayerNorm::new(cfg.d_model),
            ffn: FeedForward::new(cfg.d_model, cfg.d_ffn, rng),
            ln2: LayerNorm::new(cfg.d_model),
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        dropout: &mut Dropout,
    ) -> Result<Var<'t>, ModelError> {
        let a = self.attn.forward(tape, x, x, x, None)?;
        let x = self.ln1.apply(tape, x.add(dropout.apply(a)?)?)?;
        let f = self.ffn.forward(tape, x)?;
        self.ln2.apply(tape, x.add(dropout.apply(f)?)?)
    }
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    /// Present only in the non-autoregressive variant.
    pos_attn: Option<(MultiHeadAttention, LayerNorm)>,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(cfg.d_model, cfg.num_heads, rng),
            ln1: LayerNorm::new(cfg.d_model),
            pos_attn: match cfg.variant {
                Variant::NonAutoregressive => Some((
                    MultiHeadAttention::new(cfg.d_model, cfg.num_heads, rng),
                    LayerNorm::new(cfg.d_model),
                )),
                Variant::AutoregressiveTeacher => None,
            },
            cross_attn: MultiHeadAttention::new(cfg.d_model, cfg.num_heads, rng),
            ln2: LayerNorm::new(cfg.d_model),
            ffn: FeedForward::new(cfg.d_model, cfg.d_ffn, rng),
            ln3: LayerNorm::new(cfg.d_model),
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        ctx: Var<'t>,
        pos: Var<'t>,
        causal_mask: Option<&[bool]>,
        dropout: &mut Dropout,
    ) -> Result<Var<'t>, ModelError> {
        let a = self.self_attn.forward(tape, z, z, z, causal_mask)?;
        let mut z = self.ln1.apply(tape, z.add(dropout.apply(a)?)?)?;
        if let Some((pa, ln)) = &self.pos_attn {
            // Positional encodings act as queries and keys; the previous
            // layer's states are the values.
            let p = pa.forward(tape, pos, pos, z, None)?;
            z = ln.apply(tape, z.add(dropout.apply(p)?)?)?;
        }
        let c = self.cross_attn.forward(tape, z, ctx, ctx, None)?;
        let z = self.ln2.apply(tape, z.add(dropout.apply(c)?)?)?;
        let f = self.ffn.forward(tape, z)?;
        self.ln3.apply(tape, z.add(dropout.apply(f)?)?)
    }
}

/// Encoder-decoder with a label projection head. Source and target share
/// one embedding table.
pub struct NartModel {
    pub config: ModelConfig,
    embed: Tensor,
    pos_table: Tensor,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    proj_w: Tensor,
    proj_b: Tensor,
}

impl NartModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let embed = Tensor::glorot(config.vocab_size, config.d_model, rng).with_grad();
        let enc = (0..config.num_layers)
            .map(|_| EncoderLayer::new(&config, rng))
            .collect();
        let dec = (0..config.num_layers)
            .map(|_| DecoderLayer::new(&config, rng))
            .collect();
        let proj_w = Tensor::glorot(config.d_model, config.vocab_size, rng).with_grad();
        let proj_b = Tensor::zeros(vec![config.vocab_size]).with_grad();
        let pos_table = sinusoidal_encoding(config.max_len, config.d_model);
        Ok(Self {
            config,
            embed,
            pos_table,
            enc,
            dec,
            proj_w,
            proj_b,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn positions(&self, n: usize) -> Tensor {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend_from_slice(self.pos_table.row(i));
        }
        Tensor::new(vec![n, d], data)
    }

    /// Source tokens to context states, `T×d_model`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        src: &[usize],
        dropout: &mut Dropout,
    ) -> Result<Var<'t>, ModelError> {
        self.check_ids(src)?;
        let emb = tape.param(&self.embed).gather_rows(src)?;
        let pe = tape.constant(self.positions(src.len()));
        let mut x = emb.add(pe)?;
        for layer in &self.enc {
            x = layer.forward(tape, x, dropout)?;
        }
        Ok(x)
    }

    /// Non-autoregressive decoder: all `t_prime` positions in one pass
    /// from the fixed pad…pad eos input. Never sees target tokens.
    pub fn decode_hidden<'t>(
        &self,
        tape: &'t Tape,
        ctx: Var<'t>,
        t_prime: usize,
        dropout: &mut Dropout,
    ) -> Result<Var<'t>, ModelError> {
        if self.config.variant != Variant::NonAutoregressive {
            return Err(ModelError::WrongVariant {
                required: Variant::NonAutoregressive,
            });
        }
        if t_prime == 0 {
            return Err(ModelError::EmptyInput);
        }
        if t_prime > self.config.max_len {
            return Err(ModelError::TooLong {
                len: t_prime,
                max: self.config.max_len,
            });
        }
        let mut input = vec![crate::data::PAD_ID; t_prime - 1];
        input.push(EOS_ID);
        let emb = tape.param(&self.embed).gather_rows(&input)?;
        let pos = tape.constant(self.positions(t_prime));
        let mut z = emb.add(pos)?;
        for layer in &self.dec {
            z = layer.forward(tape, z, ctx, pos, None, dropout)?;
        }
        Ok(z)
    }

    /// Emission scores `h·W + b`, shape `n×V`.
    pub fn label_scores<'t>(&self, tape: &'t Tape, hidden: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(hidden
            .matmul(tape.param(&self.proj_w))?
            .add_bias(tape.param(&self.proj_b))?)
    }

    /// Causal decoder pass over a forced target prefix; returns per-step
    /// logits, `len×V`. Input is eos followed by `tgt[..len-1]`.
    pub fn teacher_logits<'t>(
        &self,
        tape: &'t Tape,
        ctx: Var<'t>,
        tgt: &[usize],
        dropout: &mut Dropout,
    ) -> Result<Var<'t>, ModelError> {
        if self.config.variant != Variant::AutoregressiveTeacher {
            return Err(ModelError::WrongVariant {
                required: Variant::AutoregressiveTeacher,
            });
        }
        self.check_ids(tgt)?;
        let n = tgt.len();
        let mut input = Vec::with_capacity(n);
        input.push(EOS_ID);
        input.extend_from_slice(&tgt[..n - 1]);
        let emb = tape.param(&self.embed).gather_rows(&input)?;
        let pos = tape.constant(self.positions(n));
        let mut z = emb.add(pos)?;
        let mask: Vec<bool> = (0..n)
            .flat_map(|i| (0..n).map(move |j| j > i))
            .collect();
        for layer in &self.dec {
            z = layer.forward(tape, z, ctx, pos, Some(&mask), dropout)?;
        }
        self.label_scores(tape, z)
    }

    /// `Σ_i log p(tgt_i | tgt_<i, src)` under the causal decoder.
    pub fn teacher_logprob(&self, src: &[usize], tgt: &[usize]) -> Result<f64, ModelError> {
        let tape = Tape::new();
        let ctx = self.encode(&tape, src, &mut Dropout::off())?;
        let logits = self.teacher_logits(&tape, ctx, tgt, &mut Dropout::off())?;
        let lp = logits.log_softmax()?;
        let coords: Vec<(usize, usize)> = tgt.iter().copied().enumerate().collect();
        Ok(lp.gather_entries(&coords)?.sum().value().item())
    }

    /// Token-by-token greedy decode with the causal decoder; stops at eos
    /// or `max_len`. The emitted eos is not returned.
    pub fn teacher_greedy_decode(&self, src: &[usize]) -> Result<Vec<usize>, ModelError> {
        if self.config.variant != Variant::AutoregressiveTeacher {
            return Err(ModelError::WrongVariant {
                required: Variant::AutoregressiveTeacher,
            });
        }
        self.check_ids(src)?;
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..self.config.max_len {
            let tape = Tape::new();
            let ctx = self.encode(&tape, src, &mut Dropout::off())?;
            // Prefix plus a placeholder slot for the next step; only the
            // final row of the logits is consulted.
            let mut probe = out.clone();
            probe.push(EOS_ID);
            let logits = self.teacher_logits(&tape, ctx, &probe, &mut Dropout::off())?;
            let v = logits.value();
            let last = v.row(v.rows() - 1);
            let mut arg = 0;
            let mut best = f64::NEG_INFINITY;
            for (y, &s) in last.iter().enumerate() {
                if s > best {
                    best = s;
                    arg = y;
                }
            }
            if arg == EOS_ID {
                break;
            }
            out.push(arg);
        }
        Ok(out)
    }

    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("embed.table".into(), &self.embed);
        for (i, layer) in self.enc.iter().enumerate() {
            layer.attn.visit(&format!("enc.{i}.attn"), f);
            layer.ln1.visit(&format!("enc.{i}.ln1"), f);
            layer.ffn.visit(&format!("enc.{i}.ffn"), f);
            layer.ln2.visit(&format!("enc.{i}.ln2"), f);
        }
        for (i, layer) in self.dec.iter().enumerate() {
            layer.self_attn.visit(&format!("dec.{i}.self_attn"), f);
            layer.ln1.visit(&format!("dec.{i}.ln1"), f);
            if let Some((pa, ln)) = &layer.pos_attn {
                pa.visit(&format!("dec.{i}.pos_attn"), f);
                ln.visit(&format!("dec.{i}.ln_pos"), f);
            }
            layer.cross_attn.visit(&format!("dec.{i}.cross_attn"), f);
            layer.ln2.visit(&format!("dec.{i}.ln2"), f);
            layer.ffn.visit(&format!("dec.{i}.ffn"), f);
            layer.ln3.visit(&format!("dec.{i}.ln3"), f);
        }
        f("proj.w".into(), &self.proj_w);
        f("proj.b".into(), &self.proj_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("embed.table".into(), &mut self.embed);
        for (i, layer) in self.enc.iter_mut().enumerate() {
            layer.attn.visit_mut(&format!("enc.{i}.attn"), f);
            layer.ln1.visit_mut(&format!("enc.{i}.ln1"), f);
            layer.ffn.visit_mut(&format!("enc.{i}.ffn"), f);
            layer.ln2.visit_mut(&format!("enc.{i}.ln2"), f);
        }
        for (i, layer) in self.dec.iter_mut().enumerate() {
            layer.self_attn.visit_mut(&format!("dec.{i}.self_attn"), f);
            layer.ln1.visit_mut(&format!("dec.{i}.ln1"), f);
            if let Some((pa, ln)) = &mut layer.pos_attn {
                pa.visit_mut(&format!("dec.{i}.pos_attn"), f);
                ln.visit_mut(&format!("dec.{i}.ln_pos"), f);
            }
            layer.cross_attn.visit_mut(&format!("dec.{i}.cross_attn"), f);
            layer.ln2.visit_mut(&format!("dec.{i}.ln2"), f);
            layer.ffn.visit_mut(&format!("dec.{i}.ffn"), f);
            layer.ln3.visit_mut(&format!("dec.{i}.ln3"), f);
        }
        f("proj.w".into(), &mut self.proj_w);
        f("proj.b".into(), &mut self.proj_b);
    }
}

/// Model architecture, selecting the CRF components attached to the
/// Transformer (or the teacher variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Nart,
    NartCrf,
    NartDcrf,
    Teacher,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Nart => "nart",
            Arch::NartCrf => "nart-crf",
            Arch::NartDcrf => "nart-dcrf",
            Arch::Teacher => "teacher",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nart" => Some(Arch::Nart),
            "nart-crf" => Some(Arch::NartCrf),
            "nart-dcrf" => Some(Arch::NartDcrf),
            "teacher" => Some(Arch::Teacher),
            _ => None,
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Arch::Teacher => Variant::AutoregressiveTeacher,
            _ => Variant::NonAutoregressive,
        }
    }
}

pub struct CrfComponents {
    pub factors: TransitionFactors,
    pub dynamic: Option<DynamicTransitionNet>,
}

/// Transformer plus optional CRF parameters; the unit of training,
/// checkpointing, and decoding.
pub struct NartCrfModel {
    pub arch: Arch,
    pub d_t: usize,
    pub nart: NartModel,
    pub crf: Option<CrfComponents>,
}

impl NartCrfModel {
    pub fn new(arch: Arch, mut config: ModelConfig, d_t: usize, seed: u64) -> Result<Self, ModelError> {
        config.variant = arch.variant();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nart = NartModel::new(config.clone(), &mut rng)?;
        // CRF parameters draw from a separate stream so they match across
        // architectures given the same seed (warm-start comparability).
        let mut crf_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed_c0f_f));
        let crf = match arch {
            Arch::Nart | Arch::Teacher => None,
            Arch::NartCrf => Some(CrfComponents {
                factors: TransitionFactors::new(config.vocab_size, d_t, &mut crf_rng),
                dynamic: None,
            }),
            Arch::NartDcrf => Some(CrfComponents {
                factors: TransitionFactors::new(config.vocab_size, d_t, &mut crf_rng),
                dynamic: Some(DynamicTransitionNet::new(config.d_model, d_t, &mut crf_rng)),
            }),
        };
        Ok(Self {
            arch,
            d_t,
            nart,
            crf,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.nart.config
    }

    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        self.nart.visit_params(f);
        if let Some(crf) = &self.crf {
            f("crf.e1".into(), &crf.factors.e1);
            f("crf.e2".into(), &crf.factors.e2);
            if let Some(net) = &crf.dynamic {
                f("crf.dyn.w1".into(), &net.w1);
                f("crf.dyn.b1".into(), &net.b1);
                f("crf.dyn.w2".into(), &net.w2);
                f("crf.dyn.b2".into(), &net.b2);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.nart.visit_params_mut(f);
        if let Some(crf) = &mut self.crf {
            f("crf.e1".into(), &mut crf.factors.e1);
            f("crf.e2".into(), &mut crf.factors.e2);
            if let Some(net) = &mut crf.dynamic {
                f("crf.dyn.w1".into(), &mut net.w1);
                f("crf.dyn.b1".into(), &mut net.b1);
                f("crf.dyn.w2".into(), &mut net.w2);
                f("crf.dyn.b2".into(), &mut net.b2);
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    fn ckpt_path(stem: &Path) -> std::path::PathBuf {
        std::path::PathBuf::from(format!("{}.ckpt", stem.display()))
    }

    fn cfg_path(stem: &Path) -> std::path::PathBuf {
        std::path::PathBuf::from(format!("{}.cfg", stem.display()))
    }

    /// Writes `<stem>.ckpt` (tensors) and `<stem>.cfg` (key=value config).
    pub fn save(&self, stem: &Path) -> Result<(), ModelError> {
        self.save_with_extras(stem, &[])
    }

    /// As [`save`], with extra config entries (loaders ignore unknown
    /// keys; callers stash things like fitted length bias here).
    pub fn save_with_extras(
        &self,
        stem: &Path,
        extras: &[(String, String)],
    ) -> Result<(), ModelError> {
        crate::tensor::checkpoint::save(&Self::ckpt_path(stem), &self.named_params())?;
        let cfg = self.config();
        let mut pairs = vec![
            ("arch".to_string(), self.arch.as_str().to_string()),
            ("num_layers".to_string(), cfg.num_layers.to_string()),
            ("d_model".to_string(), cfg.d_model.to_string()),
            ("num_heads".to_string(), cfg.num_heads.to_string()),
            ("d_ffn".to_string(), cfg.d_ffn.to_string()),
            ("vocab_size".to_string(), cfg.vocab_size.to_string()),
            ("max_len".to_string(), cfg.max_len.to_string()),
            ("dropout".to_string(), cfg.dropout.to_string()),
            ("d_t".to_string(), self.d_t.to_string()),
        ];
        pairs.extend_from_slice(extras);
        crate::data::kv::write(&Self::cfg_path(stem), &pairs)?;
        Ok(())
    }

    /// Loads a bundle saved by [`save`]: every model parameter must be
    /// present in the checkpoint with a matching shape.
    pub fn load(stem: &Path) -> Result<Self, ModelError> {
        let kv = crate::data::kv::read(&Self::cfg_path(stem))?;
        let get = |key: &str| -> Result<String, ModelError> {
            kv.get(key)
                .cloned()
                .ok_or_else(|| ModelError::Config(format!("missing config key {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize, ModelError> {
            get(key)?
                .parse()
                .map_err(|e| ModelError::Config(format!("{key}: {e}")))
        };
        let arch = Arch::parse(&get("arch")?)
            .ok_or_else(|| ModelError::Config("unknown arch".into()))?;
        let config = ModelConfig {
            num_layers: parse_usize("num_layers")?,
            d_model: parse_usize("d_model")?,
            num_heads: parse_usize("num_heads")?,
            d_ffn: parse_usize("d_ffn")?,
            vocab_size: parse_usize("vocab_size")?,
            max_len: parse_usize("max_len")?,
            variant: arch.variant(),
            dropout: get("dropout")?
                .parse()
                .map_err(|e| ModelError::Config(format!("dropout: {e}")))?,
        };
        let d_t = parse_usize("d_t")?;
        let mut model = Self::new(arch, config, d_t, 0)?;
        let loaded = crate::tensor::checkpoint::load(&Self::ckpt_path(stem))?;
        let by_name: std::collections::HashMap<String, Tensor> = loaded.into_iter().collect();
        let mut err = None;
        model.visit_params_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match by_name.get(&name) {
                None => err = Some(ModelError::MissingParam { name }),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(ModelError::ParamShape {
                        name,
                        expected: t.shape().to_vec(),
                        got: src.shape().to_vec(),
                    })
                }
                Some(src) => t.replace_data(src.data().to_vec()),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}
