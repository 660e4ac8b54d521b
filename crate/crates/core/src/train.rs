//! Joint loss assembly, Adam, warm starting, and the training loop.
//!
//! One step: draw a batch, evaluate per-sentence losses and gradients
//! (concurrently — each sentence owns its tape), accumulate gradients in
//! sentence order, apply one Adam update. The CRF loss uses gold-forced
//! beams throughout training.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch;
use crate::crf::approx::{crf_nll_taped, TapedTransitions};
use crate::crf::CrfError;
use crate::data::{DataError, ParallelCorpus};
use crate::model::{Arch, Dropout, ModelError, NartCrfModel};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: usize },
    #[error("gold length {got} does not match score rows {expected}")]
    GoldLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Training hyperparameters; defaults follow the reference setup
/// (λ = 0.5, ε_ls = 0.1, d_t = 32, beam k = 64, Adam).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub label_smoothing: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub beam_k: usize,
    pub seed: u64,
    /// Save `<stem>.ckpt`/`<stem>.cfg` every `checkpoint_every` steps.
    pub checkpoint_stem: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            label_smoothing: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_steps: 200,
            beam_k: 64,
            seed: 1,
            checkpoint_stem: None,
            checkpoint_every: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda < 0.0 {
            return Err(TrainError::Config("lambda must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::Config("label smoothing outside [0, 1)".into()));
        }
        if self.beam_k == 0 {
            return Err(TrainError::Config("beam k must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(TrainError::Config("batch size and steps must be positive".into()));
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy over positions, mean-reduced:
/// `-(1/n) Σ_i [(1-ε)·lp[i][g_i] + (ε/V)·Σ_y lp[i][y]]`.
pub fn nar_loss<'t>(scores: Var<'t>, gold: &[usize], eps: f64) -> Result<Var<'t>, TrainError> {
    let shape = scores.shape();
    let (n, v) = (shape[0], shape[1]);
    if gold.len() != n {
        return Err(TrainError::GoldLength {
            expected: n,
            got: gold.len(),
        });
    }
    let lp = scores.log_softmax()?;
    let coords: Vec<(usize, usize)> = gold.iter().copied().enumerate().collect();
    let gold_term = lp
        .gather_entries(&coords)?
        .sum()
        .scale(-(1.0 - eps) / n as f64);
    let uniform_term = lp.sum().scale(-eps / (v as f64 * n as f64));
    Ok(gold_term.add(uniform_term)?)
}

/// `L = L_CRF + λ·L_NAR`.
pub fn joint_loss<'t>(crf_nll: Var<'t>, nar: Var<'t>, lambda: f64) -> Result<Var<'t>, TrainError> {
    Ok(crf_nll.add(nar.scale(lambda))?)
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction; state keyed by parameter name.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    state: HashMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Advances the shared step counter; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<(), TrainError> {
        if grad.len() != param.numel() {
            return Err(TrainError::Config(format!(
                "gradient length {} does not match parameter {name} ({})",
                grad.len(),
                param.numel()
            )));
        }
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut data = param.data().to_vec();
        for i in 0..grad.len() {
            let g = grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        param.replace_data(data);
        Ok(())
    }
}

/// Copies the shared subset (everything but `crf.*`) from a checkpoint
/// into `model`, leaving CRF parameters freshly initialized. Refuses with
/// the offending name on a missing parameter or shape mismatch.
pub fn warm_start(model: &mut NartCrfModel, ckpt_stem: &Path) -> Result<(), TrainError> {
    let ckpt_path = PathBuf::from(format!("{}.ckpt", ckpt_stem.display()));
    let loaded = crate::tensor::checkpoint::load(&ckpt_path).map_err(ModelError::from)?;
    let by_name: HashMap<String, Tensor> = loaded.into_iter().collect();
    let mut err = None;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() || name.starts_with("crf.") {
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
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub crf_nll: f64,
    pub nar_loss: f64,
    pub joint_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub crf_nll: f64,
    pub nar_loss: f64,
    pub joint: f64,
}

/// Builds the full loss for one sentence pair on the given tape.
/// For the teacher arch this is the causal cross-entropy; otherwise the
/// NAR loss plus, when CRF components exist, the gold-forced beam NLL.
pub fn sentence_loss<'t>(
    tape: &'t Tape,
    model: &NartCrfModel,
    src: &[usize],
    tgt: &[usize],
    cfg: &TrainConfig,
    dropout: &mut Dropout,
) -> Result<(Var<'t>, LossParts), TrainError> {
    let ctx = model.nart.encode(tape, src, dropout)?;
    if model.arch == Arch::Teacher {
        let logits = model.nart.teacher_logits(tape, ctx, tgt, dropout)?;
        let ce = nar_loss(logits, tgt, cfg.label_smoothing)?;
        let v = ce.value().item();
        return Ok((
            ce,
            LossParts {
                crf_nll: 0.0,
                nar_loss: v,
                joint: v,
            },
        ));
    }
    let hidden = model.nart.decode_hidden(tape, ctx, tgt.len(), dropout)?;
    let scores = model.nart.label_scores(tape, hidden)?;
    let nar = nar_loss(scores, tgt, cfg.label_smoothing)?;
    match &model.crf {
        None => {
            let v = nar.value().item();
            Ok((
                nar,
                LossParts {
                    crf_nll: 0.0,
                    nar_loss: v,
                    joint: v,
                },
            ))
        }
        Some(crf) => {
            let transitions = match &crf.dynamic {
                None => TapedTransitions::Static(&crf.factors),
                Some(net) => TapedTransitions::Dynamic {
                    factors: &crf.factors,
                    net,
                    hidden,
                },
            };
            let crf_nll = crf_nll_taped(tape, scores, tgt, cfg.beam_k, &transitions)?;
            let total = joint_loss(crf_nll, nar, cfg.lambda)?;
            Ok((
                total,
                LossParts {
                    crf_nll: crf_nll.value().item(),
                    nar_loss: nar.value().item(),
                    joint: total.value().item(),
                },
            ))
        }
    }
}

/// Loss components without gradients, for evaluation.
pub fn eval_loss(
    model: &NartCrfModel,
    src: &[usize],
    tgt: &[usize],
    cfg: &TrainConfig,
) -> Result<LossParts, TrainError> {
    let tape = Tape::new();
    let (_, parts) = sentence_loss(&tape, model, src, tgt, cfg, &mut Dropout::off())?;
    Ok(parts)
}

/// Runs the training loop, mutating `model` in place; returns per-step
/// metrics. Aborts with [`TrainError::Diverged`] if a loss goes
/// non-finite.
pub fn train(
    model: &mut NartCrfModel,
    corpus: &ParallelCorpus,
    cfg: &TrainConfig,
) -> Result<Vec<StepMetrics>, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    shuffle(&mut order, &mut rng);
    let mut cursor = 0usize;
    let mut optimizer = Adam::from_config(cfg);
    let mut metrics = Vec::with_capacity(cfg.max_steps);
    let dropout_rate = model.config().dropout;

    for step in 1..=cfg.max_steps {
        let started = Instant::now();
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }

        let params = model.named_params();
        let model_ref: &NartCrfModel = model;
        // Per-sentence forward/backward; results collected in batch order
        // so accumulation is deterministic regardless of thread schedule.
        let results: Vec<Result<(Vec<Option<Tensor>>, LossParts), TrainError>> =
            batch::map_items(&batch_idx, |&idx| {
                let (src, tgt) = &corpus.pairs[idx];
                let tape = Tape::new();
                let mut dropout = Dropout::train(
                    dropout_rate,
                    cfg.seed ^ (step as u64) << 20 ^ idx as u64,
                );
                let (loss, parts) =
                    sentence_loss(&tape, model_ref, src, tgt, cfg, &mut dropout)?;
                let grads = tape.backward(loss)?;
                let per_param: Vec<Option<Tensor>> = params
                    .iter()
                    .map(|(_, t)| grads.wrt(t).cloned())
                    .collect();
                Ok((per_param, parts))
            });

        let mut grad_acc: Vec<Option<Vec<f64>>> = vec![None; params.len()];
        let mut sums = LossParts {
            crf_nll: 0.0,
            nar_loss: 0.0,
            joint: 0.0,
        };
        for res in results {
            let (per_param, parts) = res?;
            sums.crf_nll += parts.crf_nll;
            sums.nar_loss += parts.nar_loss;
            sums.joint += parts.joint;
            for (slot, g) in grad_acc.iter_mut().zip(per_param) {
                let Some(g) = g else { continue };
                match slot {
                    Some(acc) => Tensor::add_assign_into(acc, &g),
                    None => *slot = Some(g.data().to_vec()),
                }
            }
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        let row = StepMetrics {
            step,
            crf_nll: sums.crf_nll * inv_b,
            nar_loss: sums.nar_loss * inv_b,
            joint_loss: sums.joint * inv_b,
            wall_ms: 0.0,
        };
        if !row.joint_loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }

        optimizer.begin_step();
        let mut update_err = None;
        let mut i = 0usize;
        model.visit_params_mut(&mut |name, t| {
            if update_err.is_some() {
                return;
            }
            if let Some(acc) = &mut grad_acc[i] {
                for g in acc.iter_mut() {
                    *g *= inv_b;
                }
                if let Err(e) = optimizer.update(&name, t, acc) {
                    update_err = Some(e);
                }
            }
            i += 1;
        });
        if let Some(e) = update_err {
            return Err(e);
        }

        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        metrics.push(StepMetrics { wall_ms, ..row });

        if let Some(stem) = &cfg.checkpoint_stem {
            if step % cfg.checkpoint_every == 0 || step == cfg.max_steps {
                model.save(stem)?;
            }
        }
    }
    Ok(metrics)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Metrics CSV: a config comment row, a header, one row per step.
pub fn write_metrics_csv(
    path: &Path,
    config_note: &str,
    metrics: &[StepMetrics],
) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&format!("# {config_note}\n"));
    out.push_str("step,crf_nll,nar_loss,joint_loss,wall_ms\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            m.step, m.crf_nll, m.nar_loss, m.joint_loss, m.wall_ms
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
