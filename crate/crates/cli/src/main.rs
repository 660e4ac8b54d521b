//! Command-line surface: synthetic data generation, training, decoding,
//! beam-size sweeps, and latency benchmarking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nartcrf::bench::{self, SWEEP_KS};
use nartcrf::data::{self, kv, MultimodalTask, MultimodalTaskSpec, ParallelCorpus, Vocab};
use nartcrf::infer::{
    decode_corpus, DecodeMode, DecodeOptions, InferError, LengthRule,
};
use nartcrf::model::{Arch, ModelConfig, NartCrfModel, Variant};
use nartcrf::train::{self, TrainConfig, TrainError};

#[derive(Parser, Debug)]
#[command(name = "nartcrf", version, about = "Structured non-autoregressive decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multimodal parallel corpus.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint plus metrics CSV.
    Train(TrainArgs),
    /// Decode a source file with a trained checkpoint.
    Decode(DecodeArgs),
    /// Evaluate one checkpoint across the beam-size grid.
    SweepBeam(SweepArgs),
    /// Measure per-sentence decoding latency.
    BenchLatency(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory for corpus, vocab, and task spec files.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    symbols: usize,
    /// Synonym phrases per source symbol.
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 1)]
    phrase_min: usize,
    #[arg(long, default_value_t = 2)]
    phrase_max: usize,
    #[arg(long, default_value_t = 3)]
    sent_min: usize,
    #[arg(long, default_value_t = 10)]
    sent_max: usize,
    #[arg(long, default_value_t = 5000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train_src: PathBuf,
    #[arg(long)]
    train_tgt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint stem; writes <out>.ckpt/.cfg/.vocab/.metrics.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "nart-crf")]
    arch: String,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Joint-loss weight on the NAR term.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// CRF beam size k used for the gold-forced training lattice.
    #[arg(long, default_value_t = 64)]
    crf_beam: usize,
    /// Transition embedding dimension d_t.
    #[arg(long, default_value_t = 32)]
    transition_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    d_ffn: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Warm-start checkpoint stem (shared parameters only).
    #[arg(long)]
    warmup: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Checkpoint stem written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    /// Hypotheses file, one detokenized sentence per line.
    #[arg(long)]
    out: PathBuf,
    /// Optional TSV with src, hyp, decode_score, rescore columns.
    #[arg(long)]
    tsv: Option<PathBuf>,
    /// nar | crf | auto (crf when the checkpoint has CRF components).
    #[arg(long, default_value = "auto")]
    mode: String,
    #[arg(long, default_value_t = 64)]
    crf_beam: usize,
    /// Length bias C; defaults to the value fitted at training time.
    #[arg(long)]
    length_bias: Option<i64>,
    /// Half-width B; 2B+1 candidate lengths per sentence when positive.
    #[arg(long, default_value_t = 0)]
    half_width: usize,
    /// Teacher checkpoint stem used to rescore candidates.
    #[arg(long)]
    rescore: Option<PathBuf>,
    /// Rank candidates by total (not per-token) teacher log-probability.
    #[arg(long, default_value_t = false)]
    no_length_norm: bool,
    /// Explicit vocab file; must match the checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Task spec file enabling the consistency column.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    rescore: Option<PathBuf>,
    #[arg(long)]
    length_bias: Option<i64>,
    #[arg(long, default_value_t = 0)]
    half_width: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Measure a trained checkpoint on a source file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    src: Option<PathBuf>,
    /// Teacher stem for the autoregressive baseline row.
    #[arg(long)]
    rescore: Option<PathBuf>,
    /// Measure a random-weight model at this vocabulary size instead.
    #[arg(long)]
    synthetic_vocab: Option<usize>,
    /// Target length for synthetic sources.
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    sentences: usize,
    #[arg(long, default_value = "8,16,32,64,128")]
    ks: String,
    #[arg(long)]
    length_bias: Option<i64>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Diverged(m) => m,
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<nartcrf::model::ModelError> for CliError {
    fn from(e: nartcrf::model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::NoRescorer | InferError::NoCrf | InferError::NotATeacher => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<bench::BenchError> for CliError {
    fn from(e: bench::BenchError) -> Self {
        match e {
            bench::BenchError::Infer(e) => e.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Decode(args) => cmd_decode(args),
        Command::SweepBeam(args) => cmd_sweep_beam(args),
        Command::BenchLatency(args) => cmd_bench_latency(args),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = MultimodalTaskSpec {
        symbols: args.symbols,
        modes: args.modes,
        phrase_len_min: args.phrase_min,
        phrase_len_max: args.phrase_max,
        sent_len_min: args.sent_min,
        sent_len_max: args.sent_max,
        seed: args.seed,
    };
    let task = MultimodalTask::build(spec.clone())?;
    std::fs::create_dir_all(&args.out_dir).map_err(data::DataError::from)?;
    let (train_src, train_tgt) = task.sample(args.train, 1);
    let (test_src, test_tgt) = task.sample(args.test, 2);
    let dir = &args.out_dir;
    data::write_sentences(&dir.join("train.src"), &train_src)?;
    data::write_sentences(&dir.join("train.tgt"), &train_tgt)?;
    data::write_sentences(&dir.join("test.src"), &test_src)?;
    data::write_sentences(&dir.join("test.tgt"), &test_tgt)?;
    task.vocab.save(&dir.join("vocab.txt"))?;
    kv::write(&dir.join("task.spec"), &spec.to_kv())?;
    println!(
        "wrote {} train / {} test pairs, vocab of {} tokens, to {}",
        args.train,
        args.test,
        task.vocab.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    require_exists(&args.train_src, "train source file")?;
    require_exists(&args.train_tgt, "train target file")?;
    require_exists(&args.vocab, "vocab file")?;
    let arch = Arch::parse(&args.arch)
        .ok_or_else(|| CliError::Usage(format!("unknown arch {:?}", args.arch)))?;
    let vocab = Vocab::load(&args.vocab)?;
    let src = data::read_sentences(&args.train_src)?;
    let tgt = data::read_sentences(&args.train_tgt)?;
    let corpus = ParallelCorpus::encode(&src, &tgt, &vocab, args.max_len)?;

    let config = ModelConfig {
        num_layers: args.layers,
        d_model: args.d_model,
        num_heads: args.heads,
        d_ffn: args.d_ffn,
        vocab_size: vocab.len(),
        max_len: args.max_len,
        variant: arch.variant(),
        dropout: args.dropout,
    };
    let mut model = NartCrfModel::new(arch, config, args.transition_dim, args.seed)?;
    if let Some(warmup) = &args.warmup {
        require_exists(&PathBuf::from(format!("{}.ckpt", warmup.display())), "warmup checkpoint")?;
        train::warm_start(&mut model, warmup)?;
    }

    let train_cfg = TrainConfig {
        lambda: args.lambda,
        label_smoothing: args.label_smoothing,
        lr: args.lr,
        batch_size: args.batch,
        max_steps: args.steps,
        beam_k: args.crf_beam,
        seed: args.seed,
        checkpoint_stem: Some(args.out.clone()),
        checkpoint_every: 500,
        ..Default::default()
    };
    let metrics = train::train(&mut model, &corpus, &train_cfg)?;

    let bias = LengthRule::fit_bias(&corpus.pairs);
    model.save_with_extras(
        &args.out,
        &[("length_bias".to_string(), bias.to_string())],
    )?;
    vocab.save(&PathBuf::from(format!("{}.vocab", args.out.display())))?;
    let note = format!(
        "arch={} steps={} batch={} lambda={} crf_beam={} transition_dim={} label_smoothing={} lr={} layers={} d_model={} heads={} d_ffn={} max_len={} dropout={} warmup={:?} seed={} length_bias={}",
        arch.as_str(), args.steps, args.batch, args.lambda, args.crf_beam,
        args.transition_dim, args.label_smoothing, args.lr, args.layers,
        args.d_model, args.heads, args.d_ffn, args.max_len, args.dropout,
        args.warmup, args.seed, bias,
    );
    train::write_metrics_csv(
        &PathBuf::from(format!("{}.metrics.csv", args.out.display())),
        &note,
        &metrics,
    )?;
    let last = metrics.last().expect("at least one step");
    println!(
        "trained {} for {} steps: crf_nll {:.4}, nar_loss {:.4}, joint {:.4}",
        arch.as_str(),
        last.step,
        last.crf_nll,
        last.nar_loss,
        last.joint_loss
    );
    Ok(())
}

/// Loads the bundle plus its vocab and fitted length bias.
fn load_checkpoint(stem: &Path) -> Result<(NartCrfModel, Vocab, i64), CliError> {
    require_exists(&PathBuf::from(format!("{}.ckpt", stem.display())), "checkpoint")?;
    let model = NartCrfModel::load(stem)?;
    let vocab = Vocab::load(&PathBuf::from(format!("{}.vocab", stem.display())))?;
    if vocab.len() != model.config().vocab_size {
        return Err(CliError::Data(format!(
            "vocab of {} tokens does not match checkpoint vocab_size {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let cfgmap = kv::read(&PathBuf::from(format!("{}.cfg", stem.display())))?;
    let bias = cfgmap
        .get("length_bias")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    Ok((model, vocab, bias))
}

fn load_teacher(stem: &Path) -> Result<NartCrfModel, CliError> {
    let (teacher, _, _) = load_checkpoint(stem)?;
    if teacher.config().variant != Variant::AutoregressiveTeacher {
        return Err(CliError::Usage(format!(
            "--rescore checkpoint {} is not a teacher model",
            stem.display()
        )));
    }
    Ok(teacher)
}

fn cmd_decode(args: DecodeArgs) -> Result<(), CliError> {
    require_exists(&args.src, "source file")?;
    let (model, vocab, fitted_bias) = load_checkpoint(&args.checkpoint)?;
    if let Some(explicit) = &args.vocab {
        require_exists(explicit, "vocab file")?;
        let given = Vocab::load(explicit)?;
        if given != vocab {
            return Err(CliError::Data(format!(
                "vocab {} does not match the checkpoint's vocab",
                explicit.display()
            )));
        }
    }
    let mode = match args.mode.as_str() {
        "nar" => DecodeMode::Nar,
        "crf" => DecodeMode::Crf { k: args.crf_beam },
        "auto" => {
            if model.crf.is_some() {
                DecodeMode::Crf { k: args.crf_beam }
            } else {
                DecodeMode::Nar
            }
        }
        other => return Err(CliError::Usage(format!("unknown mode {other:?}"))),
    };
    if args.half_width > 0 && args.rescore.is_none() {
        return Err(CliError::Usage(
            "--half-width requires --rescore with a teacher checkpoint".into(),
        ));
    }
    let teacher = args.rescore.as_deref().map(load_teacher).transpose()?;
    let src_tokens = data::read_sentences(&args.src)?;
    let sources: Vec<Vec<usize>> = src_tokens.iter().map(|s| vocab.encode(s)).collect();
    let opts = DecodeOptions {
        mode,
        rule: LengthRule::new(args.length_bias.unwrap_or(fitted_bias), args.half_width),
        length_normalize: !args.no_length_norm,
    };
    let candidates = decode_corpus(&model, teacher.as_ref(), &sources, &opts)?;
    let hyps: Vec<Vec<String>> = candidates.iter().map(|c| vocab.decode(&c.tokens)).collect();
    data::write_sentences(&args.out, &hyps)?;
    if let Some(tsv_path) = &args.tsv {
        let mut out = String::from("src\thyp\tdecode_score\trescore\n");
        for ((src, hyp), cand) in src_tokens.iter().zip(&hyps).zip(&candidates) {
            let rescore = cand
                .rescore
                .map(|r| format!("{r:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\n",
                src.join(" "),
                hyp.join(" "),
                cand.decode_score,
                rescore
            ));
        }
        std::fs::write(tsv_path, out).map_err(data::DataError::from)?;
    }
    println!("decoded {} sentences to {}", hyps.len(), args.out.display());
    Ok(())
}

fn cmd_sweep_beam(args: SweepArgs) -> Result<(), CliError> {
    require_exists(&args.src, "source file")?;
    require_exists(&args.reference, "reference file")?;
    let (model, vocab, fitted_bias) = load_checkpoint(&args.checkpoint)?;
    if model.crf.is_none() {
        return Err(CliError::Usage(
            "sweep-beam needs a checkpoint with CRF components".into(),
        ));
    }
    if args.half_width > 0 && args.rescore.is_none() {
        return Err(CliError::Usage(
            "--half-width requires --rescore with a teacher checkpoint".into(),
        ));
    }
    let teacher = args.rescore.as_deref().map(load_teacher).transpose()?;
    let task = args
        .task
        .as_deref()
        .map(|p| -> Result<MultimodalTask, CliError> {
            require_exists(p, "task spec")?;
            let spec = MultimodalTaskSpec::from_kv(&kv::read(p)?)?;
            Ok(MultimodalTask::build(spec)?)
        })
        .transpose()?;
    let src_tokens = data::read_sentences(&args.src)?;
    let ref_tokens = data::read_sentences(&args.reference)?;
    let rule = LengthRule::new(args.length_bias.unwrap_or(fitted_bias), args.half_width);
    let rows = bench::sweep_beam(
        &model,
        teacher.as_ref(),
        &vocab,
        task.as_ref(),
        &src_tokens,
        &ref_tokens,
        rule,
        &SWEEP_KS,
    )?;
    let mut out = format!("# {args:?}\n");
    out.push_str("k,bleu,consistency,mean_ms\n");
    for row in &rows {
        out.push_str(&format!(
            "{},{:.4},{:.6},{:.4}\n",
            row.k, row.bleu, row.consistency, row.mean_ms
        ));
        println!(
            "k={:<4} BLEU {:6.2}  consistency {:5.3}  {:8.3} ms/sentence",
            row.k, row.bleu, row.consistency, row.mean_ms
        );
    }
    std::fs::write(&args.out, out).map_err(data::DataError::from)?;
    Ok(())
}

fn parse_ks(raw: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Usage(format!("bad k value {p:?}: {e}")))
        })
        .collect()
}

fn cmd_bench_latency(args: BenchArgs) -> Result<(), CliError> {
    let ks = parse_ks(&args.ks)?;
    let (model, teacher, sources, rule) = match (&args.checkpoint, args.synthetic_vocab) {
        (Some(stem), None) => {
            let src_path = args.src.as_ref().ok_or_else(|| {
                CliError::Usage("--checkpoint benchmarking needs --src".into())
            })?;
            require_exists(src_path, "source file")?;
            let (model, vocab, fitted_bias) = load_checkpoint(stem)?;
            let teacher = args.rescore.as_deref().map(load_teacher).transpose()?;
            let src_tokens = data::read_sentences(src_path)?;
            let sources: Vec<Vec<usize>> =
                src_tokens.iter().map(|s| vocab.encode(s)).collect();
            let rule = LengthRule::new(args.length_bias.unwrap_or(fitted_bias), 0);
            (model, teacher, sources, rule)
        }
        (None, Some(vocab_size)) => {
            let (model, sources) = bench::synthetic_setup(
                vocab_size,
                args.n,
                args.sentences,
                Arch::NartCrf,
                args.seed,
            )?;
            let (teacher, _) =
                bench::synthetic_setup(vocab_size, args.n, 1, Arch::Teacher, args.seed + 1)?;
            (model, Some(teacher), sources, LengthRule::new(0, 0))
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --checkpoint or --synthetic-vocab".into(),
            ))
        }
    };
    let rows = bench::bench_latency(&model, teacher.as_ref(), &sources, rule, &ks, args.runs)?;
    let mut out = format!("# {args:?}\n");
    out.push_str("decoder,n,k,mean_ms,std_ms\n");
    for row in &rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4}\n",
            row.decoder, row.n, row.k, row.mean_ms, row.std_ms
        ));
        println!(
            "{:<8} n={:<3} k={:<4} {:9.3} ± {:.3} ms/sentence",
            row.decoder, row.n, row.k, row.mean_ms, row.std_ms
        );
    }
    std::fs::write(&args.out, out).map_err(data::DataError::from)?;
    Ok(())
}
