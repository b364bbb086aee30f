//! Command-line entry point: corpus synthesis, training, evaluation, batch
//! generation, and gradient verification.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error.

use clap::{Args, Parser, Subcommand};
use mrg_core::data::{build_vocab, load_corpus, write_records, DialogExample, Vocabulary};
use mrg_core::error::Error;
use mrg_core::eval::{embeddings_from_model, evaluate_corpus, generate_corpus};
use mrg_core::manifest::{sha256_file, RunManifest};
use mrg_core::metrics::BowEmbeddings;
use mrg_core::model::BeamParams;
use mrg_core::params::Checkpoint;
use mrg_core::synth::{synth_generate, SynthConfig};
use mrg_core::training::{model_from_checkpoint, train_loop, TrainConfig, TrainOutcome};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "mrg", version, about = "Joint dialog response generation and extractive QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialog-QA corpus split into train/val/test.
    Synth(SynthArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus and write a metric report.
    Eval(EvalArgs),
    /// Batch-decode a corpus to JSONL.
    Generate(GenerateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total number of examples across the three splits.
    #[arg(long)]
    n: usize,
    /// Output directory for train.jsonl / val.jsonl / test.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Distinct entities to draw from the pool.
    #[arg(long, default_value_t = 12)]
    entities: usize,
    /// Template family mixture as three comma-separated weights.
    #[arg(long, default_value = "0.49,0.285,0.225")]
    weights: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable `key=value` override for any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// joint | response_only | answer_only.
    #[arg(long)]
    mode: Option<String>,
    /// Replace the cross-attention stack with an identity pass-through.
    #[arg(long)]
    no_mcam: bool,
    /// Skip hierarchical self-attention; pool encoder states directly.
    #[arg(long)]
    no_mam: bool,
    /// Bypass the gated memory updater.
    #[arg(long)]
    no_memupd: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Report JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// External embedding file for the bag-of-words metrics.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Also report corpus-level BLEU-4.
    #[arg(long)]
    corpus_bleu: bool,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    min_decode: Option<usize>,
    #[arg(long)]
    max_decode: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    min_decode: Option<usize>,
    #[arg(long)]
    max_decode: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the named op's adjoint to prove the checker catches it.
    #[arg(long)]
    inject_fault: Option<String>,
    /// Check individual operations only.
    #[arg(long)]
    ops_only: bool,
    /// Check the assembled model only.
    #[arg(long)]
    model_only: bool,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

const OP_NAMES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "pick_per_row",
    "sum",
    "mean_pool",
    "concat0",
    "concat_cols",
    "slice_cols",
    "slice_rows",
    "reshape",
    "layer_norm",
    "embed",
    "bce_with_logits",
];

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data { .. } | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 2,
        Error::Shape(_) | Error::NonFiniteGrad(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode, Error> {
    let start = Instant::now();
    let weights: Vec<f64> = args
        .weights
        .split(',')
        .map(|w| w.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad weight `{w}`"))))
        .collect::<Result<_, _>>()?;
    if weights.len() != 3 {
        return Err(Error::Config("expected exactly three family weights".into()));
    }
    if args.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&args.train_frac)
        || !(0.0..=1.0).contains(&args.val_frac)
        || args.train_frac + args.val_frac > 1.0
    {
        return Err(Error::Config("split fractions must be in [0,1] and sum to at most 1".into()));
    }
    let config = SynthConfig {
        n_entities: args.entities,
        family_weights: [weights[0], weights[1], weights[2]],
    };
    let records = synth_generate(args.seed, args.n, &config)?;
    std::fs::create_dir_all(&args.out)?;
    let n_train = (args.n as f64 * args.train_frac).round() as usize;
    let n_val = ((args.n as f64 * args.val_frac).round() as usize).min(args.n - n_train);
    let (train, rest) = records.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    let paths = [
        (args.out.join("train.jsonl"), train),
        (args.out.join("val.jsonl"), val),
        (args.out.join("test.jsonl"), test),
    ];
    for (path, recs) in &paths {
        write_records(path, recs)?;
    }
    println!(
        "wrote {} train / {} val / {} test examples under {}",
        train.len(),
        val.len(),
        test.len(),
        args.out.display()
    );
    RunManifest {
        command: "synth".into(),
        config: serde_json::json!({
            "n": args.n,
            "entities": args.entities,
            "weights": weights,
            "train_frac": args.train_frac,
            "val_frac": args.val_frac,
        }),
        seed: args.seed,
        inputs: vec![],
        outputs: paths.iter().map(|(p, _)| p.display().to_string()).collect(),
        checkpoint_sha256: None,
        duration_secs: start.elapsed().as_secs_f64(),
    }
    .write_next_to(&args.out.join("synth"))?;
    Ok(ExitCode::SUCCESS)
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_file(&text)?;
    }
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.apply_kv(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse()?;
    }
    if args.no_mcam {
        cfg.use_mcam = false;
    }
    if args.no_mam {
        cfg.use_mam = false;
    }
    if args.no_memupd {
        cfg.use_memory_update = false;
    }
    Ok(cfg)
}

fn load_split(path: &Path, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Vec<DialogExample>, Error> {
    load_corpus(path, vocab, &cfg.window(), cfg.tokenization())
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let start = Instant::now();
    let cfg = build_train_config(&args)?;
    let train_records = mrg_core::data::read_records(&args.train)?;
    if train_records.is_empty() {
        return Err(Error::Config(format!("{} holds no records", args.train.display())));
    }
    let vocab = build_vocab(&train_records, cfg.tokenization(), cfg.vocab_cap);
    let train = load_split(&args.train, &vocab, &cfg)?;
    let val = load_split(&args.val, &vocab, &cfg)?;

    let outcome: TrainOutcome<f32> = train_loop(&cfg, &train, &val, &vocab)?;
    let ckpt = outcome.checkpoint()?;
    ensure_parent(&args.out)?;
    ckpt.save(&args.out)?;
    let vocab_path = {
        let name = args.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        args.out.with_file_name(format!("{name}.vocab.txt"))
    };
    vocab.save(&vocab_path)?;

    println!(
        "trained {} steps (mode {}, seed {}); best validation loss {:.6} at step {}{}",
        outcome.steps_run,
        cfg.mode,
        cfg.seed,
        outcome.best_val_loss,
        outcome.best_step,
        if outcome.stopped_early { "; stopped early on target" } else { "" }
    );
    println!("checkpoint: {}", args.out.display());

    RunManifest {
        command: "train".into(),
        config: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        inputs: vec![args.train.display().to_string(), args.val.display().to_string()],
        outputs: vec![args.out.display().to_string(), vocab_path.display().to_string()],
        checkpoint_sha256: Some(sha256_file(&args.out)?),
        duration_secs: start.elapsed().as_secs_f64(),
    }
    .write_next_to(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn beam_from(meta_cfg: &TrainConfig, beam: Option<usize>, min: Option<usize>, max: Option<usize>) -> BeamParams {
    BeamParams {
        beam: beam.unwrap_or(meta_cfg.beam),
        min_len: min.unwrap_or(meta_cfg.min_decode),
        max_len: max.unwrap_or(meta_cfg.max_decode),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let start = Instant::now();
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let (model, meta, vocab) = model_from_checkpoint(&ckpt)?;
    let test = load_corpus(
        &args.test,
        &vocab,
        &meta.train_config.window(),
        meta.train_config.tokenization(),
    )?;
    let beam = beam_from(&meta.train_config, args.beam, args.min_decode, args.max_decode);
    let embeddings = match &args.embeddings {
        Some(path) => BowEmbeddings::parse(&std::fs::read_to_string(path)?)?,
        None => embeddings_from_model(&model, &vocab),
    };
    let report = evaluate_corpus(&model, &vocab, &test, &beam, &embeddings, args.corpus_bleu)?;
    ensure_parent(&args.out)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    let m = &report.means;
    println!(
        "n={} bleu1={:.4} bleu2={:.4} bleu3={:.4} bleu4={:.4} average={:.4} extrema={:.4} greedy={:.4} answer_em={:.4} answer_f1={:.4}",
        report.n_examples,
        m.bleu1,
        m.bleu2,
        m.bleu3,
        m.bleu4,
        m.bow_average,
        m.bow_extrema,
        m.bow_greedy,
        m.answer_exact_match,
        m.answer_f1
    );
    RunManifest {
        command: "eval".into(),
        config: serde_json::json!({
            "beam": beam.beam, "min_decode": beam.min_len, "max_decode": beam.max_len,
            "corpus_bleu": args.corpus_bleu,
            "external_embeddings": args.embeddings.as_ref().map(|p| p.display().to_string()),
        }),
        seed: meta.train_config.seed,
        inputs: vec![args.checkpoint.display().to_string(), args.test.display().to_string()],
        outputs: vec![args.out.display().to_string()],
        checkpoint_sha256: Some(sha256_file(&args.checkpoint)?),
        duration_secs: start.elapsed().as_secs_f64(),
    }
    .write_next_to(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode, Error> {
    let start = Instant::now();
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let (model, meta, vocab) = model_from_checkpoint(&ckpt)?;
    let input = load_corpus(
        &args.input,
        &vocab,
        &meta.train_config.window(),
        meta.train_config.tokenization(),
    )?;
    let beam = beam_from(&meta.train_config, args.beam, args.min_decode, args.max_decode);
    let records = generate_corpus(&model, &vocab, &input, &beam)?;
    ensure_parent(&args.out)?;
    let mut out = String::new();
    for rec in &records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(&args.out, out)?;
    println!("decoded {} examples to {}", records.len(), args.out.display());
    RunManifest {
        command: "generate".into(),
        config: serde_json::json!({
            "beam": beam.beam, "min_decode": beam.min_len, "max_decode": beam.max_len,
        }),
        seed: meta.train_config.seed,
        inputs: vec![args.checkpoint.display().to_string(), args.input.display().to_string()],
        outputs: vec![args.out.display().to_string()],
        checkpoint_sha256: Some(sha256_file(&args.checkpoint)?),
        duration_secs: start.elapsed().as_secs_f64(),
    }
    .write_next_to(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, Error> {
    let start = Instant::now();
    let fault: Option<&'static str> = match args.inject_fault.as_deref() {
        None => None,
        Some(name) => Some(
            OP_NAMES
                .iter()
                .copied()
                .find(|&op| op == name)
                .ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?,
        ),
    };

    let mut report = mrg_core::gradcheck::CheckReport::default();
    if !args.model_only {
        let ops = mrg_core::gradcheck::check_ops(fault)?;
        report.entries.extend(ops.entries);
    }
    if !args.ops_only {
        let model = mrg_core::gradcheck::check_model(args.seed, fault)?;
        for mut e in model.entries {
            e.name = format!("model/{}", e.name);
            report.entries.push(e);
        }
    }
    print!("{}", report.render());
    let pass = report.pass();
    println!(
        "gradcheck {} in {:.1}s ({} checks)",
        if pass { "passed" } else { "FAILED" },
        start.elapsed().as_secs_f64(),
        report.entries.len()
    );
    if let Some(out) = &args.out {
        ensure_parent(out)?;
        let entries: Vec<serde_json::Value> = report
            .entries
            .iter()
            .map(|e| serde_json::json!({"name": e.name, "max_rel_err": e.max_rel_err, "pass": e.pass}))
            .collect();
        std::fs::write(
            out,
            serde_json::to_string_pretty(&serde_json::json!({
                "pass": pass,
                "entries": entries,
            }))?,
        )?;
        RunManifest {
            command: "gradcheck".into(),
            config: serde_json::json!({
                "inject_fault": args.inject_fault,
                "ops_only": args.ops_only,
                "model_only": args.model_only,
            }),
            seed: args.seed,
            inputs: vec![],
            outputs: vec![out.display().to_string()],
            checkpoint_sha256: None,
            duration_secs: start.elapsed().as_secs_f64(),
        }
        .write_next_to(out)?;
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
