//! Command-line driver: pretrain, finetune, eval, gradcheck and synth.

pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kgformer_autodiff::gradcheck::GradcheckOptions;
use kgformer_core::batch::EntityTokens;
use kgformer_core::evaluator::{evaluate_split, EvalError, RankingReport};
use kgformer_core::gradcheck::full_suite;
use kgformer_core::graphstore::{load_graph, make_synthetic_kg, GraphError, KnowledgeGraphDataset, Split, SynthSpec};
use kgformer_core::model::{Model, ModelError, Tag, RELATION_TABLE};
use kgformer_core::persist::{load_checkpoint, save_checkpoint, transfer_init, Checkpoint, PersistError};
use kgformer_core::rng::{substream, SUBSAMPLE};
use kgformer_core::textcodec::{build_vocab, TextError, Vocab};
use kgformer_core::trainer::{fit, TrainError};
use rand::seq::index;

pub use config::RunConfig;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INCOMPATIBLE: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: 1, message: format!("{}: {e}", path.display()) }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::NonFinite { .. } => EXIT_NUMERIC,
            TrainError::Sink(_) => 1,
            _ => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        let code = if matches!(e, PersistError::Incompatible { .. }) { EXIT_INCOMPATIBLE } else { EXIT_CONFIG };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "kgformer", version, about = "Text-based knowledge-graph completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch and evaluate on dev.
    Pretrain(RunArgs),
    /// Transfer a checkpoint to the configured dataset and continue training.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Rank a split with a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Finite-difference check of every op and the full loss.
    Gradcheck {
        /// Negate the analytic gradient of the named check.
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic attribute-grid KG.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        entities: usize,
        /// Values per attribute family, comma separated.
        #[arg(long, default_value = "5,5,8")]
        values: String,
        #[arg(long, default_value_t = 5)]
        relations: usize,
        /// 0 keeps every rule instance.
        #[arg(long, default_value_t = 0)]
        triplets: usize,
        #[arg(long, default_value_t = 0.0)]
        inductive: f64,
        #[arg(long, default_value_t = 0.1)]
        dev_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Pretrain(run) => pretrain(&run),
        Command::Finetune { run, from, train_fraction } => finetune(&run, &from, train_fraction),
        Command::Eval { run, checkpoint, split } => eval(&run, &checkpoint, &split),
        Command::Gradcheck { inject_fault, seed } => gradcheck(inject_fault, seed),
        Command::Synth { out, seed, entities, values, relations, triplets, inductive, dev_fraction, test_fraction } => {
            let values_per_family = values
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|_| CliError::config(format!("bad --values entry {v:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let spec = SynthSpec { entities, values_per_family, relations, triplets, inductive_fraction: inductive, dev_fraction, test_fraction };
            synth(&spec, seed, &out)
        }
    }
}

fn resolve(run: &RunArgs) -> Result<RunConfig, CliError> {
    let overrides = run
        .set
        .iter()
        .map(|s| s.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).ok_or_else(|| CliError::config(format!("--set {s:?}: expected KEY=VALUE"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = RunConfig::load(run.config.as_deref(), &overrides)?;
    if let Some(out) = &run.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::config(format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display())))
            }
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_manifest(cfg: &RunConfig, command: &str, extra: &[(&str, String)]) -> Result<(), CliError> {
    let mut text = format!("command = {command}\nversion = {}\nseed = {}\n", env!("CARGO_PKG_VERSION"), cfg.seed);
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str("\n[config]\n");
    text.push_str(&cfg.snapshot());
    let path = cfg.out_dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn load_dataset(cfg: &RunConfig) -> Result<KnowledgeGraphDataset, CliError> {
    let (paths, texts) = cfg.split_paths()?;
    let ds = load_graph(&paths, &texts)?;
    let w = ds.warnings();
    if w.missing_surface_forms > 0 {
        log::warn!("{} entities have no text; their ids are used instead", w.missing_surface_forms);
    }
    if ds.train_relation_count() == 0 {
        return Err(CliError::config("train split is empty"));
    }
    Ok(ds)
}

fn vocab_for(cfg: &RunConfig, ds: &KnowledgeGraphDataset, beside: Option<&Path>) -> Result<Vocab, CliError> {
    if let Some(path) = &cfg.vocab {
        return Ok(Vocab::read(path)?);
    }
    if let Some(ckpt) = beside {
        let path = ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt");
        return Ok(Vocab::read(&path)?);
    }
    Ok(build_vocab(ds.surfaces().iter().map(String::as_str), cfg.vocab_target)?)
}

fn train_and_save(cfg: &RunConfig, ds: &KnowledgeGraphDataset, vocab: &Vocab, mut model: Model<f32>) -> Result<(), CliError> {
    let tokens = EntityTokens::build(ds, vocab, model.config().max_len)?;
    let trace_path = cfg.out_dir.join("trace.jsonl");
    let mut trace = BufWriter::new(File::create(&trace_path).map_err(|e| CliError::io(&trace_path, e))?);
    let seed = cfg.seed;
    fit(&mut model, ds, &tokens, &cfg.train_config(), |r| {
        let line = serde_json::json!({ "seed": seed, "step": r.step, "loss": r.loss, "lr_fresh": r.lr_fresh, "lr_loaded": r.lr_loaded });
        writeln!(trace, "{line}").map_err(|e| e.to_string())
    })?;
    trace.flush().map_err(|e| CliError::io(&trace_path, e))?;

    let vocab_path = cfg.out_dir.join("vocab.txt");
    vocab.write(&vocab_path)?;
    let ckpt = Checkpoint::new(model, vocab.hash());
    save_checkpoint(&ckpt, &cfg.out_dir.join("model.ckpt"))?;
    let report = evaluate_split(&ckpt.model, ds, &tokens, Split::Dev, &cfg.eval_options()?)?;
    write_report(cfg, ds, &report)
}

fn write_report(cfg: &RunConfig, ds: &KnowledgeGraphDataset, report: &RankingReport) -> Result<(), CliError> {
    let path = cfg.out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&report.to_json(ds)).expect("report serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    let m = report.metrics;
    println!(
        "{} queries={} MRR={:.4} Hits@1={:.4} Hits@3={:.4} Hits@10={:.4}",
        report.split.name(),
        report.query_count(),
        m.mrr,
        m.hits1,
        m.hits3,
        m.hits10
    );
    Ok(())
}

fn pretrain(run: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve(run)?;
    let ds = load_dataset(&cfg)?;
    let vocab = vocab_for(&cfg, &ds, None)?;
    let mut model = Model::<f32>::new(cfg.model_config(ds.train_relation_count(), vocab.len()))?;
    if cfg.transfer_tags {
        model.set_all_tags(Tag::Loaded);
        model.param_mut(RELATION_TABLE).expect("relation table").tag = Tag::Fresh;
    }
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    write_manifest(&cfg, "pretrain", &[("vocab_hash", vocab.hash())])?;
    train_and_save(&cfg, &ds, &vocab, model)
}

/// The first `⌊f·|train|⌋` triplets of a seeded permutation, in file order.
pub fn subsample_train(ds: &KnowledgeGraphDataset, fraction: f64, seed: u64) -> KnowledgeGraphDataset {
    let train = ds.split(Split::Train);
    let keep = (fraction * train.len() as f64).floor() as usize;
    let mut picked = index::sample(&mut substream(seed, SUBSAMPLE), train.len(), keep).into_vec();
    picked.sort_unstable();
    ds.with_train(picked.into_iter().map(|i| train[i]).collect())
}

fn finetune(run: &RunArgs, from: &Path, fraction: Option<f64>) -> Result<(), CliError> {
    let mut cfg = resolve(run)?;
    if let Some(f) = fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::config(format!("--train-fraction {f} outside (0, 1]")));
        }
        cfg.train_fraction = f;
    }
    let mut ds = load_dataset(&cfg)?;
    if cfg.train_fraction < 1.0 {
        ds = subsample_train(&ds, cfg.train_fraction, cfg.seed);
        if ds.split(Split::Train).is_empty() {
            return Err(CliError::config("train fraction leaves no triplets"));
        }
    }
    let ckpt = load_checkpoint(from)?;
    let vocab = vocab_for(&cfg, &ds, Some(from))?;
    let target = cfg.model_config(ds.train_relation_count(), vocab.len());
    let model = transfer_init(&ckpt, &target, &vocab.hash())?;
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    write_manifest(
        &cfg,
        "finetune",
        &[("from", from.display().to_string()), ("vocab_hash", vocab.hash()), ("train_triplets", ds.split(Split::Train).len().to_string())],
    )?;
    train_and_save(&cfg, &ds, &vocab, model)
}

fn eval(run: &RunArgs, checkpoint: &Path, split: &str) -> Result<(), CliError> {
    let cfg = resolve(run)?;
    let split: Split = split.parse().map_err(CliError::config)?;
    if !checkpoint.is_file() {
        return Err(CliError::config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let ds = load_dataset(&cfg)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab = vocab_for(&cfg, &ds, Some(checkpoint))?;
    if vocab.hash() != ckpt.vocab_hash {
        return Err(CliError { code: EXIT_INCOMPATIBLE, message: "vocabulary does not match the checkpoint".into() });
    }
    let tokens = EntityTokens::build(&ds, &vocab, ckpt.model.config().max_len)?;
    let report = evaluate_split(&ckpt.model, &ds, &tokens, split, &cfg.eval_options()?)?;
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    write_manifest(&cfg, "eval", &[("checkpoint", checkpoint.display().to_string()), ("split", split.name().to_string())])?;
    write_report(&cfg, &ds, &report)
}

fn gradcheck(inject_fault: Option<String>, seed: u64) -> Result<(), CliError> {
    let opts = GradcheckOptions { flip_sign: inject_fault, ..GradcheckOptions::default() };
    let results = full_suite(&opts, seed).map_err(|e| CliError { code: EXIT_GRADCHECK, message: e.to_string() })?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<28} max_rel_err={:.3e} {}", r.name, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
        if !r.passed {
            failed.push(format!("{} ({:.3e})", r.name, r.max_rel_err));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError { code: EXIT_GRADCHECK, message: format!("gradient check failed: {}", failed.join(", ")) })
    }
}

fn synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<(), CliError> {
    let kg = make_synthetic_kg(spec, seed)?;
    let _lock = OutputLock::acquire(out)?;
    kg.write(out)?;
    println!("{:<6} {:>9} {:>9} {:>9}", "split", "relations", "entities", "triplets");
    for s in kg.dataset.stats() {
        println!("{:<6} {:>9} {:>9} {:>9}", s.split.name(), s.relations, s.entities, s.triplets);
    }
    Ok(())
}
