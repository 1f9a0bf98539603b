//! The `mbkt` command line.
//!
//! Training settings resolve in increasing precedence: built-in defaults,
//! the `MB_SEED` environment variable, a JSON `--config` file, then flags.
//! Progress goes to stderr and results to stdout. Exit codes: 0 success,
//! 1 usage, 2 data or configuration error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mbkt_core::gradcheck;
use mbkt_core::graph::{inject_backward_fault, OpKind};
use mbkt_core::{ConsistencyKind, HeadMode, ModalityMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablate::{ablate, ablation_markdown, markdown_table, AblationKind};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_dataset, save_dataset, Dataset};
use crate::split::split_dataset;
use crate::synth::{generate_synthetic, SyntheticSpec};
use crate::train::{default_mode, evaluate, parse_streams, train, TrainConfig};
use crate::Error;

pub const SEED_ENV: &str = "MB_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "mbkt",
    version,
    about = "Missing-modality sentiment model: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint, epoch log and run manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Run the fusion-target or consistency-loss ablation
    Ablate(AblateArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LabelMode {
    Sevenclass,
    Multilabel4,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Text,
    Markdown,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Defaults to MB_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sevenclass")]
    mode: LabelMode,
    /// Feature widths as V,L,A
    #[arg(long, default_value = "20,24,8")]
    dims: String,
    /// Give all three modalities the same length per sample
    #[arg(long)]
    aligned: bool,
    /// Audio noise relative to the clean audio std
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 4)]
    latent_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    vision_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    language_noise: f64,
    /// Length range MIN,MAX of vision (and of all modalities when aligned)
    #[arg(long, default_value = "8,14")]
    t_vision: String,
    #[arg(long, default_value = "6,10")]
    t_language: String,
    #[arg(long, default_value = "10,16")]
    t_audio: String,
    /// Also write stratified train/valid/test files with these fractions
    #[arg(long)]
    split: Option<String>,
}

/// Every [`TrainConfig`] field as an optional override.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// JSON file with TrainConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// L1 or L2
    #[arg(long)]
    consistency: Option<String>,
    /// missing_audio, full_modality, vision_only, language_only or language_vision
    #[arg(long)]
    mode: Option<String>,
    /// Fusion targets, e.g. L,A,V
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_ratio: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// true or false
    #[arg(long)]
    detach_acoustic_target: Option<bool>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training set (not needed with --manifest)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Epoch log; defaults to <out>.log.jsonl
    #[arg(long)]
    log: Option<PathBuf>,
    /// Rerun exactly the run described by this manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the mode the checkpoint was trained for
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Run only this check (an op name such as layer_norm, or a block)
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// targets, loss or both
    #[arg(long, default_value = "both")]
    which: String,
    /// Comma-separated seeds; defaults to the configured seed
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
    #[command(flatten)]
    flags: TrainFlags,
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub command: Vec<String>,
    pub timestamp: u64,
    pub seed: u64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad {what} {s:?}"))))
        .collect()
}

fn parse_range(s: &str, what: &str) -> Result<(usize, usize), Failure> {
    match parse_list::<usize>(s, what)?.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(usage(format!("{what} must be MIN,MAX"))),
    }
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Defaults, then `MB_SEED`, then the JSON config file, then flags.
fn resolve_config(flags: &TrainFlags) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &flags.config {
        let overlay: serde_json::Value = read_json_file(path)?;
        let serde_json::Value::Object(overlay) = overlay else {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())).into());
        };
        let mut merged = serde_json::to_value(&cfg).expect("config serializes");
        let obj = merged.as_object_mut().expect("config is an object");
        for (k, v) in overlay {
            obj.insert(k, v);
        }
        cfg = serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = flags.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        epochs,
        lr,
        batch_size,
        lambda1,
        lambda2,
        d_model,
        heads,
        ffn_ratio,
        depth,
        dropout,
        seed,
        weight_decay,
        threads,
        detach_acoustic_target
    );
    if flags.max_epochs.is_some() {
        cfg.max_epochs = flags.max_epochs;
    }
    if flags.grad_clip.is_some() {
        cfg.grad_clip = flags.grad_clip;
    }
    if let Some(k) = &flags.consistency {
        cfg.consistency =
            ConsistencyKind::from_name(k).ok_or_else(|| usage(format!("unknown consistency loss {k:?}")))?;
    }
    if let Some(m) = &flags.mode {
        cfg.mode = ModalityMode::from_name(m).ok_or_else(|| usage(format!("unknown mode {m:?}")))?;
    }
    if let Some(t) = &flags.targets {
        let names: Vec<&str> = t.split(',').collect();
        cfg.targets = Some(parse_streams(&names).map_err(usage)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let dims = parse_list::<usize>(&a.dims, "--dims")?;
    let [d_v, d_l, d_a] = dims[..] else {
        return Err(usage("--dims needs three widths V,L,A"));
    };
    let spec = SyntheticSpec {
        n_samples: a.n,
        dims: [d_v, d_l, d_a],
        head: match a.mode {
            LabelMode::Sevenclass => HeadMode::SevenClass,
            LabelMode::Multilabel4 => HeadMode::MultiLabel4,
        },
        aligned: a.aligned,
        t_ranges: [
            parse_range(&a.t_vision, "--t-vision")?,
            parse_range(&a.t_language, "--t-language")?,
            parse_range(&a.t_audio, "--t-audio")?,
        ],
        latent_dim: a.latent_dim,
        sigma: a.sigma,
        vision_noise: a.vision_noise,
        language_noise: a.language_noise,
    };
    let fractions = match &a.split {
        Some(s) => match parse_list::<f64>(s, "--split")?[..] {
            [x, y, z] => Some([x, y, z]),
            _ => return Err(usage("--split needs three fractions")),
        },
        None => None,
    };
    let ds = generate_synthetic(&spec, seed).map_err(usage)?;
    let parts = match fractions {
        Some(f) => Some(split_dataset(&ds, f, seed).map_err(|e| usage(e.to_string()))?),
        None => None,
    };
    save_dataset(&ds, &a.out).map_err(Error::from)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "path={}", a.out.display());
    summarize(&mut out, "", &ds);
    if let Some((tr, va, te)) = parts {
        for (name, part) in [("train", &tr), ("valid", &va), ("test", &te)] {
            let path = a.out.with_extension(format!("{name}.jsonl"));
            save_dataset(part, &path).map_err(Error::from)?;
            let _ = writeln!(out, "{name}_path={}", path.display());
            summarize(&mut out, &format!("{name}_"), part);
        }
    }
    Ok(())
}

fn summarize(out: &mut impl Write, prefix: &str, ds: &Dataset) {
    let _ = writeln!(out, "{prefix}samples={}", ds.len());
    if prefix.is_empty() {
        let _ = writeln!(out, "dims={},{},{}", ds.dims[0], ds.dims[1], ds.dims[2]);
        let _ = writeln!(out, "mode={}", ds.head.name());
        let _ = writeln!(out, "aligned={}", ds.aligned);
    }
    for (c, n) in ds.class_counts().iter().enumerate() {
        let _ = writeln!(out, "{prefix}class_{c}={n}");
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs, argv: Vec<String>) -> CliResult {
    let (cfg, data_path) = match &a.manifest {
        Some(m) => {
            let manifest: RunManifest = read_json_file(m)?;
            let bytes = fs::read(&manifest.dataset).map_err(|source| Error::Io {
                path: manifest.dataset.clone(),
                source,
            })?;
            if sha256_hex(&bytes) != manifest.dataset_sha256 {
                return Err(Error::Config(format!(
                    "{} changed since the manifest was written",
                    manifest.dataset.display()
                ))
                .into());
            }
            (manifest.config, manifest.dataset)
        }
        None => {
            let data = a
                .data
                .clone()
                .ok_or_else(|| usage("--data is required without --manifest"))?;
            (resolve_config(&a.flags)?, data)
        }
    };
    let bytes = fs::read(&data_path).map_err(|source| Error::Io {
        path: data_path.clone(),
        source,
    })?;
    let ds = load_dataset(&data_path).map_err(Error::from)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        dataset: data_path.clone(),
        dataset_sha256: sha256_hex(&bytes),
        command: argv,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        seed: cfg.seed,
    };
    let manifest_path = with_suffix(&a.out, ".manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path, &json)?;

    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.jsonl"));
    let mut log = fs::File::create(&log_path).map_err(|source| Error::Io {
        path: log_path.clone(),
        source,
    })?;
    let start = Instant::now();
    let total = cfg.effective_epochs();
    let mut log_err = None;
    let outcome = train(&cfg, &ds, |e| {
        eprintln!(
            "epoch {}/{} loss={:.4} pred={:.4} cv={:.4} cl={:.4} ({:.1}s)",
            e.epoch,
            total,
            e.total,
            e.prediction,
            e.consistency_vision,
            e.consistency_language,
            start.elapsed().as_secs_f64()
        );
        let line = serde_json::to_string(e).expect("epoch log serializes");
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(source) = log_err {
        return Err(Error::Io { path: log_path, source }.into());
    }
    save_checkpoint(&outcome.model, &a.out).map_err(Error::from)?;
    let last = outcome.epochs.last().expect("at least one epoch");
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "checkpoint={}", a.out.display());
    let _ = writeln!(out, "epochs={}", last.epoch);
    let _ = writeln!(out, "loss={}", last.total);
    for (k, v) in &last.train_metrics {
        let _ = writeln!(out, "train_{k}={v}");
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<ModalityMode, Failure> {
    ModalityMode::from_name(s).ok_or_else(|| usage(format!("unknown mode {s:?}")))
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let model = load_checkpoint(&a.checkpoint).map_err(Error::from)?;
    let ds = load_dataset(&a.data).map_err(Error::from)?;
    let mode = match &a.mode {
        Some(m) => parse_mode(m)?,
        None => default_mode(&model.cfg),
    };
    let report = evaluate(&model, &ds, mode)?;
    match a.format {
        Format::Text => print!("{report}"),
        Format::Markdown => print!(
            "{}",
            markdown_table("Mode", &[(mode.name().to_string(), report.records())])
        ),
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    if let Some(name) = &a.inject_fault {
        let kind = OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op {name:?}")))?;
        inject_backward_fault(kind);
    }
    if let Some(op) = &a.op {
        if !gradcheck::check_names().contains(&op.as_str()) {
            return Err(usage(format!(
                "unknown check {op:?}; available: {}",
                gradcheck::check_names().join(", ")
            )));
        }
    }
    let start = Instant::now();
    let reports = gradcheck::run_all(a.op.as_deref(), a.trials, a.seed).map_err(Error::from)?;
    print!("{}", gradcheck::describe(&reports));
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "checks={} failed={} tolerance={:e} seconds={:.1}",
        reports.len(),
        failed,
        gradcheck::TOLERANCE,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient check(s) exceeded the tolerance")).into());
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> CliResult {
    let base = resolve_config(&a.flags)?;
    let kinds = match a.which.as_str() {
        "both" => vec![AblationKind::Targets, AblationKind::Loss],
        other => vec![AblationKind::from_name(other)
            .ok_or_else(|| usage(format!("--which {other:?}: expected targets, loss or both")))?],
    };
    let seeds = match &a.seeds {
        Some(s) => parse_list::<u64>(s, "--seeds")?,
        None => vec![base.seed],
    };
    let train_set = load_dataset(&a.train).map_err(Error::from)?;
    let test_set = load_dataset(&a.test).map_err(Error::from)?;
    for kind in kinds {
        let rows = ablate(kind, &base, &seeds, &train_set, &test_set, |row, seed| {
            eprintln!("ablate {kind:?}: row {row} seed {seed}");
        })?;
        match a.format {
            Format::Markdown => println!("{}", ablation_markdown(kind, &rows)),
            Format::Text => {
                for r in &rows {
                    for (seed, report) in &r.per_seed {
                        let fields: Vec<String> = report.records().iter().map(|(k, v)| format!("{k}={v}")).collect();
                        println!("row={} seed={seed} {}", r.label, fields.join(" "));
                    }
                }
            }
        }
    }
    Ok(())
}
