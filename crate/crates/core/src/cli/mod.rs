//! The `protopool` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

use crate::analysis::{self, AnalysisError, Distributions};
use crate::dataio::{self, generate_synthetic, read_dataset, write_dataset, DataError, FeatureMapDataset, SyntheticSpec};
use crate::training::{
    self, load_checkpoint, project_prototypes, save_checkpoint, CheckpointError, Phase, ProjectionReport, TrainError,
    TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Invalid(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<crate::poolcore::ModelError> for CliError {
    fn from(e: crate::poolcore::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "protopool", version, about = "Prototype-pool classifier over precomputed feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-part dataset and its ground-truth manifest.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint.ppck, metrics.csv and config.resolved.
    Train(RunArgs),
    /// Print accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Replace every prototype by its nearest training patch.
    Project(ProjectArgs),
    /// Export assignment, sharing and activation analyses.
    Analyze(AnalyzeArgs),
    /// Train the full model and the three single-mechanism ablations.
    Ablate(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    parts: usize,
    #[arg(long, default_value_t = 3)]
    parts_per_class: usize,
    #[arg(long, default_value_t = 0.5)]
    shared: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    #[arg(long, default_value_t = 1.5)]
    background_offset: f64,
    #[arg(long, default_value_t = 7)]
    height: usize,
    #[arg(long, default_value_t = 7)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    depth: usize,
    #[arg(long, default_value_t = 50)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// key=value configuration file; flags override it.
    #[arg(short = 'c', long = "config")]
    config: Option<PathBuf>,
    /// PPFM dataset; the default synthetic dataset is used when absent.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    slots: Option<String>,
    #[arg(long)]
    prototypes: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    /// Total epoch budget over all phases.
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_parser = ["paper", "classic", "off"])]
    gumbel: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    orth: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    focal: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other configuration key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            cfg.apply_text(kv, "--set")?;
        }
        let flags = [
            ("data", &self.data),
            ("classes", &self.classes),
            ("slots", &self.slots),
            ("prototypes", &self.prototypes),
            ("depth", &self.depth),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("gumbel", &self.gumbel),
            ("orth", &self.orth),
            ("focal", &self.focal),
            ("epsilon", &self.epsilon),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(|e| CliError::Usage(format!("--{key}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Also print per-class accuracy.
    #[arg(long)]
    per_class: bool,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training data. With --val-fraction only the training part of the split is used.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output checkpoint; the input is rewritten when absent.
    #[arg(short = 'o', long = "out")]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AnalysisKind {
    Assignment,
    Histogram,
    Sharing,
    Graph,
    Activation,
    Correlation,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    kind: AnalysisKind,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Read hardened one-hot slots instead of the relaxed distributions.
    #[arg(long)]
    hardened: bool,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Dataset for activation maps, or the synthetic dataset whose manifest
    /// is used for correlation.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    prototype: usize,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => a.resolve().and_then(|cfg| train_cmd(&cfg)),
        Command::Eval(a) => eval_cmd(&a),
        Command::Project(a) => project_cmd(&a),
        Command::Analyze(a) => analyze_cmd(&a),
        Command::Ablate(a) => a.resolve().and_then(|cfg| ablate_cmd(&cfg)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        classes: a.classes,
        parts: a.parts,
        parts_per_class: a.parts_per_class,
        shared_fraction: a.shared,
        sigma: a.sigma,
        background_offset: a.background_offset,
        jitter: a.jitter,
        height: a.height,
        width: a.width,
        depth: a.depth,
        samples_per_class: a.samples_per_class,
        seed: a.seed,
    };
    let (ds, manifest) = generate_synthetic(&spec).map_err(|e| match e {
        DataError::Spec(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_dataset(&ds, &a.out)?;
    let (classes_csv, samples_csv) = dataio::write_manifest(&manifest, &a.out)?;
    let mut resolved = String::new();
    for (k, v) in [
        ("classes", spec.classes.to_string()),
        ("parts", spec.parts.to_string()),
        ("parts_per_class", spec.parts_per_class.to_string()),
        ("shared", format!("{:?}", spec.shared_fraction)),
        ("sigma", format!("{:?}", spec.sigma)),
        ("jitter", format!("{:?}", spec.jitter)),
        ("background_offset", format!("{:?}", spec.background_offset)),
        ("height", spec.height.to_string()),
        ("width", spec.width.to_string()),
        ("depth", spec.depth.to_string()),
        ("samples_per_class", spec.samples_per_class.to_string()),
        ("seed", spec.seed.to_string()),
    ] {
        let _ = writeln!(resolved, "{k}={v}");
    }
    let resolved_path = a.out.with_extension("config.resolved");
    write_text(&resolved_path, &resolved)?;
    println!("wrote {} ({} samples)", a.out.display(), ds.len());
    println!("wrote {}", classes_csv.display());
    println!("wrote {}", samples_csv.display());
    Ok(())
}

/// Loads the configured dataset, or generates the default synthetic one.
fn load_data(cfg: &RunConfig) -> Result<FeatureMapDataset, CliError> {
    match &cfg.data {
        Some(path) => Ok(read_dataset(path)?),
        None => {
            let spec = SyntheticSpec {
                seed: cfg.synth_seed,
                ..SyntheticSpec::default()
            };
            Ok(generate_synthetic(&spec)?.0)
        }
    }
}

fn train_error(e: TrainError, out: &Path) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Usage(m),
        TrainError::Model(m) => CliError::Data(m.to_string()),
        TrainError::Checkpoint(c) => CliError::Data(c.to_string()),
        TrainError::Diverged {
            phase,
            epoch,
            what,
            last_good,
        } => {
            let path = out.join("last_good.ppck");
            let saved = match save_checkpoint(&last_good, &path) {
                Ok(()) => format!("; last good state saved to {}", path.display()),
                Err(err) => format!("; could not save last good state: {err}"),
            };
            CliError::Numeric(format!("training diverged in {phase} epoch {epoch}: {what}{saved}"))
        }
    }
}

fn projection_csv(report: &ProjectionReport) -> String {
    let mut out = String::from("proto_id,sample_id,row,col,distance\n");
    for e in &report.entries {
        let _ = writeln!(out, "{},{},{},{},{}", e.prototype, e.sample, e.row, e.col, e.distance);
    }
    out
}

/// Trains one configuration into `cfg.out`.
fn run_training(cfg: &RunConfig, data: &FeatureMapDataset) -> Result<TrainOutcome, CliError> {
    let mut cfg = cfg.clone();
    cfg.resolve_dims(data.num_classes(), data.dims())?;
    let tc = cfg.train_config()?;
    let (train, val) = dataio::split(data, cfg.val_fraction, cfg.seed)?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join("config.resolved"), &cfg.resolved_text())?;
    let outcome = training::train(&train, &val, &tc).map_err(|e| train_error(e, &cfg.out))?;
    save_checkpoint(&outcome.checkpoint, &cfg.out.join("checkpoint.ppck"))?;
    let metrics = cfg.out.join("metrics.csv");
    training::write_metrics(&outcome.metrics, &metrics).map_err(|e| io_err(&metrics, e))?;
    if let Some(report) = &outcome.projection {
        write_text(&cfg.out.join("projection.csv"), &projection_csv(report))?;
    }
    Ok(outcome)
}

fn opt_acc(r: &Option<training::EvalReport>) -> String {
    r.as_ref().map_or_else(|| "na".to_string(), |r| format!("{:.4}", r.accuracy))
}

fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let outcome = run_training(cfg, &data)?;
    println!("val_accuracy {:.4}", outcome.val.accuracy);
    println!("pre_projection {}", opt_acc(&outcome.pre_projection));
    println!("post_projection {}", opt_acc(&outcome.post_projection));
    if let Some(b) = outcome.binarized_after_joint {
        println!("binarized_after_joint {b:.4}");
    }
    println!("wrote {}", cfg.out.join("checkpoint.ppck").display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let report = training::evaluate(&ck.model, &ds, a.batch_size)?;
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    if a.per_class {
        for (c, acc) in report.per_class.iter().enumerate() {
            println!("class {c} {acc:.4}");
        }
    }
    Ok(())
}

fn project_cmd(a: &ProjectArgs) -> Result<(), CliError> {
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data)?;
    let train = match a.val_fraction {
        Some(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Usage(format!("--val-fraction must be in (0, 1), got {f}")));
            }
            dataio::split(&ds, f, a.seed)?.0
        }
        None => ds,
    };
    let report = project_prototypes(&mut ck.model, &train)?;
    ck.phase = Phase::Projection;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.clone());
    save_checkpoint(&ck, &out)?;
    println!(
        "projected {} prototypes ({} unused, {} without candidates)",
        report.entries.len(),
        report.unused.len(),
        report.no_candidates.len()
    );
    print!("{}", projection_csv(&report));
    Ok(())
}

fn analyze_cmd(a: &AnalyzeArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = &ck.model;
    let kind = if a.hardened {
        Distributions::Hardened
    } else {
        Distributions::Relaxed
    };
    create_dir(&a.out)?;
    let written = match a.kind {
        AnalysisKind::Assignment => {
            let path = a.out.join("assignment.csv");
            analysis::write_csv(&path, &analysis::assignment_matrix(model, kind).to_csv())?;
            path
        }
        AnalysisKind::Histogram => {
            let path = a.out.join("histogram.csv");
            analysis::write_csv(&path, &analysis::q_histogram(model, a.bins, kind)?.to_csv())?;
            path
        }
        AnalysisKind::Sharing => {
            let stats = analysis::sharing_stats(model);
            let path = a.out.join("sharing.csv");
            analysis::write_csv(&path, &stats.to_csv())?;
            println!("per_prototype_mean {:.4} std {:.4}", stats.mean, stats.std);
            println!("per_slot_mean {:.4} std {:.4}", stats.slot_mean, stats.slot_std);
            println!("assigned {} unassigned {:?}", stats.assigned(), stats.unassigned);
            path
        }
        AnalysisKind::Graph => {
            let graph = analysis::class_graph(model);
            let path = a.out.join("graph.csv");
            analysis::write_csv(&path, &graph.to_csv())?;
            println!("edges {} total_weight {}", graph.edges.len(), graph.total_weight());
            path
        }
        AnalysisKind::Activation => {
            let data = a
                .data
                .as_ref()
                .ok_or_else(|| CliError::Usage("activation needs --data".into()))?;
            let ds = read_dataset(data)?;
            if a.sample >= ds.len() {
                return Err(CliError::Usage(format!("sample {} out of range ({} samples)", a.sample, ds.len())));
            }
            let base = a.out.join(format!("activation_s{}_p{}", a.sample, a.prototype));
            let (pgm, csv) = analysis::export_activation(model, &ds.sample(a.sample).map, a.prototype, &base)?;
            println!("wrote {}", csv.display());
            pgm
        }
        AnalysisKind::Correlation => {
            let data = a
                .data
                .as_ref()
                .ok_or_else(|| CliError::Usage("correlation needs --data pointing at a synthetic dataset".into()))?;
            let manifest = dataio::read_manifest(data)?;
            let rho = analysis::sharing_correlation(model, &manifest)?;
            let stats = analysis::sharing_stats(model);
            let path = a.out.join("correlation.csv");
            analysis::write_csv(
                &path,
                &format!("spearman,mean_classes_per_prototype\n{rho},{}\n", stats.mean),
            )?;
            println!("spearman {rho:.4}");
            println!("mean_classes_per_prototype {:.4}", stats.mean);
            path
        }
    };
    println!("wrote {}", written.display());
    Ok(())
}

/// The ablation arms: name and the configuration change applied to the base run.
pub const ABLATION_ARMS: [(&str, &str, &str); 4] = [
    ("full", "", ""),
    ("no_gumbel", "gumbel", "off"),
    ("no_orth", "orth", "off"),
    ("no_focal", "focal", "off"),
];

pub const ABLATION_HEADER: &str = "arm,val_accuracy,pre_projection,post_projection,binarized_after_joint,binarized_final";

fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("PROTOPOOL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |cap| cap.min(available))
}

fn ablate_cmd(base: &RunConfig) -> Result<(), CliError> {
    let data = load_data(base)?;
    let mut arms = Vec::new();
    for (name, key, value) in ABLATION_ARMS {
        let mut cfg = base.clone();
        if !key.is_empty() {
            cfg.set(key, value).map_err(CliError::Usage)?;
        }
        cfg.out = base.out.join(name);
        arms.push((name, cfg));
    }
    create_dir(&base.out)?;
    write_text(&base.out.join("config.resolved"), &base.resolved_text())?;

    let threads = worker_threads().min(arms.len());
    let mut results: Vec<Option<Result<TrainOutcome, CliError>>> = (0..arms.len()).map(|_| None).collect();
    for (chunk, slots) in arms.chunks(threads).zip(results.chunks_mut(threads)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(_, cfg)| s.spawn(|| run_training(cfg, &data)))
                .collect();
            for (h, slot) in handles.into_iter().zip(slots.iter_mut()) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(CliError::Numeric("worker panicked".into()))));
            }
        });
    }

    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for ((name, _), result) in arms.iter().zip(results) {
        let outcome = result.expect("every arm ran")?;
        let final_bin = training::binarized_fraction(&outcome.checkpoint.model, 0.95);
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{}",
            outcome.val.accuracy,
            opt_acc(&outcome.pre_projection),
            opt_acc(&outcome.post_projection),
            outcome.binarized_after_joint.map_or_else(|| "na".to_string(), |b| b.to_string()),
            final_bin
        );
        println!("{name} val_accuracy {:.4}", outcome.val.accuracy);
    }
    let path = base.out.join("ablation.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}
