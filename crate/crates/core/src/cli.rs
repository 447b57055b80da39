//! `near` command line: `synth`, `train`, `eval`, `inspect`.
//!
//! Machine-readable results go to stdout as a single JSON line; progress and
//! errors go to stderr. Exit codes: 0 success, 1 runtime or data failure,
//! 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classifier::ClassifierMode;
use crate::data::{load_dataset, save_dataset};
use crate::error::NearError;
use crate::metrics::EvalReport;
use crate::mixture::ThresholdMode;
use crate::neighbors::CandidateMode;
use crate::synth::{generate, Shots, SynthConfig};
use crate::trainer::{
    compare_candidate_quality, evaluate, run, CandidateQualityComparison, EpochDiagnostics,
    TrainConfig, TrainedModel, TrainerMode,
};

pub const SEED_ENV: &str = "NEAR_SEED";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: NearError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage_or_runtime(e: NearError) -> CliError {
    match e {
        NearError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "near",
    version,
    about = "Learn classifiers from noisy open-vocabulary labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic train/test pair.
    Synth(SynthArgs),
    /// Train a model and write the artifact plus a run manifest.
    Train(TrainArgs),
    /// Evaluate a model on a labeled test set.
    Eval(EvalArgs),
    /// Dump diagnostics from a manifest or model artifact.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 5, conflicts_with = "shots_list")]
    shots: usize,
    /// Comma-separated per-class shot counts (long-tail).
    #[arg(long, value_delimiter = ',')]
    shots_list: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    spurious: f64,
    #[arg(long, default_value_t = SynthConfig::default().sigma)]
    sigma: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Near,
    Naive,
    Zeroshot,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CandidateArg {
    Knn,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassifierArg {
    SharedOffset,
    LinearProbe,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Model artifact path.
    #[arg(long)]
    out: PathBuf,
    /// Run manifest path; defaults to the model path with `.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warm_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    logit_scale: Option<f64>,
    /// `adaptive` or a fixed threshold in [0, 1].
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long, value_enum)]
    candidates: Option<CandidateArg>,
    #[arg(long, value_enum)]
    classifier: Option<ClassifierArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Record wall-clock seconds in the manifest (makes it non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, requires = "test")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    test: Option<PathBuf>,
    /// Training set with ground truth; compares own-label, random and k-NN candidate sets.
    #[arg(long)]
    candidate_quality: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    kappa: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Manifest or model artifact.
    path: PathBuf,
}

/// Paths written or read by a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    pub model: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    pub label_space_size: usize,
    pub filtered_labels: Vec<String>,
    pub artifacts: ArtifactPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl RunManifest {
    pub fn from_json_str(s: &str) -> crate::Result<Self> {
        serde_json::from_str(s).map_err(|source| NearError::Parse {
            what: "run manifest".into(),
            source,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization is infallible")
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("failed to write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("failed to read {}: {e}", path.display())))
}

fn print_line(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("json value"));
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let shots = match args.shots_list {
        Some(list) => Shots::PerClass(list),
        None => Shots::Uniform(args.shots),
    };
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let config = SynthConfig {
        num_classes: args.classes,
        dim: args.dim,
        shots,
        test_per_class: args.test_per_class,
        noise_rate: args.noise,
        spurious_fraction: args.spurious,
        sigma: args.sigma,
        seed,
    };
    config.validate().map_err(usage_or_runtime)?;
    let (train, test) = generate(&config).map_err(usage_or_runtime)?;
    save_dataset(&train, &args.out_train).map_err(runtime)?;
    save_dataset(&test, &args.out_test).map_err(runtime)?;
    eprintln!("wrote {} train and {} test images", train.len(), test.len());
    print_line(&json!({
        "train": args.out_train,
        "test": args.out_test,
        "n_train": train.len(),
        "n_test": test.len(),
        "seed": seed,
    }));
    Ok(())
}

fn resolve_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = read_file(path)?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("invalid config file {}: {e}", path.display()))
            })?
        }
        None => {
            let mut c = TrainConfig::default();
            if let Some(seed) = env_seed()? {
                c.seed = seed;
            }
            c
        }
    };
    if let Some(m) = args.mode {
        config.trainer_mode = match m {
            ModeArg::Near => TrainerMode::Near,
            ModeArg::Naive => TrainerMode::Naive,
            ModeArg::Zeroshot => TrainerMode::ZeroShot,
        };
    }
    if let Some(v) = args.kappa {
        config.kappa = v;
    }
    if let Some(v) = args.shots {
        config.shots = v;
    }
    if let Some(v) = args.temperature {
        config.temperature = v;
    }
    if let Some(v) = args.epochs {
        config.total_epochs = v;
    }
    if let Some(v) = args.warm_epochs {
        config.warm_epochs = v;
    }
    if let Some(v) = args.lr {
        config.base_lr = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.logit_scale {
        config.logit_scale = v;
    }
    if let Some(t) = &args.threshold {
        config.threshold_mode = if t == "adaptive" {
            ThresholdMode::Adaptive
        } else {
            let tau: f64 = t.parse().map_err(|_| {
                CliError::Usage(format!(
                    "--threshold must be `adaptive` or a number, got {t:?}"
                ))
            })?;
            ThresholdMode::Static(tau)
        };
    }
    if let Some(c) = args.candidates {
        config.candidate_mode = match c {
            CandidateArg::Knn => CandidateMode::Knn,
            CandidateArg::Random => CandidateMode::Random,
        };
    }
    if let Some(c) = args.classifier {
        config.classifier_mode = match c {
            ClassifierArg::SharedOffset => ClassifierMode::SharedOffset,
            ClassifierArg::LinearProbe => ClassifierMode::LinearProbe,
        };
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let config = resolve_config(&args)?;
    let started = Instant::now();
    let train = load_dataset(&args.data).map_err(runtime)?;
    let test = args
        .test
        .as_ref()
        .map(load_dataset)
        .transpose()
        .map_err(runtime)?;
    let test = test.filter(|t| {
        let ok = t.has_ground_truth();
        if !ok {
            eprintln!("test set lacks ground-truth labels; skipping evaluation");
        }
        ok
    });
    eprintln!(
        "training {:?} on {} images for {} epochs",
        config.trainer_mode,
        train.len(),
        config.total_epochs
    );
    let out = run(&config, &train, test.as_ref()).map_err(usage_or_runtime)?;

    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| args.out.with_extension("manifest.json"));
    let manifest = RunManifest {
        config: config.clone(),
        seed: config.seed,
        epochs: out.model.diagnostics.clone(),
        report: out.report.clone(),
        label_space_size: out.model.label_space.k(),
        filtered_labels: out.model.filtered_labels.clone(),
        artifacts: ArtifactPaths {
            data: args.data.clone(),
            test: args.test.clone(),
            model: args.out.clone(),
            manifest: manifest_path.clone(),
        },
        wall_clock_seconds: args.timing.then(|| started.elapsed().as_secs_f64()),
    };
    write_file(&args.out, &out.model.to_json_string())?;
    write_file(&manifest_path, &manifest.to_json_string())?;
    eprintln!("finished in {:.2}s", started.elapsed().as_secs_f64());

    let report = out.report.as_ref();
    print_line(&json!({
        "mode": config.trainer_mode,
        "cacc": report.map(|r| r.cacc),
        "sacc": report.map(|r| r.sacc),
        "label_space_size": out.model.filtered_labels.len(),
        "full_label_space_size": out.model.label_space.k(),
        "model": args.out,
        "manifest": manifest_path,
    }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidate_quality_modes: Option<CandidateQualityComparison>,
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    if args.model.is_none() && args.candidate_quality.is_none() {
        return Err(CliError::Usage(
            "eval needs --model/--test, --candidate-quality, or both".into(),
        ));
    }
    let mut out = EvalOutput {
        report: None,
        candidate_quality_modes: None,
    };
    if let (Some(model_path), Some(test_path)) = (&args.model, &args.test) {
        let model = TrainedModel::from_json_str(&read_file(model_path)?).map_err(runtime)?;
        let test = load_dataset(test_path).map_err(runtime)?;
        out.report = Some(evaluate(&model, &test).map_err(runtime)?);
    }
    if let Some(path) = &args.candidate_quality {
        let seed = match args.seed {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };
        let train = load_dataset(path).map_err(runtime)?;
        let cmp = compare_candidate_quality(&train, args.kappa, seed).map_err(runtime)?;
        if let Some(r) = out.report.as_mut() {
            r.candidate_quality = Some(cmp.knn);
        }
        out.candidate_quality_modes = Some(cmp);
    }
    print_line(&serde_json::to_value(&out).expect("eval output"));
    Ok(())
}

fn epoch_table(epochs: &[EpochDiagnostics]) -> serde_json::Value {
    let rows: Vec<_> = epochs
        .iter()
        .filter(|e| e.tau.is_some())
        .map(|e| {
            json!({
                "epoch": e.epoch,
                "tau": e.tau,
                "n_clean": e.n_clean,
                "n_noisy": e.n_noisy,
                "gmm": e.gmm,
                "posterior_histogram": e.posterior_histogram,
            })
        })
        .collect();
    serde_json::Value::Array(rows)
}

fn cmd_inspect(args: InspectArgs) -> CliResult<()> {
    let text = read_file(&args.path)?;
    let value = if let Ok(m) = RunManifest::from_json_str(&text) {
        json!({
            "kind": "manifest",
            "mode": m.config.trainer_mode,
            "epochs": epoch_table(&m.epochs),
            "tau_trajectory": m.epochs.iter().filter_map(|e| e.tau).collect::<Vec<_>>(),
            "label_space": m.filtered_labels,
            "full_label_space_size": m.label_space_size,
            "report": m.report,
        })
    } else {
        let model = TrainedModel::from_json_str(&text).map_err(|e| {
            CliError::Runtime(format!(
                "{} is neither a run manifest nor a model artifact: {e}",
                args.path.display()
            ))
        })?;
        json!({
            "kind": "model",
            "mode": model.trainer_mode,
            "epochs": epoch_table(&model.diagnostics),
            "tau_trajectory": model.diagnostics.iter().filter_map(|e| e.tau).collect::<Vec<_>>(),
            "label_space": model.filtered_labels,
            "full_label_space_size": model.label_space.k(),
        })
    };
    print_line(&value);
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
