use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use tdsuite_core::backend::{factory_for, single_model_predict, BackendConfig, Classifier};
use tdsuite_core::dataset::{
    load_labeled_csv, load_split, persist_split, process, SplitConfig, Table, DEFAULT_LABEL_COLUMN,
    DEFAULT_TEXT_COLUMN, MANIFEST_FILE, TEST_FILE,
};
use tdsuite_core::emissions::{emissions_table, EmissionsConfig, Phase};
use tdsuite_core::ensemble::{annotate_dataset, Annotator, EnsembleSpec, LoadedEnsemble, ModelSource};
use tdsuite_core::metrics::{comparison_table, report_one_vs_rest};
use tdsuite_core::registry::ModelRegistry;
use tdsuite_core::trainer::{
    cross_validate, train_run, EarlyStopConfig, MonitoredMetric, RunConfig, DEFAULT_FOLDS, DEFAULT_VAL_FRACTION,
};
use tdsuite_core::{Error, Result};
use tdsuite_service::{ServiceConfig, DATA_ROOT_ENV, DEFAULT_DATA_ROOT, PORT_ENV, STATIC_DIR_ENV};

/// Technical-debt text classification: data processing, training,
/// evaluation, prediction and the HTTP service.
#[derive(Debug, Parser)]
#[command(name = "tdsuite", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean, filter and split a labeled CSV into train.csv, test.csv and dataset.json.
    Process(ProcessArgs),
    /// Train a model on a processed split and register it.
    Train(TrainArgs),
    /// Stratified k-fold cross-validation over the training split.
    Crossval(CrossvalArgs),
    /// Annotate a labeled CSV with predictions from one or more models.
    Evaluate(EvaluateArgs),
    /// Classify texts with a model or a two-stage ensemble.
    Predict(PredictArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

fn open_unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not inside (0, 1)"))
    }
}

#[derive(Debug, Args)]
struct ColumnArgs {
    /// Name of the text column.
    #[arg(long, default_value = DEFAULT_TEXT_COLUMN)]
    text_column: String,
    /// Name of the label column.
    #[arg(long, default_value = DEFAULT_LABEL_COLUMN)]
    label_column: String,
}

#[derive(Debug, Args)]
struct ProcessArgs {
    /// Labeled CSV file.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the persisted split.
    #[arg(long)]
    out_dir: PathBuf,
    /// Share of each class that goes to the training split.
    #[arg(long, default_value_t = 0.7, value_parser = open_unit_interval)]
    train_fraction: f64,
    /// Records with fewer words after cleaning are dropped.
    #[arg(long, default_value_t = 5)]
    min_words: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Monitor {
    ValidationF1,
    ValidationMcc,
    ValidationLoss,
}

#[derive(Debug, Args)]
struct HyperArgs {
    /// Backend kind: reference or transformer.
    #[arg(long, default_value = "reference")]
    backend: String,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, visible_alias = "lr", default_value_t = 2e-5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    warmup_steps: usize,
    /// Maximum input length in tokens.
    #[arg(long, default_value_t = 512)]
    max_seq_len: usize,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    class_weighting: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Epochs without improvement before training stops.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    patience: u64,
    /// Smallest change of the monitored value that counts as improvement.
    #[arg(long, default_value_t = 0.0)]
    min_delta: f64,
    /// Train for all epochs regardless of validation results.
    #[arg(long)]
    no_early_stop: bool,
    /// Validation value watched by early stopping.
    #[arg(long, value_enum, default_value = "validation-f1")]
    monitor: Monitor,
    /// Share of the training split held out for validation.
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
    /// Label treated as the positive class (default: "td" when present).
    #[arg(long)]
    positive_label: Option<String>,
}

impl HyperArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let early_stop = if self.no_early_stop {
            EarlyStopConfig::disabled()
        } else {
            EarlyStopConfig {
                enabled: true,
                patience: self.patience as usize,
                min_delta: self.min_delta,
                monitored: match self.monitor {
                    Monitor::ValidationF1 => MonitoredMetric::ValidationF1,
                    Monitor::ValidationMcc => MonitoredMetric::ValidationMcc,
                    Monitor::ValidationLoss => MonitoredMetric::ValidationLoss,
                },
            }
        };
        let config = RunConfig {
            backend: BackendConfig {
                max_seq_len: self.max_seq_len,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                warmup_steps: self.warmup_steps,
                seed: self.seed,
                class_weighting: self.class_weighting,
            },
            early_stop,
            val_fraction: self.val_fraction,
            positive_label: self.positive_label.clone(),
            emissions: EmissionsConfig::from_env(),
            progress: None,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory written by `process`.
    #[arg(long)]
    data_dir: PathBuf,
    /// Registry name for the trained model.
    #[arg(long)]
    name: String,
    /// Model registry directory.
    #[arg(long, default_value = "models")]
    models_dir: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    /// Directory written by `process`; folds are drawn from its train.csv.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FOLDS as u64, value_parser = clap::value_parser!(u64).range(2..))]
    folds: u64,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model registry directory. Models may also be given as checkpoint paths.
    #[arg(long, default_value = "models")]
    models_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Labeled CSV, or a directory written by `process` (its test.csv is used).
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated model names or checkpoint paths.
    #[arg(long, value_delimiter = ',', required_unless_present = "ensemble")]
    models: Vec<String>,
    /// Ensemble spec JSON, evaluated instead of single models.
    #[arg(long, conflicts_with = "models")]
    ensemble: Option<PathBuf>,
    /// Annotated results file.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    #[command(flatten)]
    registry: ModelArgs,
    #[command(flatten)]
    columns: ColumnArgs,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["model", "ensemble"])))]
#[command(group(clap::ArgGroup::new("inputs").required(true).args(["text", "input"])))]
struct PredictArgs {
    /// Model name or checkpoint path.
    #[arg(long)]
    model: Option<String>,
    /// Ensemble spec JSON.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Text to classify; repeat for several.
    #[arg(long)]
    text: Vec<String>,
    /// CSV whose text column is classified row by row.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_TEXT_COLUMN)]
    text_column: String,
    #[command(flatten)]
    registry: ModelArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = PORT_ENV, default_value_t = tdsuite_service::DEFAULT_PORT)]
    port: u16,
    /// Persistence root for datasets, models and jobs.
    #[arg(long, env = DATA_ROOT_ENV, default_value = DEFAULT_DATA_ROOT)]
    data_root: PathBuf,
    /// Web UI build to serve at `/`.
    #[arg(long, env = STATIC_DIR_ENV)]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Process(args) => cmd_process(args),
        Command::Train(args) => cmd_train(args),
        Command::Crossval(args) => cmd_crossval(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Serve(args) => cmd_serve(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let detail = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("ERROR {}: {detail}", e.name());
            ExitCode::from(1)
        }
    }
}

fn print_counts(title: &str, counts: &std::collections::BTreeMap<String, usize>) {
    let parts: Vec<String> = counts.iter().map(|(l, n)| format!("{l}={n}")).collect();
    println!("{title:<14}{}", parts.join(" "));
}

fn cmd_process(args: ProcessArgs) -> Result<()> {
    let dataset = load_labeled_csv(&args.input, &args.columns.text_column, &args.columns.label_column)?;
    let config = SplitConfig {
        train_fraction: args.train_fraction,
        min_words: args.min_words,
        seed: args.seed,
        ..SplitConfig::default()
    };
    let processed = process(&dataset, &config)?;
    persist_split(&processed.split, &args.out_dir)?;
    let split = &processed.split;
    print_counts("classes", &processed.class_counts);
    print_counts("train", split.train.class_counts());
    print_counts("test", split.test.class_counts());
    println!("{:<14}{}", "dropped_count", split.dropped_count);
    println!("{:<14}{}", "written", args.out_dir.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.hyper.run_config()?;
    let factory = factory_for(&args.hyper.backend)?;
    let split = load_split(&args.data_dir)?;
    let registry = ModelRegistry::open(&args.models_dir)?;
    let dir = registry.reserve(&args.name)?;
    let run = match train_run(&split, factory.as_ref(), &config, &dir) {
        Ok(run) => run,
        Err(e) => {
            registry.release(&args.name);
            return Err(e);
        }
    };
    registry.register_run(&args.name, &run, None)?;
    print!("{}", run.history_table());
    println!("\nbest epoch: {}\n", run.best_epoch);
    print!("{}", comparison_table(&[(args.name.as_str(), run.test_metrics.clone())])?);
    println!();
    print!(
        "{}",
        emissions_table(&[("Training", &run.emissions), ("Inference", &run.inference_emissions)])
    );
    println!("\nregistered {} in {}", args.name, dir.display());
    Ok(())
}

fn cmd_crossval(args: CrossvalArgs) -> Result<()> {
    let config = args.hyper.run_config()?;
    let factory = factory_for(&args.hyper.backend)?;
    let split = load_split(&args.data_dir)?;
    let report = cross_validate(&split.train, args.folds as usize, factory.as_ref(), &config)?;
    print!("{}", report.table());
    println!();
    print!("{}", emissions_table(&[("Training", &report.emissions)]));
    Ok(())
}

fn read_spec(path: &Path) -> Result<EnsembleSpec> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EnsembleSpec::from_json(&bytes)
}

fn labeled_input(input: &Path, columns: &ColumnArgs) -> Result<tdsuite_core::dataset::LabeledDataset> {
    let path = if input.join(MANIFEST_FILE).is_file() {
        input.join(TEST_FILE)
    } else {
        input.to_path_buf()
    };
    load_labeled_csv(path, &columns.text_column, &columns.label_column)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset = labeled_input(&args.input, &args.columns)?;
    let registry = ModelRegistry::open(&args.registry.models_dir)?;
    let emissions = EmissionsConfig::from_env();
    let (outcome, report) = emissions.track(Phase::Inference, || -> Result<_> {
        match &args.ensemble {
            Some(path) => {
                let ensemble = LoadedEnsemble::load(&read_spec(path)?, &registry)?;
                Ok((annotate_dataset(Annotator::Ensemble(&ensemble), &dataset)?, Vec::new()))
            }
            None => {
                let mut models: Vec<(String, Arc<dyn Classifier>)> = Vec::new();
                for name in &args.models {
                    let column = column_name(name);
                    if models.iter().any(|(c, _)| *c == column) {
                        return Err(Error::InvalidConfig(format!("model {column:?} listed twice")));
                    }
                    models.push((column, registry.resolve(name)?));
                }
                let table = annotate_dataset(Annotator::Models(&models), &dataset)?;
                let truths = dataset.labels();
                let mut reports = Vec::new();
                for (name, model) in &models {
                    let predictions = table.column(&format!("pred_{name}"))?;
                    reports.push((name.clone(), report_one_vs_rest(&predictions, &truths, model.positive_label())?));
                }
                Ok((table, reports))
            }
        }
    });
    let (table, reports): (Table, _) = outcome?;
    table.write(&args.out)?;
    if !reports.is_empty() {
        print!("{}", comparison_table(&reports)?);
        println!();
    }
    print!("{}", emissions_table(&[("Inference", &report)]));
    println!("\nwrote {} rows to {}", table.rows().len(), args.out.display());
    Ok(())
}

/// Column suffix for a model reference: the registry name, or the parent
/// directory name for a checkpoint path.
fn column_name(reference: &str) -> String {
    let path = Path::new(reference);
    if path.is_file() {
        let stem = path
            .parent()
            .and_then(|p| p.file_name())
            .or_else(|| path.file_stem())
            .map(|s| s.to_string_lossy().into_owned());
        if let Some(stem) = stem.filter(|s| !s.is_empty()) {
            return stem;
        }
    }
    reference.to_string()
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut texts = args.text.clone();
    if let Some(input) = &args.input {
        texts.extend(Table::read(input)?.column(&args.text_column)?);
    }
    let registry = ModelRegistry::open(&args.registry.models_dir)?;
    let ensemble_spec = match (&args.model, &args.ensemble) {
        (_, Some(path)) => Some(read_spec(path)?),
        (Some(name), None) if registry.contains(name) && registry.entry(name)?.is_ensemble() => {
            Some(registry.ensemble_spec(name)?)
        }
        _ => None,
    };
    if let Some(spec) = ensemble_spec {
        let ensemble = LoadedEnsemble::load(&spec, &registry)?;
        for p in ensemble.predict(&texts)? {
            let mut line = format!("{} p={:.6}", p.gate_label, p.gate_probability);
            if p.is_td && !p.assigned_types.is_empty() {
                let types: Vec<String> = p
                    .assigned_types
                    .iter()
                    .map(|t| format!("{t}:{:.6}", p.type_probabilities[t]))
                    .collect();
                line.push_str(&format!(" types={}", types.join(",")));
            }
            println!("{line}");
        }
        return Ok(());
    }
    let model = registry.resolve(args.model.as_deref().expect("clap requires a model source"))?;
    for (label, p) in single_model_predict(model.as_ref(), &texts)? {
        println!("{label} p={p:.6}");
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        port: args.port,
        static_dir: args.static_dir,
        ..ServiceConfig::new(args.data_root)
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Runtime(e.to_string()))?;
    println!("serving on port {}", config.port);
    runtime.block_on(tdsuite_service::serve(config, tdsuite_service::shutdown_signal()))
}
