//! Command-line front end: synthetic data, training, evaluation, rolling
//! forecasts, ablation suites and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use maestro_core::gradsuite::{check_module, run_suite, GradSuiteError, ModuleReport};
use maestro_core::model::{ChannelLayout, Model, ModelError, ABLATION_VARIANTS};
use maestro_core::pipeline::{
    evaluate, forecast_frame, run, run_ablation_suite, write_curves_csv, write_forecast_csv, PipelineError, RunConfig,
};
use maestro_core::preprocess::{
    ingest_csv, make_windows, synth_generate, write_csv, CsvSchema, MissingPolicy, Modality, PreprocessError, SynthSpec,
};

#[derive(Parser)]
#[command(name = "maestro", version, about = "Multi-modal spectro-temporal forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Benchmark,
    Periodic,
}

#[derive(clap::Args)]
struct SchemaArgs {
    /// Target column (surveillance modality).
    #[arg(long, default_value = "ili")]
    target: String,
    /// Exogenous columns as `name=modality`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "search=trends,temperature=weather")]
    channels: Vec<String>,
    /// Drop rows with missing cells instead of forward-filling.
    #[arg(long)]
    drop_missing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 1500)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "benchmark")]
        dataset: Dataset,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration document.
    Config,
    /// Train over the configured seeds and write the report, curves and best model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Train this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
    },
    /// Score a saved model on every window of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Rolling forecasts from a saved model, written as CSV.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant names; the standard component list when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
    },
    /// Finite-difference gradient checks of every module.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check one module only.
        #[arg(long)]
        module: Option<String>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] PreprocessError),
    #[error(transparent)]
    GradSuite(#[from] GradSuiteError),
    #[error("gradient check failed for {0}")]
    GradientMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(e) => e.exit_code() as u8,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::GradSuite(GradSuiteError::UnknownModule(_)) => 1,
            CliError::GradSuite(_) | CliError::GradientMismatch(_) => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Pipeline(e.into())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

fn schema_from_args(a: &SchemaArgs) -> Result<CsvSchema, CliError> {
    let mut columns = vec![(a.target.clone(), Modality::Surveillance)];
    for spec in a.channels.iter().filter(|s| !s.is_empty()) {
        let (name, modality) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("channel `{spec}` is not `name=modality`")))?;
        let modality =
            Modality::parse(modality).ok_or_else(|| CliError::Usage(format!("unknown modality `{modality}`")))?;
        columns.push((name.to_string(), modality));
    }
    Ok(CsvSchema {
        columns,
        target: a.target.clone(),
        missing: if a.drop_missing {
            MissingPolicy::Drop
        } else {
            MissingPolicy::ForwardFill
        },
    })
}

/// The columns a saved model needs: its target plus every input channel.
fn schema_from_layout(layout: &ChannelLayout) -> CsvSchema {
    let mut columns = vec![(layout.target.clone(), Modality::Surveillance)];
    for g in &layout.groups {
        for c in &g.channels {
            if !columns.iter().any(|(n, _)| n == c) {
                columns.push((c.clone(), g.modality));
            }
        }
    }
    CsvSchema {
        columns,
        target: layout.target.clone(),
        missing: MissingPolicy::ForwardFill,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(PipelineError::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn print_modules(reports: &[ModuleReport]) {
    for r in reports {
        println!(
            "{:<8} trials {:>2}  coords {:>6}  max rel err {:.3e}  {}",
            r.module,
            r.trials,
            r.coordinates,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth {
            length,
            seed,
            dataset,
            out,
        } => {
            let spec = match dataset {
                Dataset::Benchmark => SynthSpec::benchmark(length, seed),
                Dataset::Periodic => SynthSpec::periodic(length, seed),
            };
            let frame = synth_generate(&spec)?;
            let mut w = output(out.as_deref())?;
            write_csv(&frame, &mut w)?;
            w.flush().map_err(|e| PipelineError::from(e).into())
        }
        Command::Config => {
            let text = serde_json::to_string_pretty(&RunConfig::default().to_json()).map_err(PipelineError::from)?;
            println!("{text}");
            Ok(())
        }
        Command::Train {
            config,
            data,
            seed,
            out,
            schema,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seeds = vec![s];
            }
            let frame = ingest_csv(&data, &schema_from_args(&schema)?)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let (report, model) = run(&frame, &cfg)?;
            write_json(&out.join("report.json"), &report)?;
            write_json(&out.join("config.json"), &cfg.to_json())?;
            write_curves_csv(&report, create(&out.join("curves.csv"))?)?;
            model.save(out.join("model.json"))?;
            println!(
                "seeds {:?}  params {}  test MAE {:.4}  RMSE {:.4}  MAPE {:.2}%  R2 {:.4}",
                report.seeds, report.param_count, report.mean.mae, report.mean.rmse, report.mean.mape_pct, report.mean.r2
            );
            Ok(())
        }
        Command::Eval { model, data } => {
            let model = Model::load(&model)?;
            let frame = ingest_csv(&data, &schema_from_layout(&model.layout))?;
            let idx = model.layout.input_indices(&frame)?;
            let windows = make_windows(&frame, &idx, model.config.window, model.config.horizon, 1)?;
            let (metrics, calibration) = evaluate(&model, &windows)?;
            let text = serde_json::to_string_pretty(&json!({ "metrics": metrics, "calibration": calibration }))
                .map_err(PipelineError::from)?;
            println!("{text}");
            Ok(())
        }
        Command::Forecast { model, data, out } => {
            let model = Model::load(&model)?;
            let frame = ingest_csv(&data, &schema_from_layout(&model.layout))?;
            let rows = forecast_frame(&model, &frame)?;
            let mut w = output(out.as_deref())?;
            write_forecast_csv(&rows, model.config.horizon, &mut w)?;
            w.flush().map_err(|e| PipelineError::from(e).into())
        }
        Command::Ablate {
            config,
            data,
            variants,
            out,
            schema,
        } => {
            let cfg = load_config(config.as_deref())?;
            let variants = variants.unwrap_or_else(|| {
                ABLATION_VARIANTS
                    .iter()
                    .take_while(|v| !v.starts_with("single_modal"))
                    .map(|s| s.to_string())
                    .collect()
            });
            let frame = ingest_csv(&data, &schema_from_args(&schema)?)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let report = run_ablation_suite(&frame, &cfg, &variants)?;
            report.write_csv(create(&out.join("ablation.csv"))?)?;
            write_json(&out.join("ablation.json"), &report)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Gradcheck { trials, seed, module } => {
            if trials == 0 {
                return Err(CliError::Usage("--trials must be at least 1".into()));
            }
            let reports = match module {
                Some(m) => vec![check_module(&m, trials, seed)?],
                None => run_suite(trials, seed)?,
            };
            print_modules(&reports);
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.module.as_str()).collect();
            if failed.is_empty() {
                println!("all {} module(s) within tolerance", reports.len());
                Ok(())
            } else {
                Err(CliError::GradientMismatch(failed.join(", ")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
