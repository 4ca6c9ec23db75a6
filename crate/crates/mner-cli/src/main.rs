//! `mner`: estimation, prediction, intervals, and simulation studies for the
//! multivariate nested-error regression model, over CSV survey data.
//!
//! Exit codes: 0 ok, 2 input error, 3 numerical error, 4 validation failure.

mod config;
mod error;
mod ingest;
mod output;
mod validate;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use mner::{blup, uncertainty, AreaPrediction, Dataset, FitResult, TargetSpec};

use config::{resolve_sim_config, RunConfig, SimOverrides, TargetSource};
use error::CliError;
use output::{emit, FitReport, Format, IntervalReport, IntervalRow, PredictionReport};

#[derive(Parser)]
#[command(name = "mner", version, about = "Multivariate nested-error regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate covariance components and regression coefficients.
    Fit(RunArgs),
    /// EBLUP area predictions with second-order MSE matrices.
    Predict(RunArgs),
    /// Coverage-corrected intervals for a contrast of the area target.
    Interval(IntervalArgs),
    /// Run a Monte Carlo simulation study.
    Simulate(SimArgs),
    /// Run the self-check oracle suites.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Input CSV; overrides the config's [data] input path.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; MNER_OUT_DIR and the config [output] dir are
    /// fallbacks. Without any, results go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which format stdout gets (files are always written in both).
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct IntervalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Two-sided level is 1 - alpha (default 0.05).
    #[arg(long)]
    alpha: Option<f64>,
    /// Contrast vector, comma-separated, length k (default e1).
    #[arg(long, value_delimiter = ',')]
    ell: Option<Vec<f64>>,
}

#[derive(Args)]
struct SimArgs {
    /// Study preset, e.g. paper-k2-rho05-normal[-smoke|-acceptance|-full].
    #[arg(long)]
    preset: Option<String>,
    /// Optional config file carrying a [simulate] section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the replication streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the replication pool.
    #[arg(long)]
    workers: Option<usize>,
    /// Interval level used inside the study.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn main() {
    let cli = Cli::parse();
    let format = match &cli.command {
        Command::Fit(a) | Command::Predict(a) => a.format,
        Command::Interval(a) => a.run.format,
        Command::Simulate(a) => a.format,
        Command::Validate(a) => a.format,
    };
    if let Err(e) = run(cli.command) {
        match format {
            Format::Json => eprintln!(
                "{}",
                json!({ "error": { "kind": e.kind(), "message": e.message() } })
            ),
            Format::Csv => eprintln!("{e}"),
        }
        std::process::exit(e.code());
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Interval(args) => cmd_interval(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

/// One stderr line per run with the resolved settings, for reproducibility.
fn log_run(name: &str, detail: serde_json::Value) {
    eprintln!("mner {} {name} {detail}", env!("CARGO_PKG_VERSION"));
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os("MNER_OUT_DIR").map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
}

/// Shared front half of fit/predict/interval: config, CSV, moment fit.
fn load_and_fit(args: &RunArgs, name: &str) -> Result<(RunConfig, Dataset, FitResult), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let spec = cfg.data_required()?;
    let input = args
        .input
        .clone()
        .or_else(|| spec.input.clone())
        .ok_or_else(|| CliError::Input("no input path (flag --input or [data] input)".into()))?;
    log_run(
        name,
        json!({
            "input": input.display().to_string(),
            "config": args.config.display().to_string(),
            "area": spec.area_column,
            "responses": spec.responses,
            "covariates": spec.covariates,
        }),
    );
    let data = ingest::ingest_csv(&input, spec)?;
    eprintln!(
        "ingested {}: m = {}, N = {}, k = {}, s = {}",
        input.display(),
        data.m(),
        data.n_total(),
        data.k(),
        data.s()
    );
    let fit = blup::fit(&data)?;
    Ok((cfg, data, fit))
}

/// Per-area EBLUPs with msem at the configured target.
fn predict_all(
    cfg: &RunConfig,
    data: &Dataset,
    fit: &FitResult,
) -> Result<Vec<AreaPrediction>, CliError> {
    let targets = match cfg.target.as_ref() {
        None | Some(TargetSource::SampleMean) => None,
        Some(TargetSource::File(path)) => Some(ingest::load_targets(path, data)?),
    };
    (0..data.m())
        .map(|i| {
            let spec = match &targets {
                None => TargetSpec::SampleMean,
                Some(t) => TargetSpec::Custom(t[i].clone()),
            };
            uncertainty::msem_estimate(data, fit, i, &spec).map_err(CliError::from)
        })
        .collect()
}

fn cmd_fit(args: RunArgs) -> Result<(), CliError> {
    let (cfg, data, fit) = load_and_fit(&args, "fit")?;
    let responses = cfg.data_required()?.responses.clone();
    let report = FitReport::new(&data, &fit, &responses);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(
        out_dir(args.out, &cfg).as_deref(),
        "fit",
        &report.to_csv(),
        &json,
        args.format,
    )
}

fn cmd_predict(args: RunArgs) -> Result<(), CliError> {
    let (cfg, data, fit) = load_and_fit(&args, "predict")?;
    let preds = predict_all(&cfg, &data, &fit)?;
    let report = PredictionReport::new(&data, &fit, &preds);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(
        out_dir(args.out, &cfg).as_deref(),
        "predict",
        &report.to_csv(),
        &json,
        args.format,
    )
}

fn cmd_interval(args: IntervalArgs) -> Result<(), CliError> {
    let (cfg, data, fit) = load_and_fit(&args.run, "interval")?;
    let k = data.k();
    let ell = match &args.ell {
        Some(values) => {
            if values.len() != k {
                return Err(CliError::Input(format!(
                    "--ell has {} entries, data has k = {k}",
                    values.len()
                )));
            }
            DVector::from_row_slice(values)
        }
        None => DVector::from_fn(k, |t, _| f64::from(u8::from(t == 0))),
    };
    let alpha = args.alpha.or(cfg.alpha).unwrap_or(0.05);

    let preds = predict_all(&cfg, &data, &fit)?;
    let sizes = data.sizes();
    let mut rows = Vec::with_capacity(preds.len());
    for pred in &preds {
        let pair = uncertainty::corrected_interval(pred, &ell, alpha, &fit.components, &sizes)?;
        rows.push(IntervalRow::new(
            &pred.area_id,
            sizes[pred.area_index],
            ell.dot(&pred.theta_hat),
            &pair,
        ));
    }
    let report = IntervalReport {
        ell: ell.iter().copied().collect(),
        alpha,
        areas: rows,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(
        out_dir(args.run.out, &cfg).as_deref(),
        "interval",
        &report.to_csv(),
        &json,
        args.run.format,
    )
}

fn cmd_simulate(args: SimArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let sim = resolve_sim_config(
        args.preset.as_deref(),
        &cfg,
        &SimOverrides {
            seed: args.seed,
            workers: args.workers,
            alpha: args.alpha,
        },
    )?;
    log_run(
        "simulate",
        serde_json::to_value(&sim).expect("config serializes"),
    );
    let metrics = mner::sim::run_study(&sim)?;
    eprintln!(
        "completed: phase A {} (skipped {}), phase B {} (skipped {}), truncation rate {:.4}",
        metrics.completed_a,
        metrics.failures_a,
        metrics.completed_b,
        metrics.failures_b,
        metrics.truncation_frequency
    );
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    emit(
        out_dir(args.out, &cfg).as_deref(),
        "simulate",
        &output::sim_csv(&metrics),
        &json,
        args.format,
    )
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    log_run("validate", json!({}));
    let suites = validate::run_all();
    let mut failed = Vec::new();
    match args.format {
        Format::Csv => {
            for s in &suites {
                match &s.outcome {
                    Ok(detail) => println!("validate {}: ok ({detail})", s.name),
                    Err(detail) => println!("validate {}: FAILED ({detail})", s.name),
                }
            }
        }
        Format::Json => {
            let rows: Vec<_> = suites
                .iter()
                .map(|s| {
                    json!({
                        "name": s.name,
                        "ok": s.outcome.is_ok(),
                        "detail": match &s.outcome { Ok(d) | Err(d) => d },
                    })
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&rows).expect("rows serialize")
            );
        }
    }
    for s in &suites {
        if s.outcome.is_err() {
            failed.push(s.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "suites failed: {}",
            failed.join(", ")
        )))
    }
}
