//! Command-line interface: generation, aggregation, training, prediction,
//! evaluation, serving, and rendering.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use cityflow_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use cityflow_core::eval::{fusion_weight_stats, run_experiment, ExperimentSpec};
use cityflow_core::external::{read_externals_csv, write_externals_csv, ExternalSchema};
use cityflow_core::forecast::{future_externals, predict_multi, ExternalPolicy, Horizon};
use cityflow_core::grid::{build_series, CoverageSpan, FlowSeries, GridSpec, INFLOW, OUTFLOW};
use cityflow_core::io::{
    read_flw1_with_grid, read_trajectory_csv, write_flw1, write_trajectory_csv,
};
use cityflow_core::model::ModelConfig;
use cityflow_core::synth::{generate, verify_consistency, SynthConfig};
use cityflow_core::train::{make_instances, recompute_validation_rmse, train, TrainHyper};

use crate::heatmap::{map_ppm, write_heatmap};
use crate::http::AppState;
use crate::pipeline::{Pipeline, PipelineConfig, TickOutcome};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(#[from] cityflow_core::error::FormatError),
    #[error("{0}")]
    Grid(#[from] cityflow_core::error::GridError),
    #[error("{0}")]
    Model(#[from] cityflow_core::error::ModelError),
    #[error("{0}")]
    Train(#[from] cityflow_core::error::TrainError),
    #[error("{0}")]
    Forecast(#[from] cityflow_core::error::ForecastError),
    #[error("{0}")]
    Eval(#[from] cityflow_core::error::EvalError),
    #[error("{0}")]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Parser)]
#[command(
    name = "cityflow",
    about = "Citywide crowd-flow aggregation, forecasting and serving",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trajectories, externals and ground-truth flows.
    Synth(SynthArgs),
    /// Aggregate a trajectory CSV into an FLW1 flow series.
    Flows(FlowsArgs),
    /// Train a model on a flow series.
    Train(TrainArgs),
    /// Roll out a multi-step forecast from a checkpoint.
    Predict(PredictArgs),
    /// Run an experiment spec, or inspect a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API backed by the cache pipeline.
    Serve(ServeArgs),
    /// Render one interval of a flow series as a PPM heatmap.
    Heatmap(HeatmapArgs),
    /// Run the pull/convert/predict/push loop without the HTTP layer.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic-city config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_traj: PathBuf,
    #[arg(long)]
    out_ext: PathBuf,
    /// Also write the ground-truth flow series.
    #[arg(long)]
    out_flows: Option<PathBuf>,
    /// Re-derive flows from the emitted CSV and compare with the bundled
    /// ground truth.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct FlowsArgs {
    /// Trajectory CSV input.
    #[arg(long = "in")]
    input: PathBuf,
    /// Grid spec (JSON).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Declared coverage spans `start:end[,start:end...]` (interval indices,
    /// end exclusive). Without it a single span is inferred from the data.
    #[arg(long)]
    coverage: Option<String>,
}

/// Training job description: model, optimizer schedule, seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainJobSpec {
    model: ModelConfig,
    hyper: TrainHyper,
    seed: u64,
    #[serde(default = "default_n_weather")]
    n_weather: usize,
}

fn default_n_weather() -> usize {
    2
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    flows: PathBuf,
    /// Externals CSV; required when the model's ext_dim > 0.
    #[arg(long)]
    externals: Option<PathBuf>,
    /// Grid spec (JSON) to validate the flow file against.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Training job spec (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Observed history (FLW1).
    #[arg(long)]
    flows: PathBuf,
    #[arg(long)]
    externals: Option<PathBuf>,
    /// How future externals are assembled.
    #[arg(long, value_parser = parse_policy, default_value = "forecast_supplied")]
    policy: ExternalPolicy,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// JSON sidecar with produced-at, horizon and checkpoint id.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

fn parse_policy(raw: &str) -> Result<ExternalPolicy, String> {
    match raw {
        "forecast_supplied" => Ok(ExternalPolicy::ForecastSupplied),
        "hold_last" => Ok(ExternalPolicy::HoldLast),
        other => Err(format!("unknown policy `{other}`")),
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment spec (JSON) to run end to end.
    #[arg(long, conflicts_with = "checkpoint")]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,

    /// Trained checkpoint to inspect instead of running a spec.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Flow series for validation-RMSE recomputation (checkpoint mode).
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long)]
    externals: Option<PathBuf>,
    /// Training job spec used to reproduce the validation split.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Threshold for fusion-weight statistics.
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    /// Directory for fusion-weight heatmaps (PPM).
    #[arg(long)]
    weights_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Seed the series tail from an existing flow file before the first tick.
    #[arg(long)]
    preload_flows: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    flows: PathBuf,
    /// Interval index to render.
    #[arg(long)]
    interval: i64,
    /// `in` or `out`.
    #[arg(long, default_value = "in")]
    channel: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Stop after this many ticks (runs forever otherwise).
    #[arg(long)]
    ticks: Option<u64>,
    #[arg(long)]
    preload_flows: Option<PathBuf>,
}

/// Entry point used by `main` and the tests. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Flows(args) => cmd_flows(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Serve(args) => cmd_serve(args),
        Command::Heatmap(args) => cmd_heatmap(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn read_flows(path: &PathBuf, grid: Option<&GridSpec>) -> Result<FlowSeries, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    Ok(match grid {
        Some(grid) => read_flw1_with_grid(reader, grid)?,
        None => cityflow_core::io::read_flw1(reader)?,
    })
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let config: SynthConfig = read_json(&args.config)?;
    let output = generate(&config)?;
    let mut traj = BufWriter::new(File::create(&args.out_traj)?);
    write_trajectory_csv(&mut traj, &output.points)?;
    traj.flush()?;
    let mut ext = BufWriter::new(File::create(&args.out_ext)?);
    write_externals_csv(&mut ext, &output.externals)?;
    ext.flush()?;
    if let Some(path) = &args.out_flows {
        let mut flows = BufWriter::new(File::create(path)?);
        write_flw1(&mut flows, &output.series)?;
        flows.flush()?;
    }
    println!(
        "generated {} points over {} intervals ({} agents)",
        output.points.len(),
        config.n_intervals,
        config.n_agents
    );
    if args.verify {
        let report = verify_consistency(&config)?;
        match report.first_mismatch {
            None => println!("consistency: ok ({} intervals)", report.intervals_checked),
            Some(t) => {
                return Err(CliError::Usage(format!(
                    "consistency check failed at interval {t}"
                )))
            }
        }
    }
    Ok(())
}

fn parse_coverage(raw: &str) -> Result<Vec<CoverageSpan>, CliError> {
    raw.split(',')
        .map(|span| {
            let (start, end) = span
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("bad coverage span `{span}`")))?;
            Ok(CoverageSpan {
                start: start
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad coverage start `{start}`")))?,
                end: end
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad coverage end `{end}`")))?,
            })
        })
        .collect()
}

fn cmd_flows(args: FlowsArgs) -> Result<(), CliError> {
    let grid: GridSpec = read_json(&args.grid)?;
    grid.validate()?;
    let file = File::open(&args.input)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", args.input.display())))?;
    let (points, report) = read_trajectory_csv(BufReader::new(file))?;
    let coverage = match &args.coverage {
        Some(raw) => parse_coverage(raw)?,
        None => Vec::new(),
    };
    let series = build_series(&grid, &points, &coverage)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_flw1(&mut out, &series)?;
    out.flush()?;
    println!(
        "{} points ({} malformed rows skipped) -> {} intervals in {} segment(s)",
        report.points,
        report.malformed,
        series.len(),
        series.segments().len()
    );
    Ok(())
}

/// Encodes an externals table against a schema fitted on its own records.
fn encode_externals(
    path: &PathBuf,
    n_weather: usize,
) -> Result<(BTreeMap<i64, Vec<f64>>, ExternalSchema), CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let table = read_externals_csv(BufReader::new(file))?;
    let schema = ExternalSchema::fit(table.records().iter(), n_weather)?;
    let encoded = table
        .records()
        .iter()
        .map(|r| (r.interval, schema.encode(r)))
        .collect();
    Ok((encoded, schema))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let job: TrainJobSpec = read_json(&args.config)?;
    let grid = match &args.grid {
        Some(path) => Some(read_json::<GridSpec>(path)?),
        None => None,
    };
    let series = read_flows(&args.flows, grid.as_ref())?;
    let (externals, schema) = if job.model.ext_dim > 0 {
        let path = args.externals.as_ref().ok_or_else(|| {
            CliError::Usage("model uses externals: pass --externals".to_string())
        })?;
        let (encoded, schema) = encode_externals(path, job.n_weather)?;
        if schema.dim() != job.model.ext_dim {
            return Err(CliError::Usage(format!(
                "model ext_dim {} does not match encoded externals length {} (11 + n_weather)",
                job.model.ext_dim,
                schema.dim()
            )));
        }
        (Some(encoded), Some(schema))
    } else {
        (None, None)
    };
    let dataset = make_instances(&series, externals.as_ref(), &job.model)?;
    println!("training on {} instances", dataset.len());
    let output = train(&dataset, &job.model, &job.hyper, job.seed)?;
    if let (Some(best), Some(rmse)) = (output.history.best_epoch, output.history.best_val_rmse) {
        println!("best epoch {best}: validation rmse {rmse:.4}");
    }
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            model: job.model,
            stats: output.stats,
            ext_schema: schema,
        },
        params: output.params,
    };
    save_checkpoint(&args.out, &checkpoint)?;
    println!("checkpoint {} -> {}", checkpoint.id(), args.out.display());
    if let Some(path) = &args.history {
        std::fs::write(path, output.history.to_csv())?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    if args.steps == 0 {
        return Err(CliError::Usage("steps must be >= 1".to_string()));
    }
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let series = read_flows(&args.flows, None)?;
    let n = series
        .last_interval()
        .map(|t| t + 1)
        .ok_or_else(|| CliError::Usage("history is empty".to_string()))?;
    let vectors = if checkpoint.meta.model.ext_dim > 0 {
        let path = args.externals.as_ref().ok_or_else(|| {
            CliError::Usage("model uses externals: pass --externals".to_string())
        })?;
        let file = File::open(path)?;
        let table = read_externals_csv(BufReader::new(file))?;
        let schema = checkpoint
            .meta
            .ext_schema
            .as_ref()
            .ok_or_else(|| CliError::Usage("checkpoint lacks an external schema".to_string()))?;
        future_externals(
            &series.grid,
            schema,
            args.policy,
            table.records(),
            table.records(),
            &cityflow_core::external::HolidayCalendar::default(),
            n,
            args.steps,
        )?
    } else {
        Vec::new()
    };
    let produced_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    let records = predict_multi(
        &checkpoint,
        &series,
        &vectors,
        Horizon(args.steps),
        produced_at,
    )?;

    // One contiguous segment of rounded export tensors.
    let mut out_series = FlowSeries::new(series.grid.clone());
    for record in &records {
        out_series
            .append(record.interval, record.export_tensor())
            .expect("contiguous rollout");
    }
    let mut out = BufWriter::new(File::create(&args.out)?);
    write_flw1(&mut out, &out_series)?;
    out.flush()?;
    if let Some(path) = &args.sidecar {
        let sidecar = serde_json::json!({
            "produced_at": produced_at,
            "horizon": args.steps,
            "checkpoint": checkpoint.id(),
            "first_interval": records.first().map(|r| r.interval),
        });
        std::fs::write(path, serde_json::to_vec_pretty(&sidecar)?)?;
    }
    println!(
        "wrote {} forecast interval(s) starting at {}",
        records.len(),
        records[0].interval
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    match (&args.spec, &args.checkpoint) {
        (Some(spec_path), None) => {
            let spec: ExperimentSpec = read_json(spec_path)?;
            let report = run_experiment(&spec)?;
            print!("{}", report.to_csv());
            if let Some(path) = &args.out_csv {
                std::fs::write(path, report.to_csv())?;
            }
            if let Some(path) = &args.out_json {
                std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
            }
            Ok(())
        }
        (None, Some(ckpt_path)) => {
            let checkpoint = load_checkpoint(ckpt_path)?;
            let weights: Vec<(String, cityflow_core::tensor::Tensor)> = checkpoint
                .params
                .iter()
                .filter(|(name, _)| name.starts_with("fusion."))
                .map(|(name, tensor)| (name.to_string(), tensor.clone()))
                .collect();
            if !weights.is_empty() {
                let borrowed: Vec<(&str, &cityflow_core::tensor::Tensor)> = weights
                    .iter()
                    .map(|(n, t)| (n.as_str(), t))
                    .collect();
                let stats = fusion_weight_stats(&borrowed, args.threshold)?;
                for (name, fraction) in &stats.fractions {
                    println!(
                        "{name}: {:.1}% of regions below {}",
                        fraction * 100.0,
                        args.threshold
                    );
                }
                if let Some(dir) = &args.weights_dir {
                    std::fs::create_dir_all(dir)?;
                    for (name, map) in &stats.maps {
                        let file = dir.join(format!("{}.ppm", name.replace('.', "_")));
                        let ppm =
                            map_ppm(map.shape()[0], map.shape()[1], map.data());
                        std::fs::write(file, ppm)?;
                    }
                }
            }
            if let (Some(flows), Some(train_config)) = (&args.flows, &args.train_config) {
                let job: TrainJobSpec = read_json(train_config)?;
                let series = read_flows(flows, None)?;
                let externals = match &args.externals {
                    Some(path) if job.model.ext_dim > 0 => {
                        Some(encode_externals(path, job.n_weather)?.0)
                    }
                    _ => None,
                };
                let dataset = make_instances(&series, externals.as_ref(), &job.model)?;
                if let Some(rmse) = recompute_validation_rmse(
                    &dataset,
                    &job.model,
                    &job.hyper,
                    &checkpoint.params,
                    &checkpoint.meta.stats,
                )? {
                    println!("validation rmse (recomputed): {rmse}");
                }
            }
            Ok(())
        }
        _ => Err(CliError::Usage(
            "pass exactly one of --spec or --checkpoint".to_string(),
        )),
    }
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let config: PipelineConfig = read_json(&args.config)?;
    let addr: std::net::SocketAddr = args
        .addr
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {}: {e}", args.addr)))?;
    let mut pipeline = Pipeline::new(config)?;
    if let Some(path) = &args.preload_flows {
        let series = read_flows(path, Some(&pipeline.config.grid))?;
        pipeline.preload_series(&series)?;
    }
    let state = AppState::new(pipeline.snapshot_handle());
    std::thread::spawn(move || {
        let _ = pipeline.run(None);
    });
    println!("serving on http://{addr}");
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    runtime.block_on(crate::http::serve(addr, state))?;
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<(), CliError> {
    let channel = match args.channel.as_str() {
        "in" => INFLOW,
        "out" => OUTFLOW,
        other => {
            return Err(CliError::Usage(format!(
                "channel must be `in` or `out`, got `{other}`"
            )))
        }
    };
    let series = read_flows(&args.flows, None)?;
    let tensor = series.get(args.interval).ok_or_else(|| {
        CliError::Usage(format!("interval {} not in the series", args.interval))
    })?;
    write_heatmap(&args.out, tensor, channel)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<(), CliError> {
    let config: PipelineConfig = read_json(&args.config)?;
    let mut pipeline = Pipeline::new(config)?;
    if let Some(path) = &args.preload_flows {
        let series = read_flows(path, Some(&pipeline.config.grid))?;
        pipeline.preload_series(&series)?;
    }
    if let Some(ticks) = args.ticks {
        for _ in 0..ticks {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0);
            let report = pipeline.tick(now)?;
            let stages: Vec<String> = report
                .stages
                .iter()
                .map(|(name, ms)| format!("{name} {ms:.1}ms"))
                .collect();
            match report.outcome {
                TickOutcome::Processed { steps, .. } => {
                    println!(
                        "interval {:?}: pushed {steps} forecast(s) [{}]",
                        report.interval,
                        stages.join(", ")
                    );
                }
                ref other => println!("interval {:?}: {:?}", report.interval, other),
            }
            std::thread::sleep(std::time::Duration::from_secs(
                pipeline.config.tick_interval_seconds,
            ));
        }
        Ok(())
    } else {
        pipeline.run(None)?;
        Ok(())
    }
}
