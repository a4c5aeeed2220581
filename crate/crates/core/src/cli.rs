//! `afex` command-line verbs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{sha256_hex, Checkpoint, CheckpointError, FORMAT_VERSION};
use crate::config::{ConfigError, ExportToggles, RequestFile, RunConfig};
use crate::explain::{explain_point, rank_features, ExplainError, ExplainRequest, Explanation};
use crate::io::{self, IoError};
use crate::linalg::RankReport;
use crate::oracle::{BlackBox, Oracle, OracleError, OracleSpec};
use crate::plot::{self, PlotError, PlotKind, PlotSpec};
use crate::trainer::{compare_weighting, fit, TrainConfig, TrainError, TrainReport};
use crate::basis::COLUMN_ORDER_VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "afex", version, about = "Train and query attention-style feature explainers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a basis bank and write a checkpoint, loss trace and manifest.
    Train(TrainArgs),
    /// Explain points with a trained checkpoint.
    Explain(ExplainArgs),
    /// Train one system per weighting method and overlay the loss traces.
    CompareWeighting(TrainArgs),
    /// Evaluate the configured oracle on the rows of a CSV file.
    OracleEval(OracleEvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Request file with `oracle` and `requests`.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub request: Option<PathBuf>,
    /// Run config whose oracle and `explain` list are used instead.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sampling seed for every request (overrides the files).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OracleEvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// CSV of query points, one per row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Plot(#[from] PlotError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Checkpoint(_) => EXIT_USAGE,
            CliError::Train(TrainError::Config(_)) => EXIT_USAGE,
            CliError::Explain(ExplainError::Request(_) | ExplainError::PairsUnavailable) => EXIT_USAGE,
            CliError::Plot(PlotError::Extension(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Parses `args` (program name first), runs the verb, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Explain(a) => cmd_explain(a),
        Command::CompareWeighting(a) => cmd_compare_weighting(a),
        Command::OracleEval(a) => cmd_oracle_eval(a),
    }
}

fn load_run(args: &TrainArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn build_oracle(spec: &OracleSpec) -> Result<Oracle, CliError> {
    spec.build().map_err(|e| match e {
        OracleError::UnknownFunction(_) | OracleError::Dimension { .. } => CliError::Usage(e.to_string()),
        other => CliError::Oracle(other),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn trace_rows(reports: &[TrainReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .flat_map(|r| {
            r.fit_mse
                .iter()
                .enumerate()
                .map(move |(i, m)| vec![i.to_string(), r.method.name().to_string(), fmt(*m)])
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    format_version: u32,
    column_order: &'static str,
    seed: u64,
    oracle: String,
    config_sha256: String,
    checkpoint_sha256: String,
    trace_sha256: String,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct RunReport {
    iterations: usize,
    wall_time_secs: f64,
    final_loss: Option<f64>,
    final_mse: Option<f64>,
    final_mse_ratio: Option<f64>,
    qr_steps: usize,
    ridge_steps: usize,
}

fn run_report(r: &TrainReport) -> RunReport {
    let any = !r.fit_mse.is_empty();
    RunReport {
        iterations: r.losses.len(),
        wall_time_secs: r.wall_time_secs,
        final_loss: r.final_loss,
        final_mse: any.then(|| r.final_mse()),
        final_mse_ratio: any.then(|| r.final_mse_ratio()),
        qr_steps: r.qr_steps,
        ridge_steps: r.ridge_steps,
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let (cfg, out) = load_run(args)?;
    let oracle = build_oracle(&cfg.oracle)?;
    let trained = fit(&oracle, &cfg.train)?;
    let checkpoint = Checkpoint::new(cfg.train.clone(), trained.model, trained.optimizer);
    let ck_text = checkpoint.to_json();
    io::write_atomic(&out.join("checkpoint.json"), ck_text.as_bytes())?;
    let trace_path = out.join("trace.csv");
    io::write_csv(&trace_path, &["iteration", "method", "mse"], &trace_rows(std::slice::from_ref(&trained.report)))?;
    let trace_bytes = std::fs::read(&trace_path).map_err(|e| IoError::Fs {
        path: trace_path.clone(),
        source: e,
    })?;
    let manifest = Manifest {
        tool: "afex",
        version: env!("CARGO_PKG_VERSION"),
        format_version: FORMAT_VERSION,
        column_order: COLUMN_ORDER_VERSION,
        seed: cfg.train.seed,
        oracle: oracle.describe(),
        config_sha256: sha256_hex(to_json(&cfg.train).as_bytes()),
        checkpoint_sha256: sha256_hex(ck_text.as_bytes()),
        trace_sha256: sha256_hex(&trace_bytes),
        train: &cfg.train,
    };
    io::write_atomic(&out.join("manifest.json"), to_json(&manifest).as_bytes())?;
    io::write_atomic(&out.join("report.json"), to_json(&run_report(&trained.report)).as_bytes())?;
    if cfg.export.svg && !trained.report.fit_mse.is_empty() {
        let spec = PlotSpec::new(PlotKind::LossTrace, "Training loss", "iteration", "mse", out.join("loss.svg"));
        let svg = plot::render_traces(&spec, &[(cfg.train.method.name().to_string(), trained.report.fit_mse.clone())])?;
        plot::write_svg(&spec, &svg)?;
    }
    let r = &trained.report;
    println!(
        "trained {} iterations in {:.1}s; final loss {}; checkpoint {}",
        r.losses.len(),
        r.wall_time_secs,
        r.final_loss.map_or("n/a".to_string(), fmt),
        out.join("checkpoint.json").display()
    );
    Ok(())
}

fn cmd_compare_weighting(args: &TrainArgs) -> Result<(), CliError> {
    let (cfg, out) = load_run(args)?;
    let oracle = build_oracle(&cfg.oracle)?;
    let reports = compare_weighting(&oracle, &cfg.train, &cfg.methods)?;
    io::write_csv(&out.join("traces.csv"), &["iteration", "method", "mse"], &trace_rows(&reports))?;
    let summary: Vec<(String, RunReport)> = reports.iter().map(|r| (r.method.name().to_string(), run_report(r))).collect();
    io::write_atomic(&out.join("comparison.json"), to_json(&summary).as_bytes())?;
    if cfg.export.svg {
        let spec = PlotSpec::new(
            PlotKind::LossTrace,
            "Weighting comparison",
            "iteration",
            "mse",
            out.join("comparison.svg"),
        );
        let series: Vec<(String, Vec<f64>)> = reports.iter().map(|r| (r.method.name().to_string(), r.fit_mse.clone())).collect();
        plot::write_svg(&spec, &plot::render_traces(&spec, &series)?)?;
    }
    for r in &reports {
        if r.fit_mse.is_empty() {
            println!("{}: no iterations", r.method);
        } else {
            println!("{}: final mse {} ({:.4} of target variance)", r.method, fmt(r.final_mse()), r.final_mse_ratio());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ExplanationDoc<'a> {
    center: &'a [f64],
    half_widths: Vec<f64>,
    samples: usize,
    seed: u64,
    weights: &'a [f64],
    lambda: Option<f64>,
    rank: &'a RankReport,
    residual_mse: f64,
    importances: Vec<FeatureImportance>,
    pairs: Vec<PairSummary>,
}

#[derive(Serialize)]
struct FeatureImportance {
    feature: usize,
    importance: f64,
}

#[derive(Serialize)]
struct PairSummary {
    features: (usize, usize),
    adjusted_range: f64,
    raw_range: f64,
    interaction_range: f64,
}

fn write_explanation(e: &Explanation, dir: &Path, export: &ExportToggles) -> Result<(), CliError> {
    let doc = ExplanationDoc {
        center: &e.request.center,
        half_widths: e.request.neighborhood.half_widths(),
        samples: e.request.samples,
        seed: e.request.seed,
        weights: &e.weights.w,
        lambda: e.weights.lambda,
        rank: &e.rank,
        residual_mse: e.residual_mse,
        importances: rank_features(e)
            .into_iter()
            .map(|(feature, importance)| FeatureImportance { feature, importance })
            .collect(),
        pairs: e
            .heatmaps
            .iter()
            .map(|h| PairSummary {
                features: h.features,
                adjusted_range: h.adjusted_range(),
                raw_range: h.raw_range(),
                interaction_range: h.interaction_range(),
            })
            .collect(),
    };
    io::write_atomic(&dir.join("explanation.json"), to_json(&doc).as_bytes())?;
    for c in &e.curves {
        let stem = format!("curve-{}", c.feature);
        if export.csv {
            let rows: Vec<Vec<String>> = c.grid.iter().zip(&c.contributions).map(|(x, v)| vec![fmt(*x), fmt(*v)]).collect();
            io::write_csv(&dir.join(format!("{stem}.csv")), &["x", "contribution"], &rows)?;
        }
        if export.svg {
            let spec = PlotSpec::new(
                PlotKind::Curve,
                &format!("Shape function of feature {}", c.feature),
                &format!("x{}", c.feature),
                "contribution",
                dir.join(format!("{stem}.svg")),
            );
            plot::write_svg(&spec, &plot::render_curve(&spec, &c.grid, &c.contributions)?)?;
        }
    }
    for h in &e.heatmaps {
        let (i, s) = h.features;
        let stem = format!("pair-{i}-{s}");
        if export.csv {
            for (suffix, values) in [("", &h.adjusted), ("-raw", &h.raw), ("-interaction", &h.interaction)] {
                let mut rows = Vec::with_capacity(h.grid_a.len() * h.grid_b.len());
                for (a, xa) in h.grid_a.iter().enumerate() {
                    for (b, xb) in h.grid_b.iter().enumerate() {
                        rows.push(vec![fmt(*xa), fmt(*xb), fmt(values[a][b])]);
                    }
                }
                io::write_csv(&dir.join(format!("{stem}{suffix}.csv")), &["x", "y", "value"], &rows)?;
            }
        }
        if export.svg {
            let spec = PlotSpec::new(
                PlotKind::Heatmap,
                &format!("Adjusted pair ({i}, {s})"),
                &format!("x{i}"),
                &format!("x{s}"),
                dir.join(format!("{stem}.svg")),
            );
            plot::write_svg(&spec, &plot::render_heatmap(&spec, &h.grid_a, &h.grid_b, &h.adjusted)?)?;
        }
    }
    Ok(())
}

fn cmd_explain(args: &ExplainArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (spec, mut requests, export, default_out): (OracleSpec, Vec<ExplainRequest>, ExportToggles, PathBuf) =
        match (&args.request, &args.config) {
            (Some(path), _) => {
                let file = RequestFile::load(path)?;
                let dir = path.parent().unwrap_or(Path::new("")).join("explain");
                (file.oracle, file.requests, ExportToggles::default(), dir)
            }
            (None, Some(path)) => {
                let cfg = RunConfig::load(path)?;
                (cfg.oracle, cfg.explain, cfg.export, cfg.output_dir)
            }
            (None, None) => return Err(CliError::Usage("--request or --config is required".into())),
        };
    if requests.is_empty() {
        return Err(CliError::Usage("no explain requests given".into()));
    }
    if let Some(seed) = args.seed {
        requests.iter_mut().for_each(|r| r.seed = seed);
    }
    let out = args.out.clone().unwrap_or(default_out);
    let oracle = build_oracle(&spec)?;
    for (n, request) in requests.iter().enumerate() {
        let e = explain_point(&checkpoint.model, &oracle, request)?;
        let dir = out.join(format!("explain-{n}"));
        write_explanation(&e, &dir, &export)?;
        let ranked = rank_features(&e);
        let top: Vec<String> = ranked.iter().map(|(f, v)| format!("x{f}={v:.4}")).collect();
        println!(
            "explained {:?}: residual mse {:.3e}; importance {}; written to {}",
            request.center,
            e.residual_mse,
            top.join(" "),
            dir.display()
        );
    }
    Ok(())
}

fn cmd_oracle_eval(args: &OracleEvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let oracle = build_oracle(&cfg.oracle)?;
    let x = io::load_csv_matrix(&args.input)?;
    let mut header: Vec<String> = (0..x.cols()).map(|c| format!("x{c}")).collect();
    header.push("y".into());
    let distances = match &oracle {
        Oracle::File(table) => Some(table.lookup(&x)?.into_iter().map(|l| l.distance).collect::<Vec<_>>()),
        _ => None,
    };
    if distances.is_some() {
        header.push("distance".into());
    }
    let y = oracle.predict(&x)?;
    let rows: Vec<Vec<String>> = (0..x.rows())
        .map(|r| {
            let mut row: Vec<String> = x.row(r).iter().map(|v| fmt(*v)).collect();
            row.push(fmt(y[r]));
            if let Some(d) = &distances {
                row.push(fmt(d[r]));
            }
            row
        })
        .collect();
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_csv(&out.join("predictions.csv"), &header, &rows)?;
    println!("evaluated {} rows with {}", x.rows(), oracle.describe());
    Ok(())
}
