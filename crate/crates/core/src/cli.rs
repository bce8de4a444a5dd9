// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when a
//! check runs but fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;

use crate::error::{JsaeError, Result};
use crate::eval::{evaluate, DEFAULT_THRESHOLDS};
use crate::experiment::{check_instance, compare_random, thread_pool, ExperimentConfig, World};
use crate::io::{load_pair, read_dump, save_pair, FileSource, WeightMeta};
use crate::jacobian::active_jacobian;
use crate::linearity::{analyze_population, DEFAULT_GRID_POINTS, DEFAULT_TOLERANCE};
use crate::loss::{grad_check_report, REL_ERR_FLOOR};
use crate::mlp::MlpKind;
use crate::synthetic::GroundTruthDictionary;
use crate::trainer::write_timeline_csv;

/// Environment variable overriding the configured worker count.
pub const THREADS_ENV: &str = "JSAE_THREADS";

/// Largest relative error `grad-check` accepts.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "jsae", version, about = "Jacobian-sparse autoencoder pairs around an MLP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a pair and save weights plus a per-step metrics CSV.
    Train(TrainArgs),
    /// Evaluate saved weights on an activation dump.
    Eval(EvalArgs),
    /// Print the active Jacobian block of one token as JSON.
    Jacobian(JacobianArgs),
    /// Classify sampled scalar slices of f_s.
    Linearity(LinearityArgs),
    /// Compare hand-derived gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Train around a fitted MLP and a random one; print both sparsity maps.
    CompareRandom(CompareArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output weight container.
    #[arg(long)]
    out: PathBuf,
    /// Activation dump to train on instead of synthetic samples.
    #[arg(long)]
    activations: Option<PathBuf>,
    /// Metrics CSV path; defaults to the weights path with a `.csv` extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    total_tokens: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Per-threshold CSV path; defaults to the report path with a `.csv` extension.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct JacobianArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Row index into the activations.
    #[arg(long)]
    token: usize,
    /// Activation dump; defaults to held-out samples of the synthetic
    /// configuration recorded in the weights.
    #[arg(long)]
    activations: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LinearityArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Number of scalar functions to sample.
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    activations: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full JSON report including per-sample second differences.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram of mean absolute second differences.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Standard,
    Glu,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, value_enum, default_value_t = KindArg::Standard)]
    kind: KindArg,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// JSON file for both evaluation reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a subcommand, mapped to an exit code.
enum Failure {
    Usage(String),
    Check(String),
}

impl From<JsaeError> for Failure {
    fn from(e: JsaeError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the tool with `argv` (including the program name) and returns the
/// process exit code. Output goes to `out`, diagnostics to `err`.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Jacobian(a) => cmd_jacobian(a, out),
        Command::Linearity(a) => cmd_linearity(a, out),
        Command::GradCheck(a) => cmd_grad_check(a, out),
        Command::CompareRandom(a) => cmd_compare(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            2
        }
    }
}

/// [`run_cli_with`] on the process's standard streams.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn io_err(e: std::io::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn env_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| JsaeError::invalid(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| JsaeError::invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| JsaeError::invalid(format!("invalid config {}: {e}", path.display())))
}

/// Flag and environment overrides, in increasing priority: config file,
/// flags, `JSAE_THREADS`.
fn resolve_threads(cfg: &mut ExperimentConfig, flag: Option<usize>) -> Result<()> {
    if let Some(t) = flag {
        cfg.train.threads = t;
    }
    if let Some(t) = env_threads()? {
        cfg.train.threads = t;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(JsaeError::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.lambda {
        cfg.train.lambda = l;
    }
    if let Some(t) = a.total_tokens {
        cfg.train.total_tokens = t;
    }
    resolve_threads(&mut cfg, a.threads)?;
    cfg.validate()?;

    let world = World::build(&cfg)?;
    let result = match &a.activations {
        Some(path) => {
            let mut source = FileSource::open(path)?;
            crate::experiment::run_pipeline(&cfg, &world, &world.task, &mut source)?
        }
        None => crate::experiment::run_pipeline(&cfg, &world, &world.task, &mut world.source(&cfg))?,
    };

    let meta = WeightMeta {
        seed: cfg.seed,
        provenance: serde_json::json!({
            "config": cfg,
            "fit": world.fit,
            "activations": a.activations.as_ref().map(|p| p.display().to_string()),
        }),
    };
    save_pair(&a.out, &result.pair, &world.task.mlp, &meta)?;
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("csv"));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&metrics).map_err(io_err)?);
    write_timeline_csv(&result.timeline, &mut file).map_err(io_err)?;
    file.flush().map_err(io_err)?;

    let r = &result.report;
    writeln!(
        out,
        "steps={} explained_variance_x={:.4} explained_variance_y={:.4} frac_above_0.01={:.4}",
        result.timeline.len(),
        r.explained_variance_x,
        r.explained_variance_y,
        r.frac_above(0.01).unwrap_or(f64::NAN)
    )
    .map_err(io_err)?;
    writeln!(out, "weights: {}\nmetrics: {}", a.out.display(), metrics.display()).map_err(io_err)
}

/// Activations from a dump, or held-out samples of the synthetic
/// configuration stored in the weights' provenance.
fn tokens_for(meta: &WeightMeta, activations: Option<&Path>) -> Result<Array2<f64>> {
    if let Some(path) = activations {
        return read_dump(path);
    }
    let cfg: ExperimentConfig = serde_json::from_value(meta.provenance["config"].clone())
        .map_err(|_| JsaeError::invalid("weights carry no synthetic configuration; pass --activations"))?;
    let seeds = cfg.seeds();
    let dict = GroundTruthDictionary::random(cfg.m, cfg.n_true, cfg.sparsity, seeds.dictionary)?;
    Ok(dict.sample_with_codes(cfg.eval_tokens, seeds.eval).0)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let (pair, mlp, _) = load_pair(&a.weights)?;
    let xs = read_dump(&a.activations)?;
    let mut threads = a.threads.unwrap_or(1);
    if let Some(t) = env_threads()? {
        threads = t;
    }
    let pool = thread_pool(threads)?;
    let report = evaluate(&mlp, &pair, xs.view(), None, &DEFAULT_THRESHOLDS, pool.as_ref())?;
    write_json(&a.report, &report)?;
    let csv = a.csv.unwrap_or_else(|| a.report.with_extension("csv"));
    let mut file = std::fs::File::create(&csv).map_err(io_err)?;
    report.write_threshold_csv(&mut file).map_err(io_err)?;
    writeln!(
        out,
        "tokens={} explained_variance_x={:.4} explained_variance_y={:.4} frac_above_0.01={:.4}",
        report.token_count,
        report.explained_variance_x,
        report.explained_variance_y,
        report.frac_above(0.01).unwrap_or(f64::NAN)
    )
    .map_err(io_err)
}

#[derive(Serialize)]
struct JacobianOut {
    token: usize,
    row_indices: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<Vec<f64>>,
    nonzero: usize,
    abs_sum: f64,
}

fn cmd_jacobian(a: JacobianArgs, out: &mut dyn Write) -> CmdResult {
    let (pair, mlp, meta) = load_pair(&a.weights)?;
    let xs = tokens_for(&meta, a.activations.as_deref())?;
    if a.token >= xs.nrows() {
        return Err(Failure::Usage(format!(
            "token {} out of range for {} activations",
            a.token,
            xs.nrows()
        )));
    }
    let jac = active_jacobian(&mlp, &pair, xs.row(a.token))?;
    let body = JacobianOut {
        token: a.token,
        values: jac.values.rows().into_iter().map(|r| r.to_vec()).collect(),
        nonzero: jac.nonzero_count(),
        abs_sum: jac.abs_sum(),
        row_indices: jac.row_indices,
        col_indices: jac.col_indices,
    };
    let text = serde_json::to_string_pretty(&body).map_err(JsaeError::from)?;
    writeln!(out, "{text}").map_err(io_err)
}

#[derive(Serialize)]
struct LinearitySummary {
    samples: usize,
    linear: f64,
    jump_relu: f64,
    other: f64,
    delta_agreement: Option<f64>,
    delta_pairs: usize,
    mean_abs_second_difference: f64,
}

fn cmd_linearity(a: LinearityArgs, out: &mut dyn Write) -> CmdResult {
    let (pair, mlp, meta) = load_pair(&a.weights)?;
    let xs = tokens_for(&meta, a.activations.as_deref())?;
    let report = analyze_population(&mlp, &pair, xs.view(), a.samples, a.grid, a.tol, a.seed)?;
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    if let Some(path) = &a.histogram {
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        report.write_second_derivative_csv(&mut file, 16).map_err(io_err)?;
    }
    let summary = LinearitySummary {
        samples: report.samples,
        linear: report.linear,
        jump_relu: report.jump_relu,
        other: report.other,
        delta_agreement: report.delta_agreement,
        delta_pairs: report.delta_pairs,
        mean_abs_second_difference: report.second_derivatives.iter().map(|s| s.mean_abs).sum::<f64>()
            / report.samples as f64,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(JsaeError::from)?;
    writeln!(out, "{text}").map_err(io_err)
}

fn cmd_grad_check(a: GradCheckArgs, out: &mut dyn Write) -> CmdResult {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::Usage(format!("eps must be positive, got {}", a.eps)));
    }
    if a.tokens == 0 {
        return Err(Failure::Usage("tokens must be positive".into()));
    }
    let kind = match a.kind {
        KindArg::Standard => MlpKind::Standard,
        KindArg::Glu => MlpKind::Glu,
    };
    let inst = check_instance(kind, a.seed, a.tokens, 100.0 * a.eps)?;
    let report = grad_check_report(&inst.mlp, &inst.pair, inst.batch.view(), a.lambda, a.eps, 32, a.seed)?;
    writeln!(
        out,
        "max_relative_error={:e} coordinates={} worst={}[{}] floor={:e}",
        report.max_relative_error, report.coordinates_checked, report.worst.0, report.worst.1, REL_ERR_FLOOR
    )
    .map_err(io_err)?;
    if report.max_relative_error < GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:e} is not below {GRAD_CHECK_TOLERANCE:e}",
            report.max_relative_error
        )))
    }
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    resolve_threads(&mut cfg, a.threads)?;
    cfg.validate()?;
    let cmp = compare_random(&cfg)?;
    writeln!(out, "threshold,trained,random").map_err(io_err)?;
    for (t, r) in cmp.trained.jac_frac_above.iter().zip(&cmp.random.jac_frac_above) {
        writeln!(out, "{:?},{:?},{:?}", t.threshold, t.fraction, r.fraction).map_err(io_err)?;
    }
    if let Some(path) = &a.out {
        write_json(path, &cmp)?;
    }
    Ok(())
}
