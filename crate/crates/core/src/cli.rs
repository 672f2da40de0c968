//! `ccr` command-line driver: dataset generation, single fits, diagnostics,
//! sweeps, summaries and plots. Exit codes: 0 ok, 2 usage or configuration,
//! 3 I/O or malformed input files, 4 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datamodel::{dims_for_regime, load_dataset, save_dataset, simulate, write_vector, Dataset, DgpConfig, Regime};
use crate::diagnostics::{
    classify_regime, error_decomposition_with, key_quantities_with, minimax_lower_bound, recommend_estimator,
    regime_thresholds, wedin_check_with, RegimeConstants, TruthFactors,
};
use crate::error::{CcrError, Result};
use crate::estimators::{fit, EstimatorKind, EstimatorSpec, SpectralCache, WeightSpec};
use crate::harness::{
    default_estimators, read_replications, run_plan_with, summarize, write_replications, write_summaries, Checkpoint,
    SimulationPlan,
};
use crate::plot::plot_summary;
use crate::speclin::{operator_norm, thin_svd};

macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &CcrError) -> i32 {
    match e {
        CcrError::Io { .. } | CcrError::Format { .. } | CcrError::Schema { .. } => EXIT_IO,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Sweep settings of a [`RunConfig`]; the generator settings come from `dgp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n_grid: Vec<usize>,
    pub delta_grid: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub estimators: Vec<EstimatorSpec>,
    pub reps: u64,
    pub workers: usize,
    pub record_runtime: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let p = SimulationPlan::default();
        SweepConfig {
            n_grid: p.n_grid,
            delta_grid: p.delta_grid,
            regimes: p.regimes,
            estimators: p.estimators,
            reps: p.reps,
            workers: p.workers,
            record_runtime: p.record_runtime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub dataset: PathBuf,
    pub beta: PathBuf,
    pub sweep_dir: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths {
            dataset: "dataset.ccrd".into(),
            beta: "beta.ccrv".into(),
            sweep_dir: "sweep".into(),
            summary: "summary.csv".into(),
            plot: "mse.svg".into(),
        }
    }
}

/// Everything a run can be configured with. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dgp: DgpConfig,
    pub sweep: SweepConfig,
    pub regime_constants: RegimeConstants,
    pub output: OutputPaths,
}

impl RunConfig {
    pub fn plan(&self) -> SimulationPlan {
        SimulationPlan {
            dgp: self.dgp.clone(),
            n_grid: self.sweep.n_grid.clone(),
            delta_grid: self.sweep.delta_grid.clone(),
            regimes: self.sweep.regimes.clone(),
            estimators: self.sweep.estimators.clone(),
            reps: self.sweep.reps,
            base_seed: self.dgp.base_seed,
            workers: self.sweep.workers,
            record_runtime: self.sweep.record_runtime,
        }
    }

    pub fn from_json(text: &str) -> Result<(Self, bool)> {
        let value: Value = serde_json::from_str(text).map_err(|e| CcrError::InvalidConfig {
            field: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let has_delta = value.pointer("/dgp/delta").is_some();
        let cfg = serde_path_to_error::deserialize(value).map_err(|e| CcrError::InvalidConfig {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok((cfg, has_delta))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccr", version, about = "Canonical correlation regression for noisy instrumental variables")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed (overrides `dgp.base_seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Continue a sweep from its checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Output path (file or directory, depending on the subcommand).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one dataset and write it as a CCRD1 file.
    Generate(GenerateArgs),
    /// Fit one estimator; writes beta-hat and a JSON report.
    Estimate(EstimateArgs),
    /// Spectral diagnostics, regime and recommendation for a dataset.
    Diagnose(DiagnoseArgs),
    /// Run the Monte-Carlo sweep and write replication and summary CSVs.
    Sweep,
    /// Aggregate a replication CSV into a summary CSV.
    Summarize(SummarizeArgs),
    /// Render a summary CSV as an SVG chart.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Replication index selecting the random stream.
    #[arg(long, default_value_t = 0)]
    pub rep: u64,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    pub dataset: PathBuf,
    /// naive, pca, whiten, cca or oracle.
    #[arg(long, default_value = "cca")]
    pub estimator: EstimatorKind,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub ell: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub pinv_tol: f64,
    /// JSON report path; defaults to the beta path with a `.json` extension.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub ell: usize,
    /// Disturbance variance bound; defaults to `sigma_eps^2` from the dataset's config.
    #[arg(long)]
    pub sigma_bar_sq: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    pub replications: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub summary: PathBuf,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<(RunConfig, bool)> {
    let (mut cfg, has_delta) = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CcrError::io(path, e))?;
            RunConfig::from_json(&text)?
        }
        None => (RunConfig::default(), false),
    };
    if let Some(seed) = cli.seed {
        cfg.dgp.base_seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.sweep.workers = w;
    }
    Ok((cfg, has_delta))
}

fn execute(cli: &Cli) -> Result<()> {
    let (mut cfg, has_delta) = load_config(cli)?;
    if let Some(Command::Generate(g)) = &cli.command {
        cfg.dgp.n = g.n.unwrap_or(cfg.dgp.n);
        cfg.dgp.delta = g.delta.unwrap_or(cfg.dgp.delta);
        cfg.dgp.regime = g.regime.unwrap_or(cfg.dgp.regime);
    }
    if cli.print_config {
        say!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    match &cli.command {
        None => Err(CcrError::InvalidInput("no subcommand given (try --help)".into())),
        Some(Command::Generate(g)) => {
            if !has_delta && g.delta.is_none() {
                log::warn!("delta not set; using the default {}", cfg.dgp.delta);
            }
            let out = cli.out.clone().unwrap_or_else(|| cfg.output.dataset.clone());
            cmd_generate(&cfg.dgp, g.rep, &out)
        }
        Some(Command::Estimate(a)) => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.output.beta.clone());
            let json_path = a.json.clone().unwrap_or_else(|| out.with_extension("json"));
            let spec = EstimatorSpec { kind: a.estimator.clone(), k: a.k, ell: a.ell, pinv_tol: a.pinv_tol };
            cmd_estimate(&a.dataset, &spec, &out, &json_path)
        }
        Some(Command::Diagnose(a)) => {
            let report = cmd_diagnose(&a.dataset, a.k, a.ell, a.sigma_bar_sq, &cfg.regime_constants)?;
            let text = serde_json::to_string_pretty(&report)?;
            say!("{text}");
            if let Some(out) = &cli.out {
                fs::write(out, text + "\n").map_err(|e| CcrError::io(out, e))?;
            }
            Ok(())
        }
        Some(Command::Sweep) => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.output.sweep_dir.clone());
            cmd_sweep(&cfg.plan(), &out, cli.resume)
        }
        Some(Command::Summarize(a)) => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.output.summary.clone());
            cmd_summarize(&a.replications, &out)
        }
        Some(Command::Plot(a)) => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.output.plot.clone());
            plot_summary(&a.summary, &out)?;
            say!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn check_ranks(k: usize, ell: usize) -> Result<()> {
    for (field, v) in [("k", k), ("ell", ell)] {
        if v == 0 {
            return Err(CcrError::InvalidConfig { field: field.into(), message: "must be at least 1".into() });
        }
    }
    Ok(())
}

pub fn cmd_generate(dgp: &DgpConfig, rep: u64, out: &Path) -> Result<()> {
    dgp.validate()?;
    let sim = simulate::<f64>(dgp, rep)?;
    let d = &sim.dataset;
    save_dataset(d, out)?;
    let truth = d.truth()?;
    let rank_x = thin_svd(&truth.x)?.rank();
    let rank_w = thin_svd(&truth.w)?.rank();
    let w_svd = thin_svd(&truth.w)?;
    let u_w = w_svd.u.columns(0, rank_w);
    let eps_norm = truth.eps.norm();
    let leak = if eps_norm > 0.0 { (u_w.tr_mul(&truth.eps)).norm() / eps_norm } else { 0.0 };
    say!("wrote {}", out.display());
    say!(
        "n = {}, p = {}, p_w = {}, regime = {}, delta = {}, rep = {rep}",
        d.n(),
        d.p(),
        d.p_w(),
        dgp.regime,
        dgp.delta
    );
    say!(
        "rank(X) = {rank_x} (k = {}), rank(W) = {rank_w} (ell = {}), ||P_W eps|| / ||eps|| = {leak:.2e}",
        dgp.k, dgp.ell
    );
    say!("dataset hash {}", d.content_hash());
    if rank_x != dgp.k || rank_w != dgp.ell {
        log::warn!("generated ranks differ from the configured (k, ell)");
    }
    Ok(())
}

fn load(path: &Path) -> Result<Dataset<f64>> {
    load_dataset::<f64>(path)
}

pub fn estimate_report(dataset: &Dataset<f64>, spec: &EstimatorSpec) -> Result<(Value, nalgebra::DVector<f64>)> {
    check_ranks(spec.k, spec.ell)?;
    let cache = SpectralCache::new(dataset)?;
    let fitted = fit(spec, dataset, &cache)?;
    let fs = &fitted.first_stage;
    let mut report = json!({
        "estimator": spec.name(),
        "k": spec.k,
        "ell": spec.ell,
        "n": dataset.n(),
        "p": dataset.p(),
        "p_w": dataset.p_w(),
        "rank": fs.rank(),
        "rank_shortfall": fs.rank_shortfall(),
        "under_instrumented": fs.under_instrumented(),
        "zero_design": fitted.zero_design,
        "mse": null,
        "term_row": null,
        "term_null": null,
        "term_perp": null,
        "residual": null,
    });
    if let Some(truth) = &dataset.truth {
        let factors = TruthFactors::new(truth)?;
        let d = error_decomposition_with(&fitted.beta, &truth.beta, &factors, fs)?;
        let p = dataset.p() as f64;
        report["mse"] = json!(d.total / p);
        report["term_row"] = json!(d.term_row);
        report["term_null"] = json!(d.term_null);
        report["term_perp"] = json!(d.term_perp);
        report["residual"] = json!(d.residual);
    }
    Ok((report, fitted.beta))
}

pub fn cmd_estimate(dataset: &Path, spec: &EstimatorSpec, out: &Path, json_path: &Path) -> Result<()> {
    check_ranks(spec.k, spec.ell)?;
    let d = load(dataset)?;
    let (mut report, beta) = estimate_report(&d, spec)?;
    write_vector(&beta, out)?;
    report["beta_path"] = json!(out.display().to_string());
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(json_path, format!("{text}\n")).map_err(|e| CcrError::io(json_path, e))?;
    say!("{text}");
    Ok(())
}

/// Diagnostics report. Quantities needing the clean designs are `null` when
/// the dataset carries no truth; the `empirical` block is always present.
pub fn diagnose_report(
    dataset: &Dataset<f64>,
    k: usize,
    ell: usize,
    sigma_bar_sq: Option<f64>,
    constants: &RegimeConstants,
) -> Result<Value> {
    check_ranks(k, ell)?;
    let cache = SpectralCache::new(dataset)?;
    let spec = EstimatorSpec::new(EstimatorKind::CustomCcr(WeightSpec::pca()), k, ell);
    let fs = fit(&spec, dataset, &cache)?.first_stage;
    let lead = |s: &nalgebra::DVector<f64>, m: usize| s.iter().take(m).copied().collect::<Vec<_>>();
    let mut report = json!({
        "n": dataset.n(),
        "p": dataset.p(),
        "p_w": dataset.p_w(),
        "k": k,
        "ell": ell,
        "has_truth": dataset.truth.is_some(),
        "empirical": {
            "singular_values_z_x": lead(&cache.z_x.s, k),
            "singular_values_z_w": lead(&cache.z_w.s, ell),
            "overlap_cosines": fs.canonical_correlations()?,
            "rank": fs.rank(),
            "rank_shortfall": fs.rank_shortfall(),
            "under_instrumented": fs.under_instrumented(),
        },
        "sigma_bar_sq": null,
        "key_quantities": null,
        "thresholds": null,
        "regime": null,
        "recommendation": null,
        "lower_bound": null,
        "wedin": null,
    });
    let Some(truth) = &dataset.truth else {
        return Ok(report);
    };
    let config_sigma = dataset.config.as_ref().map(|c| c.sigma_eps);
    let s2 = sigma_bar_sq.or(config_sigma.map(|s| s * s));
    let factors = TruthFactors::new(truth)?;
    let kq = key_quantities_with(truth, &factors, &fs, s2.unwrap_or(f64::NAN))?;
    report["wedin"] = serde_json::to_value(wedin_check_with(truth, &factors, &fs)?)?;
    if let Some(s2) = s2 {
        report["sigma_bar_sq"] = json!(s2);
        let (lo, hi) = regime_thresholds(kq.kappa_xw, s2, kq.r, constants);
        report["thresholds"] = json!({ "t_lo": lo, "t_hi": hi });
        let regime = classify_regime(kq.nsr_total(), kq.kappa_xw, s2, kq.r, constants);
        report["regime"] = serde_json::to_value(regime)?;
        let rec = recommend_estimator(regime, kq.sigma_min_x, kq.sigma_max_w, kq.kappa_w);
        report["recommendation"] = serde_json::to_value(rec)?;
        if kq.r_star > 0 {
            let sigma_x_noise = operator_norm(&truth.h_x)?;
            let lb = minimax_lower_bound(s2.sqrt(), sigma_x_noise, kq.r_star, kq.sigma_min_w, factors.max_overlap()?);
            match lb {
                Ok(lb) => report["lower_bound"] = serde_json::to_value(lb)?,
                Err(e) => log::warn!("lower bound not available: {e}"),
            }
        }
    } else {
        log::warn!("no sigma_bar_sq given and the dataset has no config; regime fields left null");
    }
    let mut kq_value = serde_json::to_value(&kq)?;
    if s2.is_none() {
        kq_value["sigma_bar_sq"] = Value::Null;
    }
    report["key_quantities"] = kq_value;
    Ok(report)
}

pub fn cmd_diagnose(
    dataset: &Path,
    k: usize,
    ell: usize,
    sigma_bar_sq: Option<f64>,
    constants: &RegimeConstants,
) -> Result<Value> {
    check_ranks(k, ell)?;
    let d = load(dataset)?;
    diagnose_report(&d, k, ell, sigma_bar_sq, constants)
}

/// Seconds per replication of the four default estimators at `n = 300`,
/// moderate regime, on one core.
const REFERENCE_REP_SECONDS: f64 = 0.08;

/// Rough single-machine runtime of a plan, in seconds.
pub fn estimated_runtime(plan: &SimulationPlan) -> f64 {
    let reference = 300.0 * (150f64.powi(2) + 100f64.powi(2));
    let threads = match plan.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    } as f64;
    let per_estimator = plan.estimators.len() as f64 / default_estimators().len() as f64;
    plan.cells()
        .iter()
        .map(|c| {
            let (p, p_w) = dims_for_regime(c.n, c.regime).unwrap_or((0, 0));
            let cost = c.n as f64 * ((p * p + p_w * p_w) as f64) / reference;
            cost * plan.reps as f64 * REFERENCE_REP_SECONDS * per_estimator
        })
        .sum::<f64>()
        / threads
}

pub fn cmd_sweep(plan: &SimulationPlan, out: &Path, resume: bool) -> Result<()> {
    plan.validate()?;
    let secs = estimated_runtime(plan);
    if secs > 600.0 {
        log::warn!(
            "{} rows; estimated runtime about {:.1} hours. Use --resume to continue after an interruption.",
            plan.row_count(),
            secs / 3600.0
        );
    }
    fs::create_dir_all(out).map_err(|e| CcrError::io(out, e))?;
    let checkpoint = Checkpoint { dir: out.join("checkpoint"), resume };
    let rows = run_plan_with(plan, Some(&checkpoint), |cell, i, total| {
        eprintln!("[{i}/{total}] {} n={} delta={} done", cell.regime, cell.n, cell.delta);
        let _ = std::io::stderr().flush();
    })?;
    let rep_path = out.join("replications.csv");
    write_replications(&rows, &rep_path)?;
    let summary = summarize(&rows);
    let sum_path = out.join("summary.csv");
    write_summaries(&summary.rows, &sum_path)?;
    if summary.error_rows > 0 {
        log::warn!("{} replication rows carry errors and were left out of the summary", summary.error_rows);
    }
    say!("wrote {} ({} rows) and {}", rep_path.display(), rows.len(), sum_path.display());
    Ok(())
}

pub fn cmd_summarize(replications: &Path, out: &Path) -> Result<()> {
    let rows = read_replications(replications)?;
    let summary = summarize(&rows);
    write_summaries(&summary.rows, out)?;
    if summary.error_rows > 0 {
        log::warn!("{} error rows excluded", summary.error_rows);
    }
    say!("wrote {} ({} groups)", out.display(), summary.rows.len());
    Ok(())
}
