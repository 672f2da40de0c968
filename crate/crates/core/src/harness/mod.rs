//! Deterministic Monte-Carlo sweeps over `(regime, n, delta)` cells: one
//! dataset per replication shared by every estimator, per-fit error
//! decomposition, resumable execution and quantile summaries.

mod csvio;
mod summary;

pub use csvio::{
    read_replications, read_summaries, write_replications, write_summaries, REPLICATION_HEADER,
    SUMMARY_HEADER,
};
pub use summary::{quantile, summarize, Summary, SummaryRecord};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{simulate, DgpConfig, Regime};
use crate::diagnostics::{error_decomposition_with, noise_to_signal, TruthFactors};
use crate::error::{CcrError, Result};
use crate::estimators::{fit, EstimatorKind, EstimatorSpec, SpectralCache};

fn default_regimes() -> Vec<Regime> {
    vec![Regime::Moderate]
}
fn default_n_grid() -> Vec<usize> {
    vec![300, 500]
}
fn default_delta_grid() -> Vec<f64> {
    vec![0.05, 0.65]
}
fn default_reps() -> u64 {
    50
}

/// The four estimators compared in the sweeps, at `(k, ell) = (8, 10)`.
pub fn default_estimators() -> Vec<EstimatorSpec> {
    [
        EstimatorKind::Naive2Sls,
        EstimatorKind::Pca2Sls,
        EstimatorKind::Whiten2Sls,
        EstimatorKind::Cca2Sls,
    ]
    .into_iter()
    .map(|k| EstimatorSpec::new(k, 8, 10))
    .collect()
}

/// Grid of cells, replication count and estimators. `dgp` supplies every
/// generator setting except `n`, `regime`, `delta` and `base_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationPlan {
    #[serde(default)]
    pub dgp: DgpConfig,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_delta_grid")]
    pub delta_grid: Vec<f64>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_reps")]
    pub reps: u64,
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
    /// Worker threads; 0 picks the number of available cores.
    #[serde(default)]
    pub workers: usize,
    /// Record wall-clock time per fit. Off by default because timings make
    /// otherwise identical runs differ byte-for-byte.
    #[serde(default)]
    pub record_runtime: bool,
}

fn default_base_seed() -> u64 {
    DgpConfig::default().base_seed
}

impl Default for SimulationPlan {
    fn default() -> Self {
        SimulationPlan {
            dgp: DgpConfig::default(),
            n_grid: default_n_grid(),
            delta_grid: default_delta_grid(),
            regimes: default_regimes(),
            estimators: default_estimators(),
            reps: default_reps(),
            base_seed: default_base_seed(),
            workers: 0,
            record_runtime: false,
        }
    }
}

/// One `(regime, n, delta)` grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub regime: Regime,
    pub n: usize,
    pub delta: f64,
}

impl Cell {
    /// Stable file-name-safe identifier.
    pub fn key(&self) -> String {
        format!("{}_n{}_d{:016x}", self.regime.as_str(), self.n, self.delta.to_bits())
    }

    fn order(&self, other: &Cell) -> std::cmp::Ordering {
        (self.regime, self.n)
            .cmp(&(other.regime, other.n))
            .then(self.delta.total_cmp(&other.delta))
    }
}

impl SimulationPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(CcrError::InvalidConfig { field: field.into(), message: message.into() })
        };
        if self.reps == 0 {
            return bad("reps", "must be at least 1");
        }
        if self.n_grid.is_empty() {
            return bad("n_grid", "must not be empty");
        }
        if self.delta_grid.is_empty() {
            return bad("delta_grid", "must not be empty");
        }
        if self.regimes.is_empty() {
            return bad("regimes", "must not be empty");
        }
        if self.estimators.is_empty() {
            return bad("estimators", "must not be empty");
        }
        for cell in self.cells() {
            self.cell_config(&cell).validate()?;
        }
        Ok(())
    }

    /// Cells in output order: regime, then `n`, then `delta`, duplicates removed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &regime in &self.regimes {
            for &n in &self.n_grid {
                for &delta in &self.delta_grid {
                    cells.push(Cell { regime, n, delta });
                }
            }
        }
        cells.sort_by(|a, b| a.order(b));
        cells.dedup_by(|a, b| a.order(b).is_eq());
        cells
    }

    pub fn cell_config(&self, cell: &Cell) -> DgpConfig {
        DgpConfig {
            n: cell.n,
            regime: cell.regime,
            delta: cell.delta,
            base_seed: self.base_seed,
            ..self.dgp.clone()
        }
    }

    /// Total number of output rows.
    pub fn row_count(&self) -> u64 {
        self.cells().len() as u64 * self.reps * self.estimators.len() as u64
    }

    /// Digest of everything that affects the output (worker count excluded).
    pub fn fingerprint(&self) -> String {
        let mut canon = self.clone();
        canon.workers = 0;
        let json = serde_json::to_vec(&canon).expect("plan serializes");
        hex::encode(&Sha256::digest(&json)[..16])
    }
}

/// One estimator fit on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub regime: Regime,
    pub n: usize,
    pub p: usize,
    pub p_w: usize,
    pub delta: f64,
    pub estimator: String,
    pub rep: u64,
    pub seed: u64,
    pub dataset_hash: String,
    /// `||beta_hat - beta*||^2 / p`.
    pub mse: f64,
    pub term_row: f64,
    pub term_null: f64,
    pub term_perp: f64,
    pub nsr_x: f64,
    pub nsr_w: f64,
    pub runtime_ms: f64,
    pub error: Option<String>,
}

impl ReplicationRecord {
    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    pub fn cell(&self) -> Cell {
        Cell { regime: self.regime, n: self.n, delta: self.delta }
    }
}

fn error_row(cell: &Cell, dims: (usize, usize), estimator: &str, rep: u64, seed: u64, hash: &str, err: &CcrError) -> ReplicationRecord {
    ReplicationRecord {
        regime: cell.regime,
        n: cell.n,
        p: dims.0,
        p_w: dims.1,
        delta: cell.delta,
        estimator: estimator.to_string(),
        rep,
        seed,
        dataset_hash: hash.to_string(),
        mse: f64::NAN,
        term_row: f64::NAN,
        term_null: f64::NAN,
        term_perp: f64::NAN,
        nsr_x: f64::NAN,
        nsr_w: f64::NAN,
        runtime_ms: 0.0,
        error: Some(err.to_string().replace(['\n', '\r'], " ")),
    }
}

/// Generates replication `rep` of `cell` and fits every estimator of the plan on it.
/// Failures become rows with the `error` field set.
pub fn run_replication(plan: &SimulationPlan, cell: &Cell, rep: u64) -> Vec<ReplicationRecord> {
    let cfg = plan.cell_config(cell);
    let dims = cfg.dims().unwrap_or((0, 0));
    let seed = cfg.replication_seed(rep).id();
    let prepared = simulate::<f64>(&cfg, rep).and_then(|sim| {
        let cache = SpectralCache::new(&sim.dataset)?;
        let truth = sim.dataset.truth()?;
        let factors = TruthFactors::new(truth)?;
        let nsr = noise_to_signal(truth, &factors, cfg.k, cfg.ell)?;
        Ok((sim, cache, factors, nsr))
    });
    let (sim, cache, factors, (nsr_x, nsr_w)) = match prepared {
        Ok(v) => v,
        Err(e) => {
            return plan
                .estimators
                .iter()
                .map(|spec| error_row(cell, dims, spec.name(), rep, seed, "", &e))
                .collect()
        }
    };
    let dataset = &sim.dataset;
    let hash = dataset.content_hash();
    let beta_star = &dataset.truth().expect("simulated data carries truth").beta;
    let p = dataset.p();

    plan.estimators
        .iter()
        .map(|spec| {
            let start = Instant::now();
            let outcome = fit(spec, dataset, &cache)
                .and_then(|f| error_decomposition_with(&f.beta, beta_star, &factors, &f.first_stage));
            let runtime_ms = if plan.record_runtime { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
            match outcome {
                Ok(d) => ReplicationRecord {
                    regime: cell.regime,
                    n: cell.n,
                    p,
                    p_w: dataset.p_w(),
                    delta: cell.delta,
                    estimator: spec.name().to_string(),
                    rep,
                    seed,
                    dataset_hash: hash.clone(),
                    mse: d.total / p as f64,
                    term_row: d.term_row,
                    term_null: d.term_null,
                    term_perp: d.term_perp,
                    nsr_x,
                    nsr_w,
                    runtime_ms,
                    error: None,
                },
                Err(e) => error_row(cell, dims, spec.name(), rep, seed, &hash, &e),
            }
        })
        .collect()
}

fn run_cell(plan: &SimulationPlan, cell: &Cell) -> Vec<ReplicationRecord> {
    (0..plan.reps)
        .into_par_iter()
        .map(|rep| run_replication(plan, cell, rep))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Where a run keeps per-cell results so it can be resumed.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    /// Reuse cells recorded as complete by an earlier run with the same plan.
    pub resume: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    plan: String,
    completed: BTreeSet<String>,
}

const MANIFEST: &str = "manifest.json";

fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST);
    match fs::read(&path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CcrError::io(path, e)),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CcrError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CcrError::io(path, e))
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CcrError::InvalidConfig { field: "workers".into(), message: e.to_string() })
}

/// Runs every `(cell, rep)` of the plan on `plan.workers` threads. Rows come
/// back ordered by regime, `n`, `delta`, replication and plan estimator order,
/// independent of the worker count.
pub fn run_plan(plan: &SimulationPlan) -> Result<Vec<ReplicationRecord>> {
    run_plan_with(plan, None, |_, _, _| {})
}

/// [`run_plan`] with optional checkpointing and a per-cell progress callback
/// `(cell, index, total)`.
pub fn run_plan_with(
    plan: &SimulationPlan,
    checkpoint: Option<&Checkpoint>,
    mut progress: impl FnMut(&Cell, usize, usize),
) -> Result<Vec<ReplicationRecord>> {
    plan.validate()?;
    let pool = build_pool(plan.workers)?;
    let cells = plan.cells();
    let fingerprint = plan.fingerprint();

    let mut manifest = Manifest { plan: fingerprint.clone(), completed: BTreeSet::new() };
    if let Some(cp) = checkpoint {
        let cells_dir = cp.dir.join("cells");
        fs::create_dir_all(&cells_dir).map_err(|e| CcrError::io(&cells_dir, e))?;
        if cp.resume {
            if let Some(old) = read_manifest(&cp.dir)? {
                if old.plan != fingerprint {
                    return Err(CcrError::InvalidConfig {
                        field: "resume".into(),
                        message: format!(
                            "checkpoint in {} belongs to a different plan ({} vs {fingerprint})",
                            cp.dir.display(),
                            old.plan
                        ),
                    });
                }
                manifest = old;
            }
        }
    }

    let mut out = Vec::with_capacity(plan.row_count() as usize);
    for (i, cell) in cells.iter().enumerate() {
        let key = cell.key();
        let cached = match checkpoint {
            Some(cp) if manifest.completed.contains(&key) => {
                let path = cp.dir.join("cells").join(format!("{key}.csv"));
                if path.exists() {
                    Some(read_replications(&path)?)
                } else {
                    None
                }
            }
            _ => None,
        };
        let rows = match cached {
            Some(rows) => rows,
            None => {
                let rows = pool.install(|| run_cell(plan, cell));
                if let Some(cp) = checkpoint {
                    let path = cp.dir.join("cells").join(format!("{key}.csv"));
                    write_replications(&rows, &path)?;
                    manifest.completed.insert(key);
                    write_atomic(&cp.dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
                }
                rows
            }
        };
        progress(cell, i + 1, cells.len());
        out.extend(rows);
    }
    Ok(out)
}
