//! Config-driven experiment execution: single runs, sweeps, lemma checks and
//! the proximal-point baseline, with trace and summary persistence.
//!
//! Each `cli_*` entry point returns the process exit code: 0 on success, 1
//! when a run fails to converge or a check fails, 2 for invalid input.

pub mod config;
pub mod lemma;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::banach_geometry::{GeometryError, Quasidensity, SpaceSpec};
use crate::convex_kernel::{identity_tolerance, Domain, GridFunctional, KernelError, SearchBox};
use crate::lattice_system::{
    lieb_options, LatticeError, LatticeModel, LatticeSystem, LiebFunctional,
    DEFAULT_SEARCH_HALF_WIDTH,
};
use crate::myksoda::{deregularize, proximal_point_baseline, run_with, IterationTrace, MyksodaError};

pub use config::{Backend, CellConfig, ConfigError, ExperimentConfig};
pub use lemma::{run_lemma_suites, LemmaHooks, LemmaReport};
use output::{write_summary, write_trace, SummaryRow};

/// Environment variable naming the cache directory for tabulated functionals.
pub const CACHE_ENV: &str = "MYKSODA_CACHE_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Run(#[from] MyksodaError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn cache_dir(output: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| output.join("cache"))
}

#[derive(Serialize)]
struct CacheKey<'a> {
    kind: &'static str,
    model: &'a LatticeModel,
    gap_tol: f64,
    h: f64,
    half_width: f64,
}

/// `F` of a lattice model tabulated on the physical simplex, loaded from the
/// cache when present. The cached values do not depend on `p`.
pub fn tabulated_lieb(
    model: &LatticeModel,
    gap_tol: f64,
    h: f64,
    p: f64,
    cache: &Path,
) -> Result<GridFunctional, HarnessError> {
    let key = CacheKey {
        kind: "lieb-simplex-v1",
        model,
        gap_tol,
        h,
        half_width: DEFAULT_SEARCH_HALF_WIDTH,
    };
    let digest = hex::encode(Sha256::digest(serde_json::to_vec(&key)?));
    let path = cache.join(format!("lieb-{}.json", &digest[..24]));
    let space = SpaceSpec::new(model.sites, p)?;
    if let Ok(file) = fs::File::open(&path) {
        match GridFunctional::read_from(std::io::BufReader::new(file)) {
            Ok(f) => return Ok(f.with_space(space)?),
            Err(e) => warn!("ignoring unreadable cache entry {}: {e}", path.display()),
        }
    }
    info!(
        "tabulating F for M={} N={} lambda={} at h={h}",
        model.sites, model.particles, model.lambda
    );
    let system = LatticeSystem::new(model.clone(), gap_tol)?;
    let search_box = SearchBox::symmetric(model.sites, DEFAULT_SEARCH_HALF_WIDTH);
    let options = lieb_options();
    let f = GridFunctional::tabulate(
        space,
        Domain::physical(model.particles),
        h,
        format!("F lambda={}", model.lambda),
        |rho| {
            system
                .lieb_functional(rho, &search_box, &options)
                .map(|l| l.value)
                .unwrap_or(f64::INFINITY)
        },
    )?;
    fs::create_dir_all(cache).map_err(io_err(cache))?;
    let tmp = cache.join(format!("{}.tmp-{}", digest, std::process::id()));
    {
        let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_to(std::io::BufWriter::new(file))?;
    }
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(f)
}

/// Result of one run cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: CellConfig,
    pub trace: Option<IterationTrace>,
    pub error: Option<String>,
    pub row: SummaryRow,
}

impl CellOutcome {
    pub fn converged(&self) -> bool {
        self.error.is_none() && self.trace.as_ref().is_some_and(|t| t.converged)
    }
}

fn execute(cell: &CellConfig, cache: &Path) -> Result<IterationTrace, HarnessError> {
    let cfg = &cell.run;
    let reference_system = LatticeSystem::new(cfg.model_ref.clone(), cfg.gap_tol)?;
    let p = cfg.space.p();
    let trace = match cell.backend {
        Backend::Exact => {
            let full = LiebFunctional::new(LatticeSystem::new(cfg.model_full.clone(), cfg.gap_tol)?, p)?;
            let reference = LiebFunctional::new(reference_system.clone(), p)?;
            run_with(cfg, &full, &reference, &reference_system)?
        }
        Backend::Grid => {
            let full = tabulated_lieb(&cfg.model_full, cfg.gap_tol, cfg.grid_h, p, cache)?;
            let reference = tabulated_lieb(&cfg.model_ref, cfg.gap_tol, cfg.grid_h, p, cache)?;
            run_with(cfg, &full, &reference, &reference_system)?
        }
    };
    Ok(trace)
}

/// Runs one cell and compares the de-regularized result with exact diagonalization.
pub fn run_cell(index: usize, cell: &CellConfig, cache: &Path) -> CellOutcome {
    let cfg = &cell.run;
    let (trace, error) = match execute(cell, cache) {
        Ok(t) => (Some(t), None),
        Err(HarnessError::Run(e)) => (e.partial_trace().cloned(), Some(e.to_string())),
        Err(e) => (None, Some(e.to_string())),
    };
    let oracle = crate::lattice_system::LatticeSystem::new(cfg.model_full.clone(), cfg.gap_tol)
        .and_then(|s| s.ground_state(&cfg.external_potential));
    let mut row = SummaryRow::new(index, cell);
    if let Some(t) = &trace {
        row.converged = t.converged && error.is_none();
        row.iterations = t.iterations;
        row.final_residual = t.final_residual;
        row.final_energy = t.final_energy;
        let (rho, energy) = deregularize(&cfg.space, cfg.eps, &t.z, &cfg.external_potential, t.final_energy);
        row.deregularized_energy = energy;
        if let Ok(gs) = &oracle {
            row.exact_energy = gs.energy;
            row.degenerate = gs.degenerate;
            row.density_error = rho.max_abs_diff(&gs.density);
            row.energy_error = (energy - gs.energy).abs();
        }
    }
    row.status = match (&error, &trace) {
        (Some(e), _) => format!("error: {e}"),
        (None, Some(t)) if t.converged => "converged".into(),
        _ => "max_iter".into(),
    };
    CellOutcome {
        cell: cell.clone(),
        trace,
        error,
        row,
    }
}

pub fn trace_file_name(index: usize) -> String {
    format!("trace-{index:03}.jsonl")
}

/// Runs every cell (in parallel) and writes traces and the summary table.
pub fn execute_cells(
    cells: &[CellConfig],
    output: &Path,
    cache: &Path,
) -> Result<Vec<CellOutcome>, HarnessError> {
    fs::create_dir_all(output).map_err(io_err(output))?;
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| run_cell(i, cell, cache))
        .collect();
    for (i, o) in outcomes.iter().enumerate() {
        let path = output.join(trace_file_name(i));
        write_trace(&path, &o.cell, o.trace.as_ref())?;
        match (&o.error, o.converged()) {
            (Some(e), _) => warn!("cell {i}: {e}"),
            (None, false) => warn!("cell {i}: no convergence within {} iterations", o.cell.run.max_iter),
            _ => info!(
                "cell {i}: converged in {} iterations, density error {:.3e}",
                o.row.iterations, o.row.density_error
            ),
        }
    }
    let rows: Vec<SummaryRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_summary(&output.join("summary.csv"), &rows)?;
    Ok(outcomes)
}

fn load(config_path: &Path, output: Option<&Path>) -> Result<(ExperimentConfig, PathBuf), i32> {
    match ExperimentConfig::load(config_path) {
        Ok(c) => {
            log::set_max_level(c.output.verbosity.level());
            let dir = output.map(Path::to_path_buf).unwrap_or_else(|| c.output.dir.clone());
            if let Err(e) = fs::create_dir_all(&dir) {
                eprintln!("invalid `output.dir`: cannot create {}: {e}", dir.display());
                return Err(EXIT_INVALID);
            }
            Ok((c, dir))
        }
        Err(e) => {
            eprintln!("{}: {e}", config_path.display());
            Err(EXIT_INVALID)
        }
    }
}

fn run_cells_exit(cells: &[CellConfig], dir: &Path) -> i32 {
    match execute_cells(cells, dir, &cache_dir(dir)) {
        Ok(outcomes) => {
            let failed = outcomes.iter().filter(|o| !o.converged()).count();
            println!(
                "{} of {} run(s) converged; summary in {}",
                outcomes.len() - failed,
                outcomes.len(),
                dir.join("summary.csv").display()
            );
            if failed == 0 {
                EXIT_OK
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_FAILED
        }
    }
}

/// `run <config>`: the configured run (ignores any sweep section).
pub fn cli_run(config_path: &Path, output: Option<&Path>) -> i32 {
    let (mut config, dir) = match load(config_path, output) {
        Ok(v) => v,
        Err(code) => return code,
    };
    config.sweep = None;
    match config.cells() {
        Ok(cells) => run_cells_exit(&cells, &dir),
        Err(e) => {
            eprintln!("{e}");
            EXIT_INVALID
        }
    }
}

/// `sweep <config>`: cartesian product of the swept values.
pub fn cli_sweep(config_path: &Path, output: Option<&Path>) -> i32 {
    let (config, dir) = match load(config_path, output) {
        Ok(v) => v,
        Err(code) => return code,
    };
    if config.sweep.is_none() {
        eprintln!("{}: invalid `sweep`: no sweep section", config_path.display());
        return EXIT_INVALID;
    }
    match config.cells() {
        Ok(cells) => run_cells_exit(&cells, &dir),
        Err(e) => {
            eprintln!("{e}");
            EXIT_INVALID
        }
    }
}

/// `lemma-check <config>` with replaceable geometry hooks.
pub fn cli_lemma_check_with(config_path: &Path, output: Option<&Path>, hooks: &LemmaHooks) -> i32 {
    let (config, dir) = match load(config_path, output) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let reports = run_lemma_suites(&config, &cache_dir(&dir), hooks);
    let path = dir.join("lemma_report.jsonl");
    let mut lines = String::new();
    for r in &reports {
        println!("{}", r.line());
        lines.push_str(&serde_json::to_string(r).expect("serializable"));
        lines.push('\n');
    }
    if let Err(e) = fs::write(&path, lines) {
        eprintln!("cannot write {}: {e}", path.display());
        return EXIT_FAILED;
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.lemma.as_str())
        .collect();
    if failed.is_empty() {
        EXIT_OK
    } else {
        eprintln!("failed lemma checks: {}", failed.join(", "));
        EXIT_FAILED
    }
}

pub fn cli_lemma_check(config_path: &Path, output: Option<&Path>) -> i32 {
    cli_lemma_check_with(config_path, output, &LemmaHooks::default())
}

/// Outcome of the proximal-point baseline on `F¹ + w*`.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub values: Vec<f64>,
    pub iterates: Vec<Quasidensity>,
    pub grid_minimum: f64,
    pub monotone: bool,
    pub final_gap: f64,
    pub tolerance: f64,
}

pub fn run_baseline(config: &ExperimentConfig, cache: &Path) -> Result<BaselineOutcome, HarnessError> {
    let cell = config.cells()?.remove(0);
    let cfg = &cell.run;
    let f = tabulated_lieb(&cfg.model_full, cfg.gap_tol, cfg.grid_h, cfg.space.p(), cache)?;
    let ws = &cfg.external_potential;
    let x0 = match &config.baseline.x0 {
        Some(v) => Quasidensity::from_slice(v),
        None => {
            let n = cfg.model_full.particles as f64 / cfg.model_full.sites as f64;
            Quasidensity::from_vec(vec![n; cfg.model_full.sites])
        }
    };
    let trace = proximal_point_baseline(&f, ws, config.baseline.eps, &x0, config.baseline.iters)?;
    let shifted = f.shifted(ws)?;
    let (_, grid_minimum) = shifted.min_node()?;
    let last = *trace.values.last().expect("initial value recorded");
    Ok(BaselineOutcome {
        final_gap: (last - grid_minimum).abs(),
        tolerance: identity_tolerance(cfg.grid_h),
        grid_minimum,
        monotone: trace.monotone,
        values: trace.values,
        iterates: trace.iterates,
    })
}

/// `baseline-prox <config>`: proximal-point iteration on the tabulated `F¹ + w*`.
pub fn cli_baseline_prox(config_path: &Path, output: Option<&Path>) -> i32 {
    let (config, dir) = match load(config_path, output) {
        Ok(v) => v,
        Err(code) => return code,
    };
    let outcome = match run_baseline(&config, &cache_dir(&dir)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_FAILED;
        }
    };
    let path = dir.join("baseline.csv");
    if let Err(e) = output::write_baseline(&path, &outcome) {
        eprintln!("{e}");
        return EXIT_FAILED;
    }
    let pass = outcome.monotone && outcome.final_gap <= outcome.tolerance;
    println!(
        "{} baseline: final value {:.10e}, grid minimum {:.10e}, gap {:.3e} (tol {:.1e}), monotone {}",
        if pass { "PASS" } else { "FAIL" },
        outcome.values.last().copied().unwrap_or(f64::NAN),
        outcome.grid_minimum,
        outcome.final_gap,
        outcome.tolerance,
        outcome.monotone
    );
    if pass {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}
