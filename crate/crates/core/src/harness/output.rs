//! Trace (JSON lines) and summary (CSV) writers.
//!
//! Floats are written in a fixed `{:.16e}` form so that repeated runs produce
//! byte-identical files; non-finite values become `null`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::config::{Backend, CellConfig};
use super::{io_err, BaselineOutcome, HarnessError};
use crate::myksoda::{IterationTrace, StepRecord};

pub const TRACE_FIELDS: [&str; 13] = [
    "index",
    "x",
    "potential",
    "reference_density",
    "direction",
    "tau",
    "energy",
    "section_min",
    "residual",
    "slope",
    "monotonicity_ratio",
    "orthogonality",
    "energy_drop",
];

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

fn vec_json(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| num(x)).collect();
    format!("[{}]", parts.join(","))
}

fn step_line(s: &StepRecord) -> String {
    let values = [
        s.index.to_string(),
        vec_json(s.x.as_slice()),
        vec_json(s.potential.as_slice()),
        vec_json(s.reference_density.as_slice()),
        vec_json(s.direction.as_slice()),
        num(s.tau),
        num(s.energy),
        num(s.section_min),
        num(s.residual),
        num(s.slope),
        num(s.monotonicity_ratio),
        num(s.orthogonality),
        num(s.energy_drop),
    ];
    let body: Vec<String> = TRACE_FIELDS
        .iter()
        .zip(values.iter())
        .map(|(k, v)| format!("\"{k}\":{v}"))
        .collect();
    format!("{{{}}}", body.join(","))
}

/// Header line followed by one line per recorded step.
pub fn write_trace(
    path: &Path,
    cell: &CellConfig,
    trace: Option<&IterationTrace>,
) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::json!({
        "fields": TRACE_FIELDS,
        "config_hash": cell.hash(),
    });
    let mut text = serde_json::to_string(&header)?;
    text.push('\n');
    if let Some(t) = trace {
        for s in &t.steps {
            text.push_str(&step_line(s));
            text.push('\n');
        }
    }
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Parses a trace file back into its header hash and per-step objects.
pub fn read_trace(path: &Path) -> Result<(String, Vec<serde_json::Value>), HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap_or("{}"))?;
    let hash = header["config_hash"].as_str().unwrap_or_default().to_string();
    let rows = lines
        .map(serde_json::from_str)
        .collect::<Result<Vec<_>, _>>()?;
    Ok((hash, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub index: usize,
    pub p: f64,
    pub eps: f64,
    pub interaction: f64,
    pub potential_scale: f64,
    pub backend: Backend,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub final_energy: f64,
    pub deregularized_energy: f64,
    pub exact_energy: f64,
    pub density_error: f64,
    pub energy_error: f64,
    pub degenerate: bool,
    pub status: String,
    pub config_hash: String,
}

impl SummaryRow {
    pub fn new(index: usize, cell: &CellConfig) -> Self {
        Self {
            index,
            p: cell.run.space.p(),
            eps: cell.run.eps,
            interaction: cell.run.model_full.interaction,
            potential_scale: cell.potential_scale,
            backend: cell.backend,
            converged: false,
            iterations: 0,
            final_residual: f64::NAN,
            final_energy: f64::NAN,
            deregularized_energy: f64::NAN,
            exact_energy: f64::NAN,
            density_error: f64::NAN,
            energy_error: f64::NAN,
            degenerate: false,
            status: String::new(),
            config_hash: cell.hash(),
        }
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Serialize)]
struct BaselineRow<'a> {
    iteration: usize,
    value: f64,
    x: &'a str,
}

pub fn write_baseline(path: &Path, outcome: &BaselineOutcome) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, (v, x)) in outcome.values.iter().zip(&outcome.iterates).enumerate() {
        let xs = vec_json(x.as_slice());
        w.serialize(BaselineRow {
            iteration: i,
            value: *v,
            x: &xs,
        })?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
