//! Experiment configuration: TOML with dotted keys, e.g.
//!
//! ```toml
//! space.p = 2
//! model.sites = 2
//! model.particles = 1
//! model.interaction = 2.0
//! run.eps = 0.1
//! run.external_potential = [0.3, -0.3]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::banach_geometry::{Potential, Quasidensity, SpaceSpec};
use crate::lattice_system::{LatticeError, LatticeModel, Topology, DEFAULT_GAP_TOL};
use crate::myksoda::{DampingRule, MyksodaError, RunConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{}invalid `{field}`: {reason}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        field: String,
        reason: String,
        line: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Dual Newton solve against exact diagonalization.
    Exact,
    /// Tabulated functionals on the physical simplex.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Quiet,
    Info,
    Debug,
}

impl Verbosity {
    pub fn level(self) -> log::LevelFilter {
        match self {
            Verbosity::Quiet => log::LevelFilter::Warn,
            Verbosity::Info => log::LevelFilter::Info,
            Verbosity::Debug => log::LevelFilter::Debug,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub p: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub sites: usize,
    pub particles: usize,
    #[serde(default = "one")]
    pub hopping: f64,
    #[serde(default)]
    pub interaction: f64,
    #[serde(default = "chain")]
    pub topology: Topology,
    #[serde(default = "one")]
    pub lambda_full: f64,
    #[serde(default)]
    pub lambda_ref: f64,
}

fn chain() -> Topology {
    Topology::Chain
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub eps: f64,
    pub residual_tol: f64,
    pub max_iter: usize,
    pub gap_tol: f64,
    pub seed: u64,
    pub backend: Backend,
    pub grid_h: f64,
    pub external_potential: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
    pub damping: DampingRule,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            eps: 0.1,
            residual_tol: 1e-8,
            max_iter: 500,
            gap_tol: DEFAULT_GAP_TOL,
            seed: 0,
            backend: Backend::Exact,
            grid_h: 0.01,
            external_potential: None,
            x0: None,
            damping: DampingRule::Majorant,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub eps: Option<Vec<f64>>,
    pub p: Option<Vec<f64>>,
    pub interaction: Option<Vec<f64>>,
    pub potential_scale: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub verbosity: Verbosity,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("output"),
            verbosity: Verbosity::Info,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaSection {
    /// Sample count for the functional-level suites.
    pub samples: usize,
    /// Sample count for the norm-gap suite.
    pub xu_samples: usize,
    pub dims: Vec<usize>,
    pub p: Vec<f64>,
    pub eps: f64,
    pub grid_h: f64,
    pub descent_runs: usize,
    pub seed: u64,
}

impl Default for LemmaSection {
    fn default() -> Self {
        Self {
            samples: 50,
            xu_samples: 10_000,
            dims: vec![2, 3, 4],
            p: vec![2.0, 3.0],
            eps: 0.1,
            grid_h: 0.01,
            descent_runs: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub eps: f64,
    pub iters: usize,
    pub x0: Option<Vec<f64>>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            eps: 1.0,
            iters: 60,
            x0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceSection,
    pub model: ModelSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub lemma: LemmaSection,
    #[serde(default)]
    pub baseline: BaselineSection,
}

/// One fully resolved run: the iteration settings plus the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub run: RunConfig,
    pub backend: Backend,
    pub potential_scale: f64,
}

impl CellConfig {
    /// SHA-256 over the canonical JSON form of the resolved cell.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(&json))
    }
}

fn line_of(source: &str, field: &str) -> Option<usize> {
    let key = field.rsplit('.').next().unwrap_or(field);
    let section = field.split('.').next().unwrap_or(field);
    source
        .lines()
        .position(|l| {
            let t = l.trim_start();
            t.starts_with(&format!("{field} ")) || t.starts_with(&format!("{field}="))
        })
        .or_else(|| {
            source.lines().position(|l| {
                let t = l.trim_start();
                t.starts_with(section) && t.contains(key)
            })
        })
        .map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(source: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(source).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate().map_err(|e| match e {
            ConfigError::Invalid { field, reason, .. } => ConfigError::Invalid {
                line: line_of(source, &field),
                field,
                reason,
            },
            other => other,
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&source)
    }

    fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
            line: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(sweep) = &self.sweep {
            for (name, list) in [
                ("sweep.eps", &sweep.eps),
                ("sweep.p", &sweep.p),
                ("sweep.interaction", &sweep.interaction),
                ("sweep.potential_scale", &sweep.potential_scale),
            ] {
                if let Some(values) = list {
                    if values.is_empty() {
                        return Err(Self::invalid(name, "swept value list is empty"));
                    }
                    if values.iter().any(|v| !v.is_finite()) {
                        return Err(Self::invalid(name, "values must be finite"));
                    }
                }
            }
        }
        if self.lemma.dims.is_empty() || self.lemma.dims.contains(&0) {
            return Err(Self::invalid("lemma.dims", "needs positive dimensions"));
        }
        if self.lemma.p.is_empty() || self.lemma.p.iter().any(|p| !(*p >= 2.0 && p.is_finite())) {
            return Err(Self::invalid("lemma.p", "exponents must be finite and at least 2"));
        }
        if !(self.baseline.eps > 0.0 && self.baseline.eps.is_finite()) {
            return Err(Self::invalid("baseline.eps", "must be positive"));
        }
        for cell in self.cells()? {
            cell.run.validate().map_err(|e| match e {
                MyksodaError::InvalidConfig { field, reason } => Self::invalid(&field, reason),
                other => Self::invalid("run", other.to_string()),
            })?;
        }
        Ok(())
    }

    fn lattice_field(err: LatticeError) -> ConfigError {
        match err {
            LatticeError::TooManyParticles { .. } => Self::invalid("model.particles", err.to_string()),
            LatticeError::InvalidSites => Self::invalid("model.sites", err.to_string()),
            other => Self::invalid("model", other.to_string()),
        }
    }

    pub fn model(&self, lambda: f64, interaction: f64) -> LatticeModel {
        LatticeModel {
            sites: self.model.sites,
            particles: self.model.particles,
            hopping: self.model.hopping,
            interaction,
            lambda,
            topology: self.model.topology,
        }
    }

    fn cell(&self, p: f64, eps: f64, interaction: f64, scale: f64) -> Result<CellConfig, ConfigError> {
        let m = self.model.sites;
        let space = SpaceSpec::new(m, p).map_err(|e| Self::invalid("space.p", e.to_string()))?;
        let full = self.model(self.model.lambda_full, interaction);
        let reference = self.model(self.model.lambda_ref, interaction);
        full.validate().map_err(Self::lattice_field)?;
        reference.validate().map_err(Self::lattice_field)?;
        let base = self
            .run
            .external_potential
            .clone()
            .unwrap_or_else(|| vec![0.0; m]);
        if base.len() != m {
            return Err(Self::invalid(
                "run.external_potential",
                format!("expected {m} entries, got {}", base.len()),
            ));
        }
        let x0 = match &self.run.x0 {
            Some(v) if v.len() != m => {
                return Err(Self::invalid(
                    "run.x0",
                    format!("expected {m} entries, got {}", v.len()),
                ))
            }
            Some(v) => Some(Quasidensity::from_slice(v)),
            None => None,
        };
        Ok(CellConfig {
            run: RunConfig {
                space,
                model_full: full,
                model_ref: reference,
                eps,
                external_potential: Potential::from_vec(base.iter().map(|w| w * scale).collect()),
                x0,
                residual_tol: self.run.residual_tol,
                max_iter: self.run.max_iter,
                grid_h: self.run.grid_h,
                gap_tol: self.run.gap_tol,
                seed: self.run.seed,
                damping: self.run.damping,
            },
            backend: self.run.backend,
            potential_scale: scale,
        })
    }

    /// Cartesian product of the swept values, sorted by `(p, eps, U, scale)`.
    /// Without a sweep section this is the single configured run.
    pub fn cells(&self) -> Result<Vec<CellConfig>, ConfigError> {
        let sweep = self.sweep.clone().unwrap_or_default();
        let ps = sweep.p.unwrap_or_else(|| vec![self.space.p]);
        let epss = sweep.eps.unwrap_or_else(|| vec![self.run.eps]);
        let us = sweep.interaction.unwrap_or_else(|| vec![self.model.interaction]);
        let scales = sweep.potential_scale.unwrap_or_else(|| vec![1.0]);
        let mut keys = Vec::new();
        for p in &ps {
            for eps in &epss {
                for u in &us {
                    for s in &scales {
                        keys.push((*p, *eps, *u, *s));
                    }
                }
            }
        }
        keys.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
                .then(a.3.total_cmp(&b.3))
        });
        keys.dedup();
        keys.into_iter()
            .map(|(p, eps, u, s)| self.cell(p, eps, u, s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "space.p = 2\nmodel.sites = 2\nmodel.particles = 1\nmodel.interaction = 2.0\nrun.eps = 0.1\nrun.external_potential = [0.3, -0.3]\n";

    #[test]
    fn parses_dotted_keys_with_defaults() {
        let c = ExperimentConfig::parse(BASIC).unwrap();
        assert_eq!(c.space.p, 2.0);
        assert_eq!(c.model.topology, Topology::Chain);
        assert_eq!(c.run.max_iter, 500);
        let cells = c.cells().unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].run.model_ref.lambda, 0.0);
        assert_eq!(cells[0].run.model_full.lambda, 1.0);
    }

    #[test]
    fn too_many_particles_names_field_and_line() {
        let src = BASIC.replace("model.particles = 1", "model.particles = 3");
        let err = ExperimentConfig::parse(&src).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.particles"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn unknown_keys_and_bad_types_are_rejected() {
        let err = ExperimentConfig::parse(&format!("{BASIC}run.epsilon = 0.2\n")).unwrap_err();
        assert!(err.to_string().contains("epsilon"));
        let err = ExperimentConfig::parse(&BASIC.replace("0.1", "\"x\"")).unwrap_err();
        assert!(err.to_string().contains("line 5"), "{err}");
    }

    #[test]
    fn sweep_cells_are_sorted_and_nonempty() {
        let src = format!("{BASIC}sweep.eps = [0.5, 0.1, 0.02]\nsweep.p = [3, 2]\n");
        let cells = ExperimentConfig::parse(&src).unwrap().cells().unwrap();
        let keys: Vec<(f64, f64)> = cells.iter().map(|c| (c.run.space.p(), c.run.eps)).collect();
        assert_eq!(
            keys,
            vec![(2.0, 0.02), (2.0, 0.1), (2.0, 0.5), (3.0, 0.02), (3.0, 0.1), (3.0, 0.5)]
        );
        let err = ExperimentConfig::parse(&format!("{BASIC}sweep.eps = []\n")).unwrap_err();
        assert!(err.to_string().contains("sweep.eps"));
    }

    #[test]
    fn hash_depends_on_resolved_cell_only() {
        let a = ExperimentConfig::parse(BASIC).unwrap().cells().unwrap();
        let b = ExperimentConfig::parse(&format!("{BASIC}sweep.eps = [0.1]\n"))
            .unwrap()
            .cells()
            .unwrap();
        assert_eq!(a[0].hash(), b[0].hash());
        let c = ExperimentConfig::parse(&BASIC.replace("0.1", "0.2")).unwrap().cells().unwrap();
        assert_ne!(a[0].hash(), c[0].hash());
    }
}
