//! Extended-real convex functionals on `X`, conjugates in the DFT sign
//! convention, pMY regularization and the proximal mapping.
//!
//! Conjugates follow `f^∧(x*) = inf_x { f(x) + ⟨x*,x⟩ }` and
//! `g^∨(x) = sup_{x*} { g(x*) − ⟨x*,x⟩ }`. The regularization of `f` is
//! `f_ε(x) = inf_y { f(y) + ε⁻¹ φ_p(x − y) }`.
//!
//! Tabulated functionals ([`GridFunctional`]) are the brute-force backend: every
//! identity below can be checked on them by direct grid scan and pattern-search
//! refinement. Functionals with an exact dual representation implement
//! [`ConvexFunctional`] directly (see `lattice_system::LiebFunctional`).

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banach_geometry::{
    duality_map, inverse_duality_map, pairing, phi_p, GeometryError, Potential, Quasidensity,
    SpaceSpec,
};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("functional has an empty effective domain")]
    EmptyDomain,
    #[error("regularization parameter must be positive, got {0}")]
    InvalidEps(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-convex functional: refined minimizer {distance:.3e} away from the best grid node (cell size {h})")]
    NonConvex { distance: f64, h: f64 },
    #[error("proximal point {0} lies on the tabulation boundary; enlarge the region")]
    ProxOnBoundary(Quasidensity),
    #[error("monotonicity violated for pair {index}: <x*-y*, x-y> = {value:.6e}")]
    MonotonicityViolated { index: usize, value: f64 },
    #[error("dual solver failed: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Output of the proximal mapping at a point `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    /// `prox_{εf}(x)`
    pub minimizer: Quasidensity,
    /// `f_ε(x)`
    pub value: f64,
    /// `∇f_ε(x) = ε⁻¹ J_p(x − prox_{εf}(x))`
    pub gradient: Potential,
    /// Minimizer sits on an artificial tabulation boundary.
    pub truncated: bool,
}

impl ProxResult {
    pub fn from_minimizer(
        space: &SpaceSpec,
        eps: f64,
        x: &Quasidensity,
        minimizer: Quasidensity,
        f_at_minimizer: f64,
        truncated: bool,
    ) -> Self {
        let shift = x - &minimizer;
        let value = f_at_minimizer + phi_p(shift.as_slice(), space.p()) / eps;
        let gradient = &duality_map(&shift, space.p()) * (1.0 / eps);
        Self {
            minimizer,
            value,
            gradient,
            truncated,
        }
    }
}

/// A proper convex functional that can be evaluated and regularized.
pub trait ConvexFunctional: Sync {
    fn space(&self) -> SpaceSpec;

    /// `f(x)`, `+∞` outside the effective domain.
    fn value(&self, x: &Quasidensity) -> f64;

    /// Proximal point, `f_ε(x)` and `∇f_ε(x)`.
    fn my_regularize(&self, eps: f64, x: &Quasidensity) -> Result<ProxResult, KernelError>;
}

pub(crate) fn check_eps(eps: f64) -> Result<(), KernelError> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidEps(eps))
    }
}

/// Effective domain of a tabulated functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    /// Axis-aligned box `lo ≤ x ≤ hi`. Its faces are tabulation limits.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `{x : lo ≤ x_k ≤ hi, Σ_k x_k = total}`, parametrized by the first `M−1`
    /// coordinates. Its faces are part of the functional's true domain.
    Slice { total: f64, lo: f64, hi: f64 },
}

impl Domain {
    /// Physical densities of `particles` spinless fermions on `sites` sites.
    pub fn physical(particles: usize) -> Self {
        Domain::Slice {
            total: particles as f64,
            lo: 0.0,
            hi: 1.0,
        }
    }
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = values
            .iter()
            .map(|v| if v.is_finite() { Some(*v) } else { None })
            .collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect())
    }
}

const SLICE_TOL: f64 = 1e-9;
const SNAP: f64 = 1e-12;

/// Convex functional tabulated on a regular grid and evaluated by multilinear
/// interpolation; `+∞` off the domain and in cells touching an infinite node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunctional {
    label: String,
    space: SpaceSpec,
    domain: Domain,
    h: f64,
    origin: Vec<f64>,
    counts: Vec<usize>,
    #[serde(with = "inf_as_null")]
    values: Vec<f64>,
}

/// Result of a grid scan plus refinement.
#[derive(Debug, Clone)]
pub struct GridMinimum {
    pub point: Quasidensity,
    pub value: f64,
    /// Best scanned node and its objective value.
    pub node: Quasidensity,
    pub node_value: f64,
    /// Refined point lies on a face of the grid domain.
    pub on_boundary: bool,
    /// `∞`-distance in parameter space between refined point and best node.
    pub node_distance: f64,
}

impl GridFunctional {
    /// Tabulates `f` on every grid node of `domain` (parallel, deterministic).
    pub fn tabulate<F>(
        space: SpaceSpec,
        domain: Domain,
        h: f64,
        label: impl Into<String>,
        f: F,
    ) -> Result<Self, KernelError>
    where
        F: Fn(&Quasidensity) -> f64 + Sync,
    {
        let mut grid = Self::empty(space, domain, h, label.into())?;
        let total: usize = grid.counts.iter().product();
        let values: Vec<f64> = (0..total)
            .into_par_iter()
            .map(|i| match grid.node_point(i) {
                Some(x) => {
                    let v = f(&x);
                    if v.is_nan() {
                        f64::INFINITY
                    } else {
                        v
                    }
                }
                None => f64::INFINITY,
            })
            .collect();
        if values.iter().all(|v| !v.is_finite()) {
            return Err(KernelError::EmptyDomain);
        }
        grid.values = values;
        Ok(grid)
    }

    fn empty(space: SpaceSpec, domain: Domain, h: f64, label: String) -> Result<Self, KernelError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(KernelError::InvalidGrid(format!("resolution {h}")));
        }
        let axis = |lo: f64, hi: f64| -> Result<usize, KernelError> {
            if hi < lo {
                return Err(KernelError::InvalidGrid(format!("empty range [{lo}, {hi}]")));
            }
            let cells = (hi - lo) / h;
            let n = cells.round();
            if (cells - n).abs() > 1e-6 {
                return Err(KernelError::InvalidGrid(format!(
                    "resolution {h} does not divide [{lo}, {hi}]"
                )));
            }
            Ok(n as usize + 1)
        };
        let (origin, counts) = match &domain {
            Domain::Box { lo, hi } => {
                if lo.len() != space.dim() || hi.len() != space.dim() {
                    return Err(KernelError::InvalidGrid("box bounds do not match dim".into()));
                }
                let counts = lo
                    .iter()
                    .zip(hi)
                    .map(|(l, u)| axis(*l, *u))
                    .collect::<Result<Vec<_>, _>>()?;
                (lo.clone(), counts)
            }
            Domain::Slice { lo, hi, .. } => {
                if space.dim() < 2 {
                    return Err(KernelError::InvalidGrid("slice needs dim >= 2".into()));
                }
                let n = axis(*lo, *hi)?;
                (vec![*lo; space.dim() - 1], vec![n; space.dim() - 1])
            }
        };
        Ok(Self {
            label,
            space,
            domain,
            h,
            origin,
            counts,
            values: Vec::new(),
        })
    }

    /// Functional built from explicit node values (row-major, last axis fastest).
    pub fn from_values(
        space: SpaceSpec,
        domain: Domain,
        h: f64,
        label: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self, KernelError> {
        let mut grid = Self::empty(space, domain, h, label.into())?;
        let total: usize = grid.counts.iter().product();
        if values.len() != total {
            return Err(KernelError::InvalidGrid(format!(
                "expected {total} values, got {}",
                values.len()
            )));
        }
        grid.values = values;
        Ok(grid)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn resolution(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Rebinds the exponent used by the regularization; the values are kept.
    pub fn with_space(mut self, space: SpaceSpec) -> Result<Self, KernelError> {
        space.check_density(&Quasidensity::zeros(self.space.dim()))?;
        self.space = space;
        Ok(self)
    }

    fn param_dim(&self) -> usize {
        self.counts.len()
    }

    fn node_params(&self, mut index: usize) -> Vec<f64> {
        let d = self.param_dim();
        let mut t = vec![0.0; d];
        for a in (0..d).rev() {
            let i = index % self.counts[a];
            index /= self.counts[a];
            t[a] = self.origin[a] + i as f64 * self.h;
        }
        t
    }

    fn point_from_params(&self, t: &[f64]) -> Quasidensity {
        match &self.domain {
            Domain::Box { .. } => Quasidensity::from_slice(t),
            Domain::Slice { total, .. } => {
                let mut v = t.to_vec();
                v.push(total - t.iter().sum::<f64>());
                Quasidensity::from_vec(v)
            }
        }
    }

    fn params_from_point(&self, x: &Quasidensity) -> Option<Vec<f64>> {
        match &self.domain {
            Domain::Box { .. } => Some(x.to_vec()),
            Domain::Slice { total, .. } => {
                let s: f64 = x.0.iter().sum();
                if (s - total).abs() > SLICE_TOL * (1.0 + total.abs()) {
                    return None;
                }
                Some(x.as_slice()[..x.len() - 1].to_vec())
            }
        }
    }

    /// Node position, or `None` when the node lies outside a slice domain.
    pub fn node_point(&self, index: usize) -> Option<Quasidensity> {
        let t = self.node_params(index);
        let x = self.point_from_params(&t);
        if let Domain::Slice { lo, hi, .. } = &self.domain {
            let last = x.0[x.len() - 1];
            if last < lo - SLICE_TOL || last > hi + SLICE_TOL {
                return None;
            }
        }
        Some(x)
    }

    /// Finite nodes with their values.
    pub fn finite_nodes(&self) -> impl Iterator<Item = (usize, Quasidensity, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .filter_map(move |(i, v)| self.node_point(i).map(|x| (i, x, *v)))
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.counts)
            .fold(0, |acc, (i, n)| acc * n + i)
    }

    fn eval_params(&self, t: &[f64]) -> f64 {
        let d = self.param_dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let n = self.counts[a];
            let u = (t[a] - self.origin[a]) / self.h;
            let max = (n - 1) as f64;
            if u < -SNAP * (1.0 + max) || u > max * (1.0 + SNAP) + SNAP {
                return f64::INFINITY;
            }
            let u = u.clamp(0.0, max);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let mut i = u.floor() as usize;
            if i >= n - 1 {
                i = n - 2;
            }
            let mut fr = u - i as f64;
            if fr < SNAP {
                fr = 0.0;
            } else if fr > 1.0 - SNAP {
                fr = 1.0;
            }
            base[a] = i;
            frac[a] = fr;
        }
        let mut acc = 0.0;
        let mut idx = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                let up = (corner >> a) & 1 == 1;
                if up && self.counts[a] == 1 {
                    w = 0.0;
                    break;
                }
                w *= if up { frac[a] } else { 1.0 - frac[a] };
                idx[a] = base[a] + up as usize;
            }
            if w == 0.0 {
                continue;
            }
            let v = self.values[self.flat_index(&idx)];
            if !v.is_finite() {
                return f64::INFINITY;
            }
            acc += w * v;
        }
        acc
    }

    /// Multilinear interpolation of the node values.
    pub fn eval(&self, x: &Quasidensity) -> f64 {
        if x.len() != self.space.dim() {
            return f64::INFINITY;
        }
        match self.params_from_point(x) {
            Some(t) => self.eval_params(&t),
            None => f64::INFINITY,
        }
    }

    fn search_directions(&self) -> Vec<Vec<f64>> {
        let d = self.param_dim();
        let mut dirs = Vec::new();
        for a in 0..d {
            let mut e = vec![0.0; d];
            e[a] = 1.0;
            dirs.push(e);
        }
        for a in 0..d {
            for b in (a + 1)..d {
                for s in [1.0, -1.0] {
                    let mut e = vec![0.0; d];
                    e[a] = 1.0;
                    e[b] = s;
                    dirs.push(e);
                }
            }
        }
        dirs
    }

    fn on_face(&self, t: &[f64]) -> bool {
        let tol = 1e-9 * self.h;
        let axis_face = t.iter().enumerate().any(|(a, v)| {
            let hi = self.origin[a] + (self.counts[a] - 1) as f64 * self.h;
            *v <= self.origin[a] + tol || *v >= hi - tol
        });
        match &self.domain {
            Domain::Box { .. } => axis_face,
            Domain::Slice { total, lo, hi } => {
                let last = total - t.iter().sum::<f64>();
                axis_face || last <= lo + tol || last >= hi - tol
            }
        }
    }

    /// Minimizes `y ↦ f(y) + penalty(y)` over the domain: exhaustive node scan,
    /// then pattern search with halving steps on the interpolant.
    pub fn minimize<P>(&self, penalty: P) -> Result<GridMinimum, KernelError>
    where
        P: Fn(&Quasidensity) -> f64,
    {
        let mut best: Option<(Vec<f64>, f64)> = None;
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let t = self.node_params(i);
            let total = v + penalty(&self.point_from_params(&t));
            if best.as_ref().is_none_or(|(_, b)| total < *b) {
                best = Some((t, total));
            }
        }
        let (node, node_value) = best.ok_or(KernelError::EmptyDomain)?;
        let objective = |t: &[f64]| {
            let f = self.eval_params(t);
            if f.is_finite() {
                f + penalty(&self.point_from_params(t))
            } else {
                f64::INFINITY
            }
        };
        let dirs = self.search_directions();
        let mut t = node.clone();
        let mut val = node_value;
        let mut step = self.h;
        let floor = self.h * 1e-10;
        let mut evals = 0usize;
        while step > floor && evals < 200_000 {
            let mut improved = false;
            for dir in &dirs {
                for sign in [1.0, -1.0] {
                    let trial: Vec<f64> = t
                        .iter()
                        .zip(dir)
                        .map(|(a, b)| a + sign * step * b)
                        .collect();
                    let tv = objective(&trial);
                    evals += 1;
                    if tv < val {
                        t = trial;
                        val = tv;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        let node_distance = t
            .iter()
            .zip(&node)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        Ok(GridMinimum {
            point: self.point_from_params(&t),
            value: val,
            node: self.point_from_params(&node),
            node_value,
            on_boundary: self.on_face(&t),
            node_distance,
        })
    }

    /// Smallest node value and its position.
    pub fn min_node(&self) -> Result<(Quasidensity, f64), KernelError> {
        self.finite_nodes()
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(_, x, v)| (x, v))
            .ok_or(KernelError::EmptyDomain)
    }

    /// `f + ⟨ws, ·⟩`, exact on the interpolant since multilinear interpolation
    /// reproduces affine functions.
    pub fn shifted(&self, ws: &Potential) -> Result<Self, KernelError> {
        self.space.check_potential(ws)?;
        let mut out = self.clone();
        for i in 0..out.values.len() {
            if out.values[i].is_finite() {
                if let Some(x) = self.node_point(i) {
                    out.values[i] += pairing(ws, &x)?;
                }
            }
        }
        out.label = format!("{}+w", self.label);
        Ok(out)
    }

    /// Largest midpoint-convexity defect `f(m) − (f(a)+f(b))/2` over node
    /// triples `a = m − k·d`, `b = m + k·d` for every search direction `d` and
    /// strides `k = 1..=max_stride`.
    pub fn convexity_defect(&self, max_stride: usize) -> f64 {
        let d = self.param_dim();
        let dirs: Vec<Vec<i64>> = self
            .search_directions()
            .into_iter()
            .map(|v| v.into_iter().map(|c| c as i64).collect())
            .collect();
        let total = self.values.len();
        (0..total)
            .into_par_iter()
            .map(|i| {
                let fm = self.values[i];
                if !fm.is_finite() {
                    return f64::NEG_INFINITY;
                }
                let mut idx = vec![0i64; d];
                let mut rem = i;
                for a in (0..d).rev() {
                    idx[a] = (rem % self.counts[a]) as i64;
                    rem /= self.counts[a];
                }
                let mut worst = f64::NEG_INFINITY;
                for dir in &dirs {
                    for k in 1..=max_stride as i64 {
                        let lo: Vec<i64> = idx.iter().zip(dir).map(|(a, b)| a - k * b).collect();
                        let hi: Vec<i64> = idx.iter().zip(dir).map(|(a, b)| a + k * b).collect();
                        let inside = |v: &[i64]| {
                            v.iter()
                                .zip(&self.counts)
                                .all(|(c, n)| *c >= 0 && (*c as usize) < *n)
                        };
                        if !inside(&lo) || !inside(&hi) {
                            break;
                        }
                        let to_us = |v: &[i64]| v.iter().map(|c| *c as usize).collect::<Vec<_>>();
                        let fa = self.values[self.flat_index(&to_us(&lo))];
                        let fb = self.values[self.flat_index(&to_us(&hi))];
                        if fa.is_finite() && fb.is_finite() {
                            worst = worst.max(fm - 0.5 * (fa + fb));
                        }
                    }
                }
                worst
            })
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), KernelError> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, KernelError> {
        let grid: Self = serde_json::from_reader(r)?;
        let total: usize = grid.counts.iter().product();
        if grid.values.len() != total {
            return Err(KernelError::InvalidGrid("value count does not match shape".into()));
        }
        Ok(grid)
    }
}

impl ConvexFunctional for GridFunctional {
    fn space(&self) -> SpaceSpec {
        self.space
    }

    fn value(&self, x: &Quasidensity) -> f64 {
        self.eval(x)
    }

    fn my_regularize(&self, eps: f64, x: &Quasidensity) -> Result<ProxResult, KernelError> {
        my_regularize(self, eps, x)
    }
}

/// pMY regularization of a tabulated functional at `x`.
pub fn my_regularize(
    f: &GridFunctional,
    eps: f64,
    x: &Quasidensity,
) -> Result<ProxResult, KernelError> {
    check_eps(eps)?;
    f.space.check_density(x)?;
    let p = f.space.p();
    let min = f.minimize(|y| phi_p((x - y).as_slice(), p) / eps)?;
    let allowed = f.h * f.param_dim().max(1) as f64 * (1.0 + 1e-9);
    if min.node_distance > allowed {
        return Err(KernelError::NonConvex {
            distance: min.node_distance,
            h: f.h,
        });
    }
    let truncated = min.on_boundary && matches!(f.domain, Domain::Box { .. });
    let f_min = f.eval(&min.point);
    Ok(ProxResult::from_minimizer(
        &f.space, eps, x, min.point, f_min, truncated,
    ))
}

/// `f^∧(x*) = inf_x { f(x) + ⟨x*, x⟩ }` over the tabulated domain.
pub fn conjugate_down(f: &GridFunctional, xs: &Potential) -> Result<(f64, Quasidensity), KernelError> {
    f.space.check_potential(xs)?;
    let min = f.minimize(|y| xs.0.dot(&y.0))?;
    Ok((min.value, min.point))
}

/// Values, supergradients and curvature of a concave functional on `X*`.
pub struct OracleEval {
    pub value: f64,
    pub supergradient: Option<Quasidensity>,
    /// Hessian (negative semidefinite) where the functional is smooth.
    pub hessian: Option<DMatrix<f64>>,
}

pub trait ConcaveOracle: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, v: &Potential, derivatives: bool) -> OracleEval;
}

/// Value-only oracle backed by a closure.
pub struct FnOracle<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Potential) -> f64 + Sync> FnOracle<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&Potential) -> f64 + Sync> ConcaveOracle for FnOracle<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, v: &Potential, _derivatives: bool) -> OracleEval {
        OracleEval {
            value: (self.f)(v),
            supergradient: None,
            hessian: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SearchBox {
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    fn clamp(&self, v: &Potential) -> Potential {
        Potential::from_vec(
            v.0.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .map(|(x, (l, u))| x.clamp(*l, *u))
                .collect(),
        )
    }

    fn at_lower(&self, v: &Potential, k: usize) -> bool {
        v.0[k] <= self.lo[k] + 1e-12 * (self.hi[k] - self.lo[k])
    }

    fn at_upper(&self, v: &Potential, k: usize) -> bool {
        v.0[k] >= self.hi[k] - 1e-12 * (self.hi[k] - self.lo[k])
    }

    fn width(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .fold(0.0_f64, |m, (l, u)| m.max(u - l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentStrategy {
    /// Supergradient direction preconditioned by the curvature (damped Newton).
    Newton,
    /// Supergradient steps of length `1/(k+10)` with iterate averaging.
    Diminishing,
    /// Derivative-free pattern search.
    Pattern,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentOptions {
    pub strategy: AscentStrategy,
    pub max_iter: usize,
    /// Stop once `‖∂̄g(v) − x‖_1` falls below this.
    pub tol: f64,
    /// Nodes per axis of the initial scan (0 disables the scan).
    pub scan_per_axis: usize,
    pub start: Option<Potential>,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            strategy: AscentStrategy::Newton,
            max_iter: 500,
            tol: 1e-12,
            scan_per_axis: 5,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateUp {
    pub value: f64,
    pub maximizer: Potential,
    /// Maximizer is pinned to the search box: the box is too small.
    pub on_boundary: bool,
    pub iterations: usize,
    /// `‖∂̄g(v) − x‖_1` at the maximizer (NaN without supergradients).
    pub residual: f64,
}

/// `g^∨(x) = sup_{x* ∈ box} { g(x*) − ⟨x*, x⟩ }`.
pub fn conjugate_up<G: ConcaveOracle + ?Sized>(
    g: &G,
    x: &Quasidensity,
    search_box: &SearchBox,
    options: &AscentOptions,
) -> Result<ConjugateUp, KernelError> {
    let dim = g.dim();
    if x.len() != dim || search_box.lo.len() != dim || search_box.hi.len() != dim {
        return Err(GeometryError::DimensionMismatch {
            expected: dim,
            actual: x.len(),
        }
        .into());
    }
    let objective = |v: &Potential, d: bool| -> (f64, OracleEval) {
        let ev = g.evaluate(v, d);
        (ev.value - v.0.dot(&x.0), ev)
    };

    let mut start = search_box.clamp(
        &options
            .start
            .clone()
            .unwrap_or_else(|| Potential::zeros(dim)),
    );
    if options.scan_per_axis >= 2 {
        let n = options.scan_per_axis;
        let mut best = (objective(&start, false).0, start.clone());
        let total = n.pow(dim as u32);
        for i in 0..total {
            let mut rem = i;
            let v: Vec<f64> = (0..dim)
                .map(|k| {
                    let j = rem % n;
                    rem /= n;
                    search_box.lo[k] + (search_box.hi[k] - search_box.lo[k]) * j as f64 / (n - 1) as f64
                })
                .collect();
            let v = Potential::from_vec(v);
            let val = objective(&v, false).0;
            let tie = (val - best.0).abs() <= 1e-12 * (1.0 + best.0.abs());
            if val > best.0 && !tie || tie && v.0.norm() < best.1 .0.norm() {
                best = (val, v);
            }
        }
        start = best.1;
    }

    let probe = g.evaluate(&start, true);
    let strategy = match options.strategy {
        AscentStrategy::Newton if probe.supergradient.is_some() && probe.hessian.is_some() => {
            AscentStrategy::Newton
        }
        AscentStrategy::Newton | AscentStrategy::Diminishing if probe.supergradient.is_some() => {
            AscentStrategy::Diminishing
        }
        _ => AscentStrategy::Pattern,
    };

    let projected_residual = |v: &Potential, grad: &Quasidensity| -> f64 {
        grad.0
            .iter()
            .enumerate()
            .map(|(k, gk)| {
                if search_box.at_upper(v, k) && *gk > 0.0 || search_box.at_lower(v, k) && *gk < 0.0
                {
                    0.0
                } else {
                    gk.abs()
                }
            })
            .sum()
    };
    let outward = |v: &Potential, grad: &Quasidensity, tol: f64| -> bool {
        grad.0.iter().enumerate().any(|(k, gk)| {
            search_box.at_upper(v, k) && *gk > tol || search_box.at_lower(v, k) && *gk < -tol
        })
    };

    match strategy {
        AscentStrategy::Newton => {
            let mut v = start;
            let (mut obj, mut ev) = objective(&v, true);
            let mut mu = 1e-10;
            let mut iterations = 0;
            let mut residual = f64::INFINITY;
            for it in 0..options.max_iter {
                iterations = it;
                let grad = Quasidensity(&ev.supergradient.clone().expect("smooth oracle").0 - &x.0);
                residual = projected_residual(&v, &grad);
                if residual <= options.tol {
                    break;
                }
                let hess = match &ev.hessian {
                    Some(h) => h.clone(),
                    None => DMatrix::zeros(dim, dim),
                };
                let scale = 1.0 + hess.amax();
                let mut accepted = false;
                while mu <= 1e12 * scale {
                    let mut a = -&hess;
                    for k in 0..dim {
                        a[(k, k)] += mu;
                    }
                    let mut rhs = grad.0.clone();
                    // freeze coordinates pinned to the box with outward pull
                    for k in 0..dim {
                        let pinned = search_box.at_upper(&v, k) && rhs[k] > 0.0
                            || search_box.at_lower(&v, k) && rhs[k] < 0.0;
                        if pinned {
                            for j in 0..dim {
                                a[(k, j)] = 0.0;
                                a[(j, k)] = 0.0;
                            }
                            a[(k, k)] = 1.0;
                            rhs[k] = 0.0;
                        }
                    }
                    let Some(step) = a.clone().cholesky().map(|c| c.solve(&rhs)) else {
                        mu *= 10.0;
                        continue;
                    };
                    let trial = search_box.clamp(&Potential(&v.0 + &step));
                    let (tobj, tev) = objective(&trial, true);
                    if tobj >= obj - 1e-14 * (1.0 + obj.abs()) {
                        let moved = (&trial.0 - &v.0).amax();
                        v = trial;
                        obj = tobj;
                        ev = tev;
                        mu = (mu * 0.1).max(1e-14);
                        accepted = moved > 0.0;
                        break;
                    }
                    mu *= 10.0;
                }
                if !accepted {
                    break;
                }
            }
            let grad = Quasidensity(&ev.supergradient.expect("smooth oracle").0 - &x.0);
            residual = residual.min(projected_residual(&v, &grad));
            Ok(ConjugateUp {
                value: obj,
                on_boundary: outward(&v, &grad, options.tol.max(1e-9)),
                maximizer: v,
                iterations,
                residual,
            })
        }
        AscentStrategy::Diminishing => {
            let mut v = start;
            let mut sum = Potential::zeros(dim);
            let mut best: Option<(f64, Potential, Quasidensity)> = None;
            let mut iterations = 0;
            for k in 0..options.max_iter {
                iterations = k + 1;
                let (obj, ev) = objective(&v, true);
                let grad = Quasidensity(&ev.supergradient.expect("supergradient").0 - &x.0);
                if best.as_ref().is_none_or(|b| obj > b.0) {
                    best = Some((obj, v.clone(), grad.clone()));
                }
                if projected_residual(&v, &grad) <= options.tol {
                    break;
                }
                let alpha = 1.0 / (k as f64 + 10.0);
                v = search_box.clamp(&Potential(&v.0 + &grad.0 * alpha));
                sum = &sum + &v;
            }
            let avg = &sum * (1.0 / iterations.max(1) as f64);
            let (avg_obj, avg_ev) = objective(&avg, true);
            let (obj, v, grad) = match best {
                Some(b) if b.0 >= avg_obj => b,
                _ => {
                    let grad = Quasidensity(&avg_ev.supergradient.expect("supergradient").0 - &x.0);
                    (avg_obj, avg, grad)
                }
            };
            Ok(ConjugateUp {
                value: obj,
                on_boundary: outward(&v, &grad, options.tol.max(1e-9)),
                residual: projected_residual(&v, &grad),
                maximizer: v,
                iterations,
            })
        }
        AscentStrategy::Pattern => {
            let mut v = start;
            let mut obj = objective(&v, false).0;
            let mut step = search_box.width() / 8.0;
            let floor = 1e-12 * search_box.width().max(1.0);
            let mut iterations = 0;
            while step > floor && iterations < options.max_iter.max(10_000) {
                iterations += 1;
                let mut improved = false;
                for k in 0..dim {
                    for sign in [1.0, -1.0] {
                        let mut trial = v.clone();
                        trial.0[k] += sign * step;
                        let trial = search_box.clamp(&trial);
                        let tv = objective(&trial, false).0;
                        if tv > obj {
                            v = trial;
                            obj = tv;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
            // boundary test by probing one step outward from pinned coordinates
            let probe_step = 1e-6 * search_box.width().max(1.0);
            let on_boundary = (0..dim).any(|k| {
                let pinned_hi = search_box.at_upper(&v, k);
                let pinned_lo = search_box.at_lower(&v, k);
                if !(pinned_hi || pinned_lo) {
                    return false;
                }
                let mut inner = v.clone();
                inner.0[k] += if pinned_hi { -probe_step } else { probe_step };
                objective(&inner, false).0 < obj - 1e-12 * (1.0 + obj.abs())
            });
            Ok(ConjugateUp {
                value: obj,
                maximizer: v,
                on_boundary,
                iterations,
                residual: f64::NAN,
            })
        }
    }
}

/// Minimizes `x ↦ f_ε(x) + ⟨xs, x⟩` over all of `X` by pattern search.
///
/// Returns the minimizer and the minimum, i.e. a point of `∂̄(f_ε)^∧(xs)` and the
/// value `(f_ε)^∧(xs)`.
pub fn minimize_regularized<F: ConvexFunctional + ?Sized>(
    f: &F,
    eps: f64,
    xs: &Potential,
    start: &Quasidensity,
    initial_step: f64,
) -> Result<(Quasidensity, f64), KernelError> {
    check_eps(eps)?;
    let space = f.space();
    space.check_potential(xs)?;
    let dim = space.dim();
    let objective = |x: &Quasidensity| -> Result<f64, KernelError> {
        Ok(f.my_regularize(eps, x)?.value + xs.0.dot(&x.0))
    };
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for a in 0..dim {
        let mut e = vec![0.0; dim];
        e[a] = 1.0;
        dirs.push(e);
        for b in (a + 1)..dim {
            for s in [1.0, -1.0] {
                let mut e = vec![0.0; dim];
                e[a] = 1.0;
                e[b] = s;
                dirs.push(e);
            }
        }
    }
    let mut x = start.clone();
    let mut val = objective(&x)?;
    let mut step = initial_step;
    let floor = 1e-11 * (1.0 + initial_step);
    let mut evals = 0usize;
    while step > floor && evals < 100_000 {
        let mut improved = false;
        for dir in &dirs {
            for sign in [1.0, -1.0] {
                let mut trial = x.clone();
                for (t, d) in trial.0.iter_mut().zip(dir.iter()) {
                    *t += sign * step * d;
                }
                let tv = objective(&trial)?;
                evals += 1;
                if tv < val {
                    x = trial;
                    val = tv;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((x, val))
}

/// Outcome of a strong-monotonicity scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// `inf −⟨x*−y*, x−y⟩ / (ε′ ‖x*−y*‖^{p*})` with `ε′ = ε^{p*−1}`.
    pub zeta_hat: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
    /// Largest value of `⟨x*−y*, x−y⟩` observed (must be ≤ 0).
    pub worst_pairing: f64,
}

/// Checks `⟨x*−y*, x−y⟩ ≤ −ε′ζ‖x*−y*‖^{p*}` over sampled potential pairs, where
/// `superdifferential(x*)` returns an element of `∂̄(f_ε)^∧(x*)`.
pub fn check_strong_monotonicity<S>(
    space: &SpaceSpec,
    eps: f64,
    pairs: &[(Potential, Potential)],
    tol: f64,
    superdifferential: S,
) -> Result<MonotonicityReport, KernelError>
where
    S: Fn(&Potential) -> Result<Quasidensity, KernelError> + Sync,
{
    check_eps(eps)?;
    let weight = space.dual_weight(eps);
    let results: Vec<Result<Option<(f64, f64)>, KernelError>> = pairs
        .par_iter()
        .map(|(a, b)| {
            let diff = a - b;
            let dn = space.dual_norm(&diff);
            if dn == 0.0 {
                return Ok(None);
            }
            let xa = superdifferential(a)?;
            let xb = superdifferential(b)?;
            let pair = pairing(&diff, &(&xa - &xb))?;
            Ok(Some((pair, -pair / (weight * dn.powf(space.p_star())))))
        })
        .collect();
    let mut report = MonotonicityReport {
        zeta_hat: f64::INFINITY,
        pairs_used: 0,
        pairs_skipped: 0,
        worst_pairing: f64::NEG_INFINITY,
    };
    for (index, r) in results.into_iter().enumerate() {
        match r? {
            None => report.pairs_skipped += 1,
            Some((pair, ratio)) => {
                if pair > tol {
                    return Err(KernelError::MonotonicityViolated { index, value: pair });
                }
                report.pairs_used += 1;
                report.worst_pairing = report.worst_pairing.max(pair);
                report.zeta_hat = report.zeta_hat.min(ratio);
            }
        }
    }
    Ok(report)
}

/// Element of `∂̄(f_ε)^∧(xs)` for a tabulated `f`, as the minimizer of `f_ε + xs`.
pub fn grid_superdifferential(
    f: &GridFunctional,
    eps: f64,
    xs: &Potential,
) -> Result<Quasidensity, KernelError> {
    let (_, start) = conjugate_down(f, xs)?;
    let (x, _) = minimize_regularized(f, eps, xs, &start, 0.25)?;
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MyShiftReport {
    pub minimizer: Quasidensity,
    pub regularized_minimizer: Quasidensity,
    /// `‖x − (x_ε + ε′ J_p^{-1}(w*))‖_∞`
    pub translation_residual: f64,
    /// `|f_ε(x_ε) + ⟨w*,x_ε⟩ − f(x) − ⟨w*,x⟩ + ε′ φ_{p*}(w*)|`
    pub offset_residual: f64,
    /// Unregularized minimizer sits on the domain boundary.
    pub inconclusive: bool,
}

/// Compares the minimizers and minima of `f + ws` and `f_ε + ws` directly.
pub fn check_my_shift(
    f: &GridFunctional,
    eps: f64,
    ws: &Potential,
) -> Result<MyShiftReport, KernelError> {
    check_eps(eps)?;
    let space = f.space;
    let min = f.minimize(|y| ws.0.dot(&y.0))?;
    let (x_eps, reg_value) = minimize_regularized(f, eps, ws, &min.point, 0.25)?;
    let weight = space.dual_weight(eps);
    let predicted = &x_eps + &(&inverse_duality_map(ws, space.p()) * weight);
    let offset = reg_value - (min.value - weight * phi_p(ws.as_slice(), space.p_star()));
    Ok(MyShiftReport {
        translation_residual: predicted.max_abs_diff(&min.point),
        offset_residual: offset.abs(),
        inconclusive: min.on_boundary,
        minimizer: min.point,
        regularized_minimizer: x_eps,
    })
}

/// `|(f_ε)^∧(x*) − f^∧(x*) + ε′ φ_{p*}(x*)|` with both conjugates computed by
/// direct minimization.
pub fn conjugate_decomposition_residual(
    f: &GridFunctional,
    eps: f64,
    xs: &Potential,
) -> Result<f64, KernelError> {
    let space = f.space;
    let (down, start) = conjugate_down(f, xs)?;
    let (_, reg) = minimize_regularized(f, eps, xs, &start, 0.25)?;
    let predicted = down - space.dual_weight(eps) * phi_p(xs.as_slice(), space.p_star());
    Ok((reg - predicted).abs())
}

/// Grid tolerance for identity checks: `max(1e-6, 10 h²)`.
pub fn identity_tolerance(h: f64) -> f64 {
    (10.0 * h * h).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(h: f64, lo: f64, hi: f64, f: impl Fn(f64) -> f64 + Sync) -> GridFunctional {
        let space = SpaceSpec::new(1, 2.0).unwrap();
        GridFunctional::tabulate(
            space,
            Domain::Box {
                lo: vec![lo],
                hi: vec![hi],
            },
            h,
            "line",
            |x| f(x.0[0]),
        )
        .unwrap()
    }

    fn q(v: &[f64]) -> Quasidensity {
        Quasidensity::from_slice(v)
    }

    fn pot(v: &[f64]) -> Potential {
        Potential::from_slice(v)
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        let space = SpaceSpec::new(2, 2.0).unwrap();
        let f = GridFunctional::tabulate(
            space,
            Domain::Box {
                lo: vec![-1.0, -1.0],
                hi: vec![1.0, 1.0],
            },
            0.25,
            "affine",
            |x| 0.5 + 2.0 * x.0[0] - 3.0 * x.0[1],
        )
        .unwrap();
        let x = q(&[0.123, -0.777]);
        assert!((f.eval(&x) - (0.5 + 0.246 + 2.331)).abs() < 1e-13);
        assert_eq!(f.eval(&q(&[1.5, 0.0])), f64::INFINITY);
    }

    #[test]
    fn slice_domain_rejects_off_slice_points() {
        let space = SpaceSpec::new(2, 2.0).unwrap();
        let f = GridFunctional::tabulate(space, Domain::physical(1), 0.1, "s", |x| x.0[0] * x.0[0])
            .unwrap();
        assert_eq!(f.node_count(), 11);
        assert!((f.eval(&q(&[0.25, 0.75])) - 0.065).abs() < 1e-12);
        assert_eq!(f.eval(&q(&[0.25, 0.70])), f64::INFINITY);
        assert_eq!(f.eval(&q(&[1.2, -0.2])), f64::INFINITY);
    }

    #[test]
    fn conjugate_down_of_indicator() {
        let space = SpaceSpec::new(2, 2.0).unwrap();
        let a = [0.3, -0.4];
        let f = GridFunctional::tabulate(
            space,
            Domain::Box {
                lo: a.to_vec(),
                hi: a.to_vec(),
            },
            0.1,
            "indicator",
            |_| 0.0,
        )
        .unwrap();
        let (v, _) = conjugate_down(&f, &pot(&[2.0, 1.0])).unwrap();
        assert!((v - 0.2).abs() < 1e-14);
    }

    #[test]
    fn conjugate_down_of_phi2_matches_closed_form() {
        // φ_2^∧(x*) = −‖x*‖²/2; brute-force oracle is the grid scan itself
        let space = SpaceSpec::new(2, 2.0).unwrap();
        let f = GridFunctional::tabulate(
            space,
            Domain::Box {
                lo: vec![-2.0, -2.0],
                hi: vec![2.0, 2.0],
            },
            0.05,
            "phi2",
            |x| phi_p(x.as_slice(), 2.0),
        )
        .unwrap();
        let (v, at) = conjugate_down(&f, &pot(&[1.0, 0.0])).unwrap();
        assert!((v + 0.5).abs() < 1e-12);
        assert!(at.max_abs_diff(&q(&[-1.0, 0.0])) < 1e-9);
        let (v0, _) = conjugate_down(&f, &pot(&[0.0, 0.0])).unwrap();
        assert!(v0.abs() < 1e-14);
    }

    #[test]
    fn conjugate_down_errors_on_empty_domain() {
        let space = SpaceSpec::new(1, 2.0).unwrap();
        let err = GridFunctional::tabulate(
            space,
            Domain::Box {
                lo: vec![0.0],
                hi: vec![1.0],
            },
            0.5,
            "empty",
            |_| f64::INFINITY,
        );
        assert!(matches!(err, Err(KernelError::EmptyDomain)));
    }

    #[test]
    fn my_regularize_of_indicator() {
        let space = SpaceSpec::new(2, 3.0).unwrap();
        let a = [0.5, 0.25];
        let f = GridFunctional::tabulate(
            space,
            Domain::Box {
                lo: a.to_vec(),
                hi: a.to_vec(),
            },
            0.25,
            "indicator",
            |_| 0.0,
        )
        .unwrap();
        let x = q(&[1.0, -1.0]);
        let r = my_regularize(&f, 0.5, &x).unwrap();
        assert!(r.minimizer.max_abs_diff(&q(&a)) < 1e-15);
        assert!((r.value - phi_p(&[0.5, -1.25], 3.0) / 0.5).abs() < 1e-13);
        assert!(r.truncated);
    }

    #[test]
    fn my_regularize_parabola_closed_form() {
        // f = x²/2, p = 2: prox x/(1+ε), f_ε = x²/(2(1+ε))
        let f = line(0.001, -3.0, 3.0, |x| 0.5 * x * x);
        for (x, eps) in [(1.3, 1.0), (-0.7, 0.1), (2.0, 0.5)] {
            let r = my_regularize(&f, eps, &q(&[x])).unwrap();
            assert!((r.minimizer.0[0] - x / (1.0 + eps)).abs() < 1e-3);
            assert!((r.value - x * x / (2.0 * (1.0 + eps))).abs() < 1e-6);
        }
    }

    #[test]
    fn my_regularize_of_flat_function_is_identity_inside() {
        let f = line(0.01, -1.0, 1.0, |_| 0.0);
        let r = my_regularize(&f, 0.3, &q(&[0.237])).unwrap();
        assert!((r.minimizer.0[0] - 0.237).abs() < 1e-9);
        assert!(r.value.abs() < 1e-15);
        assert!(r.gradient.0.amax() < 1e-8);
    }

    #[test]
    fn nonconvex_function_is_detected() {
        let f = line(0.05, -2.0, 2.0, |x| (x * x - 1.0).powi(2) + 0.3 * x);
        // x chosen so that the proximal objective has two basins
        let res = (0..40)
            .map(|k| -1.0 + 0.05 * k as f64)
            .map(|x| my_regularize(&f, 50.0, &q(&[x])))
            .any(|r| matches!(r, Err(KernelError::NonConvex { .. })));
        assert!(res || f.convexity_defect(2) > 0.0);
        assert!(f.convexity_defect(2) > 0.01);
    }

    #[test]
    fn regularized_is_below_original_on_nodes() {
        let f = line(0.01, -1.0, 2.0, |x| (x - 0.5).abs() + x * x);
        for (_, x, v) in f.finite_nodes() {
            let r = my_regularize(&f, 0.2, &x).unwrap();
            assert!(r.value <= v + 1e-14);
        }
    }

    #[test]
    fn my_shift_on_parabola() {
        // f = x²/2, p = 2, ε = 1, w = 1: argmins −1 and −2, offset 1/2
        let f = line(0.01, -3.0, 3.0, |x| 0.5 * x * x);
        let rep = check_my_shift(&f, 1.0, &pot(&[1.0])).unwrap();
        assert!((rep.minimizer.0[0] + 1.0).abs() < 1e-9);
        assert!((rep.regularized_minimizer.0[0] + 2.0).abs() < 1e-6);
        assert!(rep.translation_residual < 1e-6);
        assert!(rep.offset_residual < 1e-9);
        assert!(!rep.inconclusive);
        let zero = check_my_shift(&f, 1.0, &pot(&[0.0])).unwrap();
        assert!(zero.translation_residual < 1e-6 && zero.offset_residual < 1e-9);
    }

    #[test]
    fn conjugate_up_examples() {
        let c = FnOracle::new(2, |_| 1.75);
        let r = conjugate_up(
            &c,
            &q(&[0.0, 0.0]),
            &SearchBox::symmetric(2, 3.0),
            &AscentOptions::default(),
        )
        .unwrap();
        assert!((r.value - 1.75).abs() < 1e-15);
        assert!(!r.on_boundary);

        let peak = FnOracle::new(2, |v: &Potential| -phi_p(v.as_slice(), 1.5));
        let r = conjugate_up(
            &peak,
            &q(&[0.0, 0.0]),
            &SearchBox::symmetric(2, 3.0),
            &AscentOptions::default(),
        )
        .unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(r.maximizer.0.amax() < 1e-6);

        // constant g with x ≠ 0 runs into the box
        let r = conjugate_up(
            &c,
            &q(&[1.0, 0.0]),
            &SearchBox::symmetric(2, 3.0),
            &AscentOptions::default(),
        )
        .unwrap();
        assert!(r.on_boundary);
    }

    #[test]
    fn biconjugate_recovers_convex_function() {
        let f = line(0.02, -1.0, 1.0, |x| x * x + 0.3 * x);
        let fwd = FnOracle::new(1, |v: &Potential| conjugate_down(&f, v).unwrap().0);
        for x in [-0.5, 0.0, 0.26, 0.7] {
            let r = conjugate_up(
                &fwd,
                &q(&[x]),
                &SearchBox::symmetric(1, 5.0),
                &AscentOptions {
                    scan_per_axis: 41,
                    ..AscentOptions::default()
                },
            )
            .unwrap();
            assert!((r.value - f.eval(&q(&[x]))).abs() < identity_tolerance(0.02), "x = {x}");
        }
    }

    #[test]
    fn conjugate_decomposition_on_parabola() {
        let f = line(0.01, -3.0, 3.0, |x| 0.5 * x * x + 0.1 * x);
        for xs in [-1.0, 0.4, 1.5] {
            let r = conjugate_decomposition_residual(&f, 0.5, &pot(&[xs])).unwrap();
            assert!(r < 1e-9, "{xs}: {r}");
        }
    }

    #[test]
    fn hilbert_strong_monotonicity() {
        let f = line(0.01, -2.0, 2.0, |x| (x - 0.3).abs() + 0.5 * x * x);
        let space = f.space;
        let pairs: Vec<_> = [(-1.0, 0.5), (0.2, 0.9), (1.5, -1.2), (0.3, 0.3)]
            .iter()
            .map(|(a, b)| (pot(&[*a]), pot(&[*b])))
            .collect();
        let rep = check_strong_monotonicity(&space, 0.5, &pairs, 1e-9, |xs| {
            grid_superdifferential(&f, 0.5, xs)
        })
        .unwrap();
        assert_eq!(rep.pairs_skipped, 1);
        assert!(rep.zeta_hat >= 1.0 - 1e-6, "{}", rep.zeta_hat);
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let space = SpaceSpec::new(2, 3.0).unwrap();
        let f = GridFunctional::tabulate(space, Domain::physical(1), 0.01, "rt", |x| {
            (x.0[0] * 1.7).sin() / 3.0
        })
        .unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let g = GridFunctional::read_from(buf.as_slice()).unwrap();
        assert_eq!(f, g);
        let x = q(&[0.4242, 0.5758]);
        assert_eq!(f.eval(&x).to_bits(), g.eval(&x).to_bits());
    }
}
