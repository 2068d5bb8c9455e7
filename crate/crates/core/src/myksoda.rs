//! Moreau–Yosida regularized Kohn–Sham iteration with optimal damping.
//!
//! Each step assembles the Kohn–Sham potential from the regularized full and
//! reference functionals, selects a regularized reference ground density, and
//! moves towards it by the step length at which the energy along the segment
//! touches the tangent bowl centred at the shifted proximal point `p_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banach_geometry::{
    bregman_power, duality_map, inverse_duality_map, norm_p, pairing, phi_p, Potential, Quasidensity, SpaceSpec,
    XuEstimate,
};
use crate::convex_kernel::{ConvexFunctional, GridFunctional, KernelError};
use crate::lattice_system::{LatticeError, LatticeModel, LatticeSystem, LiebFunctional};

/// Smallest admissible distance between `x_i` and the reference density.
pub const STALL_TOL: f64 = 1e-14;
/// Absolute slack in the descent and sandwich inequalities.
pub const DESCENT_SLACK: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MyksodaError {
    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("step {step}: reference density coincides with the iterate while the residual is {residual:.3e}")]
    Stall {
        step: usize,
        residual: f64,
        trace: Box<IterationTrace>,
    },
    #[error("step {step}: direction is not a descent direction (g(0) = {g0:.3e})")]
    NotDescent {
        step: usize,
        g0: f64,
        trace: Box<IterationTrace>,
    },
    #[error("step {step}: root finder gave tau = {tau:.17e}, Hilbert closed form {closed:.17e}")]
    ClosedFormMismatch { step: usize, tau: f64, closed: f64 },
}

impl MyksodaError {
    /// Steps completed before the failure, when available.
    pub fn partial_trace(&self) -> Option<&IterationTrace> {
        match self {
            MyksodaError::Stall { trace, .. } | MyksodaError::NotDescent { trace, .. } => {
                Some(trace)
            }
            _ => None,
        }
    }
}

/// Tangent bowl minimized along the search direction in the damping step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingRule {
    /// `F¹(prox) + ⟨w*, ·⟩ + ‖· − prox‖^p/(pε)`: an upper bound of
    /// `F¹_ε + ⟨w*, ·⟩` touching it at `x_i`, for every `p`.
    #[default]
    Majorant,
    /// `‖· − p_i‖^p/(pε)` centred at the shifted point [`prox_center`]. Equal
    /// to the majorant for `p = 2`; not an upper bound otherwise.
    ShiftedCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub space: SpaceSpec,
    pub model_full: LatticeModel,
    pub model_ref: LatticeModel,
    pub eps: f64,
    pub external_potential: Potential,
    /// Initial guess; defaults to the regularized reference ground density at `w*`.
    pub x0: Option<Quasidensity>,
    pub residual_tol: f64,
    pub max_iter: usize,
    /// Grid resolution for tabulated functionals.
    pub grid_h: f64,
    pub gap_tol: f64,
    pub seed: u64,
    pub damping: DampingRule,
}

fn invalid(field: &str, reason: impl Into<String>) -> MyksodaError {
    MyksodaError::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), MyksodaError> {
        self.model_full
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        self.model_ref
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        if self.model_full.sites != self.model_ref.sites
            || self.model_full.particles != self.model_ref.particles
        {
            return Err(invalid(
                "model",
                "full and reference systems must share sites and particles",
            ));
        }
        if self.space.dim() != self.model_full.sites {
            return Err(invalid("space", "dimension differs from the number of sites"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid("run.eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.residual_tol > 0.0 && self.residual_tol.is_finite()) {
            return Err(invalid(
                "run.residual_tol",
                format!("must be positive, got {}", self.residual_tol),
            ));
        }
        if self.external_potential.len() != self.space.dim() || !self.external_potential.is_finite()
        {
            return Err(invalid(
                "run.external_potential",
                format!("needs {} finite entries", self.space.dim()),
            ));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != self.space.dim() || !x0.is_finite() {
                return Err(invalid("run.x0", format!("needs {} finite entries", self.space.dim())));
            }
        }
        if !(self.grid_h > 0.0 && self.grid_h <= 0.5) {
            return Err(invalid("run.grid_h", format!("must lie in (0, 0.5], got {}", self.grid_h)));
        }
        if !(self.gap_tol >= 0.0 && self.gap_tol.is_finite()) {
            return Err(invalid("run.gap_tol", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// One completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    /// `x_i`
    pub x: Quasidensity,
    /// `x*_{i+1}`
    pub potential: Potential,
    /// `x'_{i+1}`
    pub reference_density: Quasidensity,
    /// `y_i`, unit vector in `ℓ^p`
    pub direction: Quasidensity,
    pub tau: f64,
    /// `e_i = F¹_ε(x_i) + ⟨w*, x_i⟩`
    pub energy: f64,
    /// `m_i`, minimum of the tangent bowl on the section through `x_{i+1}`
    pub section_min: f64,
    /// `r_i = ‖∇F¹_ε(x_i) + w*‖_{p*}`
    pub residual: f64,
    /// `p_i = x_i − ε′ J_p^{-1}(∇F¹_ε(x_i) + w*)`
    pub prox_center: Quasidensity,
    /// Centre `c` of the bowl minimized in the damping step (`p_i` for the
    /// shifted-centre rule, `prox(x_i)` for the majorant).
    pub bowl_center: Quasidensity,
    /// Linear part `ε⟨w*, y_i⟩` of the bowl slope (0 for the shifted-centre rule).
    pub bowl_offset: f64,
    /// `⟨∇F¹_ε(x_i) + w*, y_i⟩`
    pub slope: f64,
    /// `−⟨∇F¹_ε(x_i) + w*, x'_{i+1} − x_i⟩ / (ε′ r_i^{p*})`
    pub monotonicity_ratio: f64,
    /// `|⟨J_p(x_{i+1} − c), y_i⟩ + offset|`, zero at the bowl minimum
    pub orthogonality: f64,
    /// `e_i − m_i`, see [`section_drop`]
    pub energy_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub steps: Vec<StepRecord>,
    /// Last iterate (`z` when converged).
    pub z: Quasidensity,
    /// Last Kohn–Sham potential (`z*` when converged).
    pub z_star: Potential,
    /// `F¹_ε(z) + ⟨w*, z⟩`
    pub final_energy: f64,
    pub final_residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `∇F_ε(x)`; fails when the proximal point hits an artificial tabulation edge.
pub fn grad_f_eps<F: ConvexFunctional + ?Sized>(
    f: &F,
    eps: f64,
    x: &Quasidensity,
) -> Result<Potential, KernelError> {
    let r = f.my_regularize(eps, x)?;
    if r.truncated {
        return Err(KernelError::ProxOnBoundary(r.minimizer));
    }
    Ok(r.gradient)
}

/// `x*_{i+1} = w* + ∇F¹_ε(x_i) − ∇F⁰_ε(x_i)`.
pub fn ks_potential_step<F1, F0>(
    x: &Quasidensity,
    ws: &Potential,
    full: &F1,
    reference: &F0,
    eps: f64,
) -> Result<Potential, KernelError>
where
    F1: ConvexFunctional + ?Sized,
    F0: ConvexFunctional + ?Sized,
{
    let g1 = grad_f_eps(full, eps, x)?;
    let g0 = grad_f_eps(reference, eps, x)?;
    Ok(&(ws + &g1) - &g0)
}

/// Selected element of `∂̄E⁰_ε(x*)` and the degeneracy flag.
pub fn reference_density_step(
    reference: &LatticeSystem,
    space: &SpaceSpec,
    eps: f64,
    xs: &Potential,
) -> Result<(Quasidensity, bool), LatticeError> {
    reference.regularized_ground_density(space, eps, xs)
}

/// Shifted proximal point `p_i = x − ε′ J_p^{-1}(∇F¹_ε(x) + w*)`.
pub fn prox_center(
    space: &SpaceSpec,
    eps: f64,
    x: &Quasidensity,
    shifted_gradient: &Potential,
) -> Quasidensity {
    x - &(&inverse_duality_map(shifted_gradient, space.p()) * space.dual_weight(eps))
}

/// `g(τ) = ⟨J_p(x + τy − c), y⟩`.
pub fn damping_slope(x: &Quasidensity, y: &Quasidensity, center: &Quasidensity, p: f64, tau: f64) -> f64 {
    let arg = &(x + &(y * tau)) - center;
    duality_map(&arg, p).0.dot(&y.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DampingError {
    /// `g(0) ≥ 0`: `y` does not point downhill from `x`.
    NotDescent(f64),
}

/// Unique positive root of the increasing function [`damping_slope`], by
/// doubling from `‖x − c‖_p` and bisection to machine precision.
pub fn damping_step(
    x: &Quasidensity,
    y: &Quasidensity,
    center: &Quasidensity,
    p: f64,
) -> Result<f64, DampingError> {
    damping_step_offset(x, y, center, p, 0.0)
}

/// Unique positive root of `τ ↦ damping_slope(τ) + offset`. With
/// `offset = ε⟨w*, y⟩` and `c = prox(x)` this minimizes the majorant bowl.
pub fn damping_step_offset(
    x: &Quasidensity,
    y: &Quasidensity,
    center: &Quasidensity,
    p: f64,
    offset: f64,
) -> Result<f64, DampingError> {
    let g = |tau: f64| damping_slope(x, y, center, p, tau) + offset;
    let g0 = g(0.0);
    if g0 >= 0.0 {
        return Err(DampingError::NotDescent(g0));
    }
    let mut lo = 0.0;
    let mut hi = norm_p((x - center).as_slice(), p).max(f64::MIN_POSITIVE);
    let mut doublings = 0;
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 2000 {
            break;
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return Ok(mid);
        }
        if gm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if g(lo).abs() <= g(hi).abs() { lo } else { hi })
}

/// Decrease `B(0) − B(τ)` of a damping bowl with `B′(τ) = 0`, where
/// `B′(u) = ε^{-1}(⟨J_p(a + u y), y⟩ + offset)` and `a = x − c`.
///
/// Integrating by parts gives `ε^{-1} Σ_k D(a_k, a_k + τ y_k)` (divergence at
/// `a_k` from base `a_k + τ y_k`) with the
/// Bregman divergence of `|·|^p/p`, a sum of nonnegative terms that avoids
/// differencing two nearly equal bowl values.
pub fn section_drop(a: &Quasidensity, y: &Quasidensity, tau: f64, p: f64, eps: f64) -> f64 {
    let total: f64 = a
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&ak, &yk)| bregman_power(ak + tau * yk, -tau * yk, p))
        .sum();
    total / eps
}

/// Runs the iteration with `F¹`, `F⁰` given as functionals and the reference
/// density selection by exact diagonalization.
pub fn run_with<F1, F0>(
    config: &RunConfig,
    full: &F1,
    reference_functional: &F0,
    reference: &LatticeSystem,
) -> Result<IterationTrace, MyksodaError>
where
    F1: ConvexFunctional + ?Sized,
    F0: ConvexFunctional + ?Sized,
{
    config.validate()?;
    let space = config.space;
    let (p, eps) = (space.p(), config.eps);
    let weight = space.dual_weight(eps);
    let ws = &config.external_potential;
    let mut x = match &config.x0 {
        Some(x0) => x0.clone(),
        None => reference_density_step(reference, &space, eps, ws)?.0,
    };
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut i = 0usize;
    loop {
        let r1 = full.my_regularize(eps, &x)?;
        if r1.truncated {
            return Err(KernelError::ProxOnBoundary(r1.minimizer).into());
        }
        let g0 = grad_f_eps(reference_functional, eps, &x)?;
        let energy = r1.value + pairing(ws, &x).map_err(KernelError::from)?;
        let shifted = ws + &r1.gradient;
        let potential = &shifted - &g0;
        let residual = space.dual_norm(&shifted);
        let finish = |steps: Vec<StepRecord>, converged: bool| IterationTrace {
            iterations: steps.len(),
            steps,
            z: x.clone(),
            z_star: potential.clone(),
            final_energy: energy,
            final_residual: residual,
            converged,
        };
        if residual <= config.residual_tol {
            return Ok(finish(steps, true));
        }
        if i >= config.max_iter {
            return Ok(finish(steps, false));
        }

        let (reference_density, _) = reference_density_step(reference, &space, eps, &potential)?;
        let diff = &reference_density - &x;
        let dist = space.norm(&diff);
        if dist < STALL_TOL {
            return Err(MyksodaError::Stall {
                step: i,
                residual,
                trace: Box::new(finish(steps, false)),
            });
        }
        let direction = &diff * (1.0 / dist);
        let slope = pairing(&shifted, &direction).map_err(KernelError::from)?;
        let monotonicity_ratio = -pairing(&shifted, &diff).map_err(KernelError::from)?
            / (weight * residual.powf(space.p_star()));

        let shifted_point = prox_center(&space, eps, &x, &shifted);
        let (center, offset) = match config.damping {
            DampingRule::Majorant => (
                r1.minimizer.clone(),
                eps * pairing(ws, &direction).map_err(KernelError::from)?,
            ),
            DampingRule::ShiftedCenter => (shifted_point.clone(), 0.0),
        };
        let tau = match damping_step_offset(&x, &direction, &center, p, offset) {
            Ok(t) => t,
            Err(DampingError::NotDescent(g0)) => {
                return Err(MyksodaError::NotDescent {
                    step: i,
                    g0,
                    trace: Box::new(finish(steps, false)),
                })
            }
        };
        if p == 2.0 {
            let closed = -eps * slope;
            if (tau - closed).abs() > 1e-10 * (1.0 + closed.abs()) {
                return Err(MyksodaError::ClosedFormMismatch {
                    step: i,
                    tau,
                    closed,
                });
            }
        }
        let next = &x + &(&direction * tau);
        let energy_drop = section_drop(&(&x - &center), &direction, tau, p, eps);
        let orthogonality = (damping_slope(&x, &direction, &center, p, tau) + offset).abs();
        steps.push(StepRecord {
            index: i,
            x: x.clone(),
            potential,
            reference_density,
            direction,
            tau,
            energy,
            section_min: energy - energy_drop,
            residual,
            prox_center: shifted_point,
            bowl_center: center,
            bowl_offset: offset,
            slope,
            monotonicity_ratio,
            orthogonality,
            energy_drop,
        });
        x = next;
        i += 1;
    }
}

/// Runs the iteration with exact (dual-solver) functionals for both systems.
pub fn run(config: &RunConfig) -> Result<IterationTrace, MyksodaError> {
    config.validate()?;
    let full = LiebFunctional::new(
        LatticeSystem::new(config.model_full.clone(), config.gap_tol)?,
        config.space.p(),
    )?;
    let reference_system = LatticeSystem::new(config.model_ref.clone(), config.gap_tol)?;
    let reference = LiebFunctional::new(reference_system.clone(), config.space.p())?;
    run_with(config, &full, &reference, &reference_system)
}

/// Physical density `z + ε′J_p^{-1}(w*)` and energy `E¹_ε(w*) + ε′φ_{p*}(w*)`.
pub fn deregularize(
    space: &SpaceSpec,
    eps: f64,
    z: &Quasidensity,
    ws: &Potential,
    regularized_energy: f64,
) -> (Quasidensity, f64) {
    let weight = space.dual_weight(eps);
    let density = z + &(&inverse_duality_map(ws, space.p()) * weight);
    let energy = regularized_energy + weight * phi_p(ws.as_slice(), space.p_star());
    (density, energy)
}

/// Per-run verdict on the descent inequalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub steps: usize,
    /// Steps violating `e_{i+1} ≤ m_i < e_i`.
    pub descent_violations: Vec<usize>,
    /// Steps violating `ξ̂τ^p/(pε) ≤ e_i − m_i ≤ ξ̂′τ^p/(pε)`.
    pub sandwich_violations: Vec<usize>,
    /// Steps with `‖x_{i+1} − p_i‖ ≥ ‖x_i − p_i‖`. Guaranteed by the
    /// shifted-centre bowl, hence by either rule at `p = 2`; diagnostic otherwise.
    pub approach_violations: Vec<usize>,
    /// Steps failing the orthogonality certificate.
    pub orthogonality_violations: Vec<usize>,
    /// Range of `(e_i − m_i)·pε/τ^p` over the steps.
    pub xu_ratio_range: (f64, f64),
    /// Smallest observed strong-monotonicity ratio.
    pub min_monotonicity_ratio: f64,
}

impl DescentReport {
    pub fn descent_ok(&self) -> bool {
        self.descent_violations.is_empty()
    }

    pub fn sandwich_ok(&self) -> bool {
        self.sandwich_violations.is_empty()
    }
}

pub fn check_descent(
    trace: &IterationTrace,
    space: &SpaceSpec,
    eps: f64,
    xu: &XuEstimate,
) -> DescentReport {
    let p = space.p();
    let mut report = DescentReport {
        steps: trace.steps.len(),
        descent_violations: Vec::new(),
        sandwich_violations: Vec::new(),
        approach_violations: Vec::new(),
        orthogonality_violations: Vec::new(),
        xu_ratio_range: (f64::INFINITY, f64::NEG_INFINITY),
        min_monotonicity_ratio: f64::INFINITY,
    };
    for (k, step) in trace.steps.iter().enumerate() {
        let next_energy = trace
            .steps
            .get(k + 1)
            .map_or(trace.final_energy, |s| s.energy);
        if next_energy > step.section_min + DESCENT_SLACK || step.energy_drop <= 0.0 {
            report.descent_violations.push(step.index);
        }
        let unit = step.tau.powf(p) / (p * eps);
        if step.energy_drop < xu.xi * unit - DESCENT_SLACK
            || step.energy_drop > xu.xi_prime * unit + DESCENT_SLACK
        {
            report.sandwich_violations.push(step.index);
        }
        let next = &step.x + &(&step.direction * step.tau);
        if space.norm(&(&next - &step.prox_center)) >= space.norm(&(&step.x - &step.prox_center)) {
            report.approach_violations.push(step.index);
        }
        let arm = space.norm(&(&next - &step.bowl_center)).powf(p - 1.0);
        if step.orthogonality > 1e-10 * (1.0 + arm) {
            report.orthogonality_violations.push(step.index);
        }
        let ratio = step.energy_drop / unit;
        report.xu_ratio_range.0 = report.xu_ratio_range.0.min(ratio);
        report.xu_ratio_range.1 = report.xu_ratio_range.1.max(ratio);
        report.min_monotonicity_ratio = report.min_monotonicity_ratio.min(step.monotonicity_ratio);
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub iterates: Vec<Quasidensity>,
    /// `F(x_i) + ⟨w*, x_i⟩`
    pub values: Vec<f64>,
    /// Values never increased (beyond `1e-10`).
    pub monotone: bool,
}

/// Proximal-point iteration `x_{i+1} = prox_{εf}(x_i)` for `f = F + ⟨w*, ·⟩`.
pub fn proximal_point_baseline(
    f: &GridFunctional,
    ws: &Potential,
    eps: f64,
    x0: &Quasidensity,
    iters: usize,
) -> Result<BaselineTrace, KernelError> {
    let shifted = f.shifted(ws)?;
    let mut x = x0.clone();
    let mut iterates = vec![x.clone()];
    let mut values = vec![shifted.eval(&x)];
    for _ in 0..iters {
        x = shifted.my_regularize(eps, &x)?.minimizer;
        values.push(shifted.eval(&x));
        iterates.push(x.clone());
    }
    let monotone = values.windows(2).all(|w| w[1] <= w[0] + 1e-10);
    Ok(BaselineTrace {
        iterates,
        values,
        monotone,
    })
}
