//! Spinless fermions on a finite chain or ring: ground-state energy `E(v)`,
//! ground densities, the Lieb functional `F = E^∨` and their regularized forms.
//!
//! The Hamiltonian in the `N`-particle sector is
//! `H(v) = −t Σ_⟨ij⟩ (c†_i c_j + c†_j c_i) + λU Σ_⟨ij⟩ n_i n_j + Σ_k v_k n_k`
//! with nearest-neighbour bonds. Basis states are bitmasks (bit `k` set when
//! site `k` is occupied) and creation operators are ordered by site index.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banach_geometry::{
    inverse_duality_map, pairing, phi_p, power_map, GeometryError, Potential, Quasidensity,
    SpaceSpec,
};
use crate::convex_kernel::{
    check_eps, conjugate_up, AscentOptions, ConcaveOracle, ConvexFunctional, KernelError,
    OracleEval, ProxResult, SearchBox,
};

pub const DEFAULT_GAP_TOL: f64 = 1e-8;
pub const DEFAULT_SEARCH_HALF_WIDTH: f64 = 20.0;
const MAX_SITES: usize = 24;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("{particles} particles do not fit on {sites} sites")]
    TooManyParticles { particles: usize, sites: usize },
    #[error("lattice needs at least one site (at most {MAX_SITES})")]
    InvalidSites,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Chain,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeModel {
    pub sites: usize,
    pub particles: usize,
    pub hopping: f64,
    pub interaction: f64,
    /// Interaction scale: 0 for the reference system, 1 for the full one.
    pub lambda: f64,
    pub topology: Topology,
}

impl LatticeModel {
    pub fn validate(&self) -> Result<(), LatticeError> {
        if self.sites == 0 || self.sites > MAX_SITES {
            return Err(LatticeError::InvalidSites);
        }
        if self.particles > self.sites {
            return Err(LatticeError::TooManyParticles {
                particles: self.particles,
                sites: self.sites,
            });
        }
        if !(self.hopping >= 0.0 && self.hopping.is_finite()) {
            return Err(LatticeError::InvalidParameter(format!(
                "hopping must be finite and nonnegative, got {}",
                self.hopping
            )));
        }
        if !self.interaction.is_finite() {
            return Err(LatticeError::InvalidParameter("interaction must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LatticeError::InvalidParameter(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    /// Dimension `binomial(M, N)` of the particle-number sector.
    pub fn sector_dimension(&self) -> usize {
        let (m, n) = (self.sites, self.particles.min(self.sites));
        (0..n).fold(1usize, |acc, i| acc * (m - i) / (i + 1))
    }

    /// Nearest-neighbour bonds `(i, j)` with `i < j` for the chain, plus the
    /// closing bond `(0, M−1)` for rings of more than two sites.
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let m = self.sites;
        let mut bonds: Vec<(usize, usize)> = (0..m.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        if self.topology == Topology::Ring && m > 2 {
            bonds.push((0, m - 1));
        }
        bonds
    }

    pub fn physical_set(&self) -> PhysicalDensitySet {
        PhysicalDensitySet {
            sites: self.sites,
            particles: self.particles,
        }
    }
}

/// `{ρ : 0 ≤ ρ_k ≤ 1, Σ_k ρ_k = N}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalDensitySet {
    pub sites: usize,
    pub particles: usize,
}

impl PhysicalDensitySet {
    pub fn is_nonempty(&self) -> bool {
        self.particles <= self.sites
    }

    pub fn contains(&self, rho: &Quasidensity, tol: f64) -> bool {
        rho.len() == self.sites
            && rho.0.iter().all(|r| *r >= -tol && *r <= 1.0 + tol)
            && (rho.0.iter().sum::<f64>() - self.particles as f64).abs() <= tol.max(1e-10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundState {
    pub energy: f64,
    pub density: Quasidensity,
    /// Second-lowest minus lowest eigenvalue (`+∞` for a one-state sector).
    pub gap: f64,
    pub degenerate: bool,
}

/// A model together with its occupation-number basis and the `v`-independent
/// part of the Hamiltonian.
#[derive(Debug, Clone)]
pub struct LatticeSystem {
    model: LatticeModel,
    states: Vec<u32>,
    /// `occupations[(s, k)] = n_k` in basis state `s`.
    occupations: DMatrix<f64>,
    base: DMatrix<f64>,
    gap_tol: f64,
}

struct Spectrum {
    energy: f64,
    gap: f64,
    degenerate: bool,
    density: DVector<f64>,
    response: Option<DMatrix<f64>>,
}

impl LatticeSystem {
    pub fn new(model: LatticeModel, gap_tol: f64) -> Result<Self, LatticeError> {
        model.validate()?;
        if !(gap_tol >= 0.0 && gap_tol.is_finite()) {
            return Err(LatticeError::InvalidParameter(format!("gap_tol {gap_tol}")));
        }
        let m = model.sites;
        let states: Vec<u32> = (0u32..(1u32 << m))
            .filter(|s| s.count_ones() as usize == model.particles)
            .collect();
        let d = states.len();
        let occupations =
            DMatrix::from_fn(d, m, |s, k| if states[s] >> k & 1 == 1 { 1.0 } else { 0.0 });
        let index = |state: u32| states.binary_search(&state).expect("state in sector");
        let mut base = DMatrix::zeros(d, d);
        let bonds = model.bonds();
        for (s, &state) in states.iter().enumerate() {
            for &(i, j) in &bonds {
                let ni = state >> i & 1;
                let nj = state >> j & 1;
                base[(s, s)] += model.lambda * model.interaction * (ni * nj) as f64;
                if model.hopping == 0.0 || ni == nj {
                    continue;
                }
                // c†_a c_b moves the particle from b to a; the sign counts
                // occupied sites strictly between the two
                let (a, b) = if ni == 1 { (j, i) } else { (i, j) };
                let (lo, hi) = (a.min(b), a.max(b));
                let between = (state >> (lo + 1)) & ((1u32 << (hi - lo - 1)) - 1);
                let sign = if between.count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
                let target = index(state ^ (1 << a) ^ (1 << b));
                base[(target, s)] += -model.hopping * sign;
            }
        }
        Ok(Self {
            model,
            states,
            occupations,
            base,
            gap_tol,
        })
    }

    pub fn model(&self) -> &LatticeModel {
        &self.model
    }

    pub fn dimension(&self) -> usize {
        self.states.len()
    }

    pub fn gap_tol(&self) -> f64 {
        self.gap_tol
    }

    fn check_potential(&self, v: &Potential) -> Result<(), LatticeError> {
        if v.len() != self.model.sites {
            return Err(GeometryError::DimensionMismatch {
                expected: self.model.sites,
                actual: v.len(),
            }
            .into());
        }
        Ok(())
    }

    pub fn hamiltonian(&self, v: &Potential) -> Result<DMatrix<f64>, LatticeError> {
        self.check_potential(v)?;
        let mut h = self.base.clone();
        let diag = &self.occupations * &v.0;
        for s in 0..h.nrows() {
            h[(s, s)] += diag[s];
        }
        Ok(h)
    }

    fn spectrum(&self, v: &Potential, with_response: bool) -> Result<Spectrum, LatticeError> {
        let h = self.hamiltonian(v)?;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
        let e0 = eig.eigenvalues[order[0]];
        let gap = if order.len() > 1 {
            eig.eigenvalues[order[1]] - e0
        } else {
            f64::INFINITY
        };
        let ground: Vec<usize> = order
            .iter()
            .copied()
            .take_while(|i| eig.eigenvalues[*i] - e0 < self.gap_tol.max(0.0) || *i == order[0])
            .collect();
        let weight = 1.0 / ground.len() as f64;
        let m = self.model.sites;
        let mut density = DVector::zeros(m);
        for &g in &ground {
            let c = eig.eigenvectors.column(g);
            let probs = c.map(|a| a * a);
            density += self.occupations.transpose() * probs * weight;
        }
        let response = with_response.then(|| {
            let mut chi = DMatrix::zeros(m, m);
            for &g in &ground {
                let c0 = eig.eigenvectors.column(g);
                for &n in &order[ground.len()..] {
                    let cn = eig.eigenvectors.column(n);
                    let w = self.occupations.transpose() * cn.component_mul(&c0);
                    let denom = e0 - eig.eigenvalues[n];
                    chi += &w * w.transpose() * (2.0 * weight / denom);
                }
            }
            chi
        });
        Ok(Spectrum {
            energy: e0,
            gap,
            degenerate: gap < self.gap_tol,
            density,
            response,
        })
    }

    pub fn ground_state(&self, v: &Potential) -> Result<GroundState, LatticeError> {
        let s = self.spectrum(v, false)?;
        Ok(GroundState {
            energy: s.energy,
            density: Quasidensity(s.density),
            gap: s.gap,
            degenerate: s.degenerate,
        })
    }

    pub fn energy(&self, v: &Potential) -> Result<f64, LatticeError> {
        Ok(self.spectrum(v, false)?.energy)
    }

    /// Density response `∂ρ_k/∂v_l`, the Hessian of `E` (negative semidefinite).
    pub fn density_response(&self, v: &Potential) -> Result<DMatrix<f64>, LatticeError> {
        Ok(self.spectrum(v, true)?.response.expect("requested"))
    }

    /// `E(v) − ε′ φ_{p*}(v)` with `ε′ = ε^{p*−1}`.
    pub fn regularized_energy(
        &self,
        space: &SpaceSpec,
        eps: f64,
        v: &Potential,
    ) -> Result<f64, LatticeError> {
        Ok(self.energy(v)? - space.dual_weight(eps) * phi_p(v.as_slice(), space.p_star()))
    }

    /// `ρ(v) − ε′ J_p^{-1}(v)`, the selected element of `∂̄E_ε(v)`.
    pub fn regularized_ground_density(
        &self,
        space: &SpaceSpec,
        eps: f64,
        v: &Potential,
    ) -> Result<(Quasidensity, bool), LatticeError> {
        let gs = self.ground_state(v)?;
        let shift = inverse_duality_map(v, space.p());
        Ok((
            &gs.density - &(&shift * space.dual_weight(eps)),
            gs.degenerate,
        ))
    }

    /// `F(ρ) = sup_v { E(v) − ⟨v, ρ⟩ }` over `search_box`; `+∞` off the physical set.
    pub fn lieb_functional(
        &self,
        rho: &Quasidensity,
        search_box: &SearchBox,
        options: &AscentOptions,
    ) -> Result<LiebValue, LatticeError> {
        if rho.len() != self.model.sites {
            return Err(GeometryError::DimensionMismatch {
                expected: self.model.sites,
                actual: rho.len(),
            }
            .into());
        }
        if !self.model.physical_set().contains(rho, 1e-12) {
            return Ok(LiebValue {
                value: f64::INFINITY,
                maximizer: None,
                on_boundary: false,
                residual: f64::NAN,
            });
        }
        let oracle = EnergyOracle { system: self };
        let up = conjugate_up(&oracle, rho, search_box, options).map_err(|e| match e {
            KernelError::Geometry(g) => LatticeError::Geometry(g),
            other => LatticeError::InvalidParameter(other.to_string()),
        })?;
        if up.on_boundary {
            warn!(
                "Lieb maximizer for rho = {rho} is pinned to the search box; \
                 the density may not be v-representable within the box"
            );
        }
        Ok(LiebValue {
            value: up.value,
            maximizer: Some(up.maximizer),
            on_boundary: up.on_boundary,
            residual: up.residual,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiebValue {
    pub value: f64,
    pub maximizer: Option<Potential>,
    pub on_boundary: bool,
    /// `‖ρ(v) − ρ‖_1` at the maximizer.
    pub residual: f64,
}

/// `E` as a concave oracle with supergradient `ρ(v)` and Hessian `χ(v)`.
pub struct EnergyOracle<'a> {
    pub system: &'a LatticeSystem,
}

impl ConcaveOracle for EnergyOracle<'_> {
    fn dim(&self) -> usize {
        self.system.model.sites
    }

    fn evaluate(&self, v: &Potential, derivatives: bool) -> OracleEval {
        match self.system.spectrum(v, derivatives) {
            Ok(s) => OracleEval {
                value: s.energy,
                supergradient: derivatives.then_some(Quasidensity(s.density)),
                hessian: s.response,
            },
            Err(_) => OracleEval {
                value: f64::NEG_INFINITY,
                supergradient: None,
                hessian: None,
            },
        }
    }
}

pub fn build_hamiltonian(model: &LatticeModel, v: &Potential) -> Result<DMatrix<f64>, LatticeError> {
    LatticeSystem::new(model.clone(), DEFAULT_GAP_TOL)?.hamiltonian(v)
}

pub fn ground_state(model: &LatticeModel, v: &Potential) -> Result<GroundState, LatticeError> {
    LatticeSystem::new(model.clone(), DEFAULT_GAP_TOL)?.ground_state(v)
}

pub fn ground_energy(model: &LatticeModel, v: &Potential) -> Result<f64, LatticeError> {
    Ok(ground_state(model, v)?.energy)
}

pub fn lieb_functional(
    model: &LatticeModel,
    rho: &Quasidensity,
    search_box: &SearchBox,
) -> Result<f64, LatticeError> {
    Ok(LatticeSystem::new(model.clone(), DEFAULT_GAP_TOL)?
        .lieb_functional(rho, search_box, &lieb_options())?
        .value)
}

pub fn regularized_energy(
    model: &LatticeModel,
    v: &Potential,
    eps: f64,
    p: f64,
) -> Result<f64, LatticeError> {
    let space = SpaceSpec::new(model.sites, p)?;
    LatticeSystem::new(model.clone(), DEFAULT_GAP_TOL)?.regularized_energy(&space, eps, v)
}

pub fn regularized_ground_density(
    model: &LatticeModel,
    v: &Potential,
    eps: f64,
    p: f64,
) -> Result<(Quasidensity, bool), LatticeError> {
    let space = SpaceSpec::new(model.sites, p)?;
    LatticeSystem::new(model.clone(), DEFAULT_GAP_TOL)?.regularized_ground_density(&space, eps, v)
}

/// Ascent settings used for `F`: Newton steps from `v = 0`, no initial scan.
pub fn lieb_options() -> AscentOptions {
    AscentOptions {
        max_iter: 200,
        tol: 1e-12,
        scan_per_axis: 0,
        ..AscentOptions::default()
    }
}

/// `F^λ` of a lattice model as a [`ConvexFunctional`] on `ℓ^p`.
///
/// Regularization goes through the dual problem
/// `F_ε(x) = sup_v { E(v) − ε′φ_{p*}(v) − ⟨v, x⟩ }`, whose maximizer solves
/// `ρ(v) − ε′ J_{p*}(v) = x`; then `prox = ρ(v)` and `∇F_ε(x) = −v`.
#[derive(Debug, Clone)]
pub struct LiebFunctional {
    system: LatticeSystem,
    space: SpaceSpec,
    search_box: SearchBox,
}

/// Dual Newton iterations stop once `‖ρ(v) − ε′J_{p*}(v) − x‖_∞` is below this
/// (relative to `1 + ‖x‖_∞`).
pub const DUAL_TOL: f64 = 1e-12;

impl LiebFunctional {
    pub fn new(system: LatticeSystem, p: f64) -> Result<Self, LatticeError> {
        let space = SpaceSpec::new(system.model.sites, p)?;
        let search_box = SearchBox::symmetric(system.model.sites, DEFAULT_SEARCH_HALF_WIDTH);
        Ok(Self {
            system,
            space,
            search_box,
        })
    }

    pub fn with_search_box(mut self, search_box: SearchBox) -> Self {
        self.search_box = search_box;
        self
    }

    pub fn system(&self) -> &LatticeSystem {
        &self.system
    }

    /// Solves `ρ(J_p(u)) − ε′u = x` for `u = J_{p*}(v)` by damped Newton.
    fn solve_dual(&self, weight: f64, x: &Quasidensity) -> Result<(Potential, Spectrum), KernelError> {
        let p = self.space.p();
        let m = self.space.dim();
        let residual = |u: &DVector<f64>| -> Result<(DVector<f64>, Spectrum), KernelError> {
            let v = Potential(power_map(u, p));
            let spec = self
                .system
                .spectrum(&v, true)
                .map_err(|e| KernelError::Solver(e.to_string()))?;
            let g = &spec.density - u * weight - &x.0;
            Ok((g, spec))
        };
        let scale = 1.0 + x.0.amax();
        let mut u = DVector::zeros(m);
        let (mut g, mut spec) = residual(&u)?;
        for _ in 0..200 {
            if g.amax() <= DUAL_TOL * scale {
                break;
            }
            let chi = spec.response.as_ref().expect("requested");
            let dv_du = u.map(|c| (p - 1.0) * c.abs().powf(p - 2.0));
            let mut jac = chi * DMatrix::from_diagonal(&dv_du);
            for k in 0..m {
                jac[(k, k)] -= weight;
            }
            let Some(step) = jac.lu().solve(&(-&g)) else {
                return Err(KernelError::Solver("singular dual Jacobian".into()));
            };
            let merit = g.norm_squared();
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &u + &step * alpha;
                let (tg, tspec) = residual(&trial)?;
                if tg.norm_squared() < merit * (1.0 - 1e-4 * alpha) || tg.amax() <= DUAL_TOL * scale
                {
                    u = trial;
                    g = tg;
                    spec = tspec;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if g.amax() > 1e3 * DUAL_TOL * scale {
            return Err(KernelError::Solver(format!(
                "dual equation residual {:.3e} at x = {x}",
                g.amax()
            )));
        }
        Ok((Potential(power_map(&u, p)), spec))
    }
}

impl ConvexFunctional for LiebFunctional {
    fn space(&self) -> SpaceSpec {
        self.space
    }

    fn value(&self, x: &Quasidensity) -> f64 {
        self.system
            .lieb_functional(x, &self.search_box, &lieb_options())
            .map(|l| l.value)
            .unwrap_or(f64::INFINITY)
    }

    fn my_regularize(&self, eps: f64, x: &Quasidensity) -> Result<ProxResult, KernelError> {
        check_eps(eps)?;
        self.space.check_density(x)?;
        let weight = self.space.dual_weight(eps);
        let (v, spec) = self.solve_dual(weight, x)?;
        let value =
            spec.energy - weight * phi_p(v.as_slice(), self.space.p_star()) - pairing(&v, x)?;
        Ok(ProxResult {
            minimizer: Quasidensity(spec.density),
            value,
            gradient: -&v,
            truncated: false,
        })
    }
}
