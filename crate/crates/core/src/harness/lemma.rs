//! Verification suites for the geometric and convex-analytic identities the
//! iteration relies on. Each suite yields one [`LemmaReport`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banach_geometry::{
    duality_map, estimate_xu_constants_with, inverse_duality_map, random_direction,
    xu_gap_with, Potential, Quasidensity, SpaceSpec, XU_SCALE_DECADES,
};
use crate::convex_kernel::{
    check_my_shift, check_strong_monotonicity, conjugate_decomposition_residual, identity_tolerance,
    my_regularize, ConvexFunctional, Domain, GridFunctional, KernelError,
};
use crate::lattice_system::{LatticeModel, LatticeSystem, LiebFunctional};
use crate::myksoda::{check_descent, run, RunConfig};

use super::config::ExperimentConfig;
use super::{tabulated_lieb, HarnessError};

/// Replaceable pieces of the geometry, for negative controls.
#[derive(Clone, Copy)]
pub struct LemmaHooks {
    pub duality: fn(&Quasidensity, f64) -> Potential,
}

impl Default for LemmaHooks {
    fn default() -> Self {
        Self {
            duality: duality_map,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub setting: String,
    pub samples: usize,
    /// Worst residual (or margin) observed.
    pub worst: f64,
    pub tolerance: f64,
    pub xi: Option<f64>,
    pub xi_prime: Option<f64>,
    pub zeta: Option<f64>,
    pub pass: bool,
    /// Failing inputs, verbatim.
    pub failures: Vec<String>,
}

impl LemmaReport {
    fn new(lemma: &str, setting: String, tolerance: f64) -> Self {
        Self {
            lemma: lemma.into(),
            setting,
            samples: 0,
            worst: 0.0,
            tolerance,
            xi: None,
            xi_prime: None,
            zeta: None,
            pass: true,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, residual: f64, describe: impl FnOnce() -> String) {
        self.samples += 1;
        if residual.is_nan() || residual > self.worst {
            self.worst = if residual.is_nan() { f64::INFINITY } else { residual };
        }
        if residual.is_nan() || residual > self.tolerance {
            self.fail(describe());
        }
    }

    fn fail(&mut self, what: String) {
        self.pass = false;
        if self.failures.len() < 5 {
            self.failures.push(what);
        }
    }

    fn error(lemma: &str, setting: String, err: impl std::fmt::Display) -> Self {
        let mut r = Self::new(lemma, setting, 0.0);
        r.fail(format!("error: {err}"));
        r
    }

    /// One-line human-readable form.
    pub fn line(&self) -> String {
        let mut s = format!(
            "{} {} [{}] samples={} worst={:.3e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.lemma,
            self.setting,
            self.samples,
            self.worst,
            self.tolerance
        );
        for (name, v) in [("xi", self.xi), ("xi'", self.xi_prime), ("zeta", self.zeta)] {
            if let Some(v) = v {
                s.push_str(&format!(" {name}={v:.6e}"));
            }
        }
        for f in &self.failures {
            s.push_str(&format!("\n    failing input: {f}"));
        }
        s
    }
}

fn vec_str(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|c| format!("{c:.17e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(lo..hi)).collect()
}

/// Duality-map identities and the norm-gap bracket.
pub fn xu_suite(dim: usize, p: f64, samples: usize, seed: u64, hooks: &LemmaHooks) -> LemmaReport {
    let mut report = LemmaReport::new("xu", format!("M={dim} p={p}"), 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = SpaceSpec::new(dim, p).expect("validated exponent");
    for _ in 0..samples {
        let x = random_direction(dim, &mut rng);
        let scale = 10f64.powf(rng.random_range(-XU_SCALE_DECADES..=XU_SCALE_DECADES));
        let y = &random_direction(dim, &mut rng) * scale;
        let nx = space.norm(&x);
        let ny = space.norm(&y);
        let jx = (hooks.duality)(&x, p);
        let describe = |what: &str, r: f64| {
            format!("{what}: x={} y={} residual={r:.3e}", vec_str(x.as_slice()), vec_str(y.as_slice()))
        };
        // J_p^{-1}(J_p(x)) = x
        let back = inverse_duality_map(&jx, p);
        let r = back.max_abs_diff(&x) / x.0.amax();
        report.record(r, || describe("inverse duality", r));
        // ⟨J_p x, x⟩ = ‖x‖^p and ‖J_p x‖_{p*} = ‖x‖^{p−1}
        let r = (jx.0.dot(&x.0) - nx.powf(p)).abs() / nx.powf(p);
        report.record(r, || describe("pairing with x", r));
        let r = (space.dual_norm(&jx) - nx.powf(p - 1.0)).abs() / nx.powf(p - 1.0);
        report.record(r, || describe("dual norm", r));
        // gap ≥ 0, and = ‖y‖² in the Hilbert case
        let gap = xu_gap_with(&x, &y, p, hooks.duality).expect("equal lengths");
        let magnitude = (nx + ny).powf(p);
        let r = (-gap / magnitude).max(0.0);
        report.record(r, || describe("negative gap", gap));
        if p == 2.0 {
            let r = (gap - ny * ny).abs() / (ny * ny);
            report.record(r, || describe("Hilbert gap", r));
        }
        // second route: plain subtraction, accurate to rounding of the norms
        let direct: f64 = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .zip(jx.as_slice())
            .map(|((a, b), j)| (a + b).abs().powf(p) - a.abs().powf(p) - p * j * b)
            .sum();
        let r = (direct - gap).abs() / magnitude;
        report.record(r, || describe("direct gap", r));
    }
    let est = estimate_xu_constants_with(dim, p, samples, XU_SCALE_DECADES, &mut rng, hooks.duality);
    report.xi = Some(est.xi);
    report.xi_prime = Some(est.xi_prime);
    if p == 2.0 {
        let r = (est.xi - 1.0).abs().max((est.xi_prime - 1.0).abs());
        report.record(r, || format!("Hilbert constants xi={:.17e} xi'={:.17e}", est.xi, est.xi_prime));
    } else if !(est.xi > 0.0 && est.xi_prime.is_finite()) {
        report.fail(format!("constants xi={:e} xi'={:e}", est.xi, est.xi_prime));
    }
    report
}

/// Strong monotonicity of the regularized reference superdifferential.
pub fn monotonicity_suite(
    model: &LatticeModel,
    gap_tol: f64,
    p: f64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> LemmaReport {
    let setting = format!("M={} N={} p={p} eps={eps}", model.sites, model.particles);
    let floor = if p == 2.0 { 1.0 - 1e-9 } else { 0.0 };
    let mut report = LemmaReport::new("strong-monotonicity", setting.clone(), 0.0);
    let system = match LatticeSystem::new(model.clone(), gap_tol) {
        Ok(s) => s,
        Err(e) => return LemmaReport::error("strong-monotonicity", setting, e),
    };
    let space = SpaceSpec::new(model.sites, p).expect("validated exponent");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Potential, Potential)> = (0..samples)
        .map(|_| {
            (
                Potential::from_vec(random_vec(&mut rng, model.sites, -2.0, 2.0)),
                Potential::from_vec(random_vec(&mut rng, model.sites, -2.0, 2.0)),
            )
        })
        .collect();
    let result = check_strong_monotonicity(&space, eps, &pairs, 1e-12, |v| {
        system
            .regularized_ground_density(&space, eps, v)
            .map(|(x, _)| x)
            .map_err(|e| KernelError::Solver(e.to_string()))
    });
    match result {
        Ok(rep) => {
            report.samples = rep.pairs_used;
            report.zeta = Some(rep.zeta_hat);
            report.worst = rep.worst_pairing;
            report.tolerance = 1e-12;
            if !(rep.zeta_hat >= floor && rep.zeta_hat > 0.0) {
                report.fail(format!("zeta_hat={:.17e} below {floor}", rep.zeta_hat));
            }
        }
        Err(e) => report.fail(e.to_string()),
    }
    report
}

/// Tabulated test functionals: a 1D kinked function and the reference Lieb
/// functional on the physical simplex (flagged `true`).
pub fn test_functionals(
    config: &ExperimentConfig,
    p: f64,
    h: f64,
    cache: &std::path::Path,
) -> Result<Vec<(String, GridFunctional, bool)>, HarnessError> {
    let line = GridFunctional::tabulate(
        SpaceSpec::new(1, p)?,
        Domain::Box {
            lo: vec![-3.0],
            hi: vec![3.0],
        },
        h,
        "kinked-line",
        |x| (x.0[0] - 0.2).abs() + 0.5 * x.0[0] * x.0[0],
    )?;
    let mut out = vec![("1D".to_string(), line, false)];
    if config.model.sites <= 3 {
        let model = config.model(config.model.lambda_ref, config.model.interaction);
        let lieb = tabulated_lieb(&model, config.run.gap_tol, h, p, cache)?;
        out.push((format!("F0 M={}", config.model.sites), lieb, true));
    }
    Ok(out)
}

fn sample_potential(rng: &mut ChaCha8Rng, dim: usize) -> Potential {
    Potential::from_vec(random_vec(rng, dim, -0.5, 0.5))
}

pub fn my_shift_suite(label: &str, f: &GridFunctional, eps: f64, samples: usize, seed: u64) -> LemmaReport {
    let h = f.resolution();
    let p = f.space().p();
    let mut report = LemmaReport::new("my-shift", format!("{label} p={p} eps={eps} h={h}"), identity_tolerance(h));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws: Vec<Potential> = (0..samples).map(|_| sample_potential(&mut rng, f.space().dim())).collect();
    let results: Vec<_> = ws.par_iter().map(|w| (w, check_my_shift(f, eps, w))).collect();
    for (w, r) in results {
        match r {
            Ok(rep) if rep.inconclusive => {}
            Ok(rep) => {
                let worst = rep.translation_residual.max(rep.offset_residual);
                report.record(worst, || {
                    format!(
                        "w*={} translation={:.3e} offset={:.3e}",
                        vec_str(w.as_slice()),
                        rep.translation_residual,
                        rep.offset_residual
                    )
                });
            }
            Err(e) => report.fail(format!("w*={}: {e}", vec_str(w.as_slice()))),
        }
    }
    report
}

pub fn conjugate_decomposition_suite(
    label: &str,
    f: &GridFunctional,
    eps: f64,
    samples: usize,
    seed: u64,
) -> LemmaReport {
    let h = f.resolution();
    let p = f.space().p();
    let mut report = LemmaReport::new(
        "conjugate-decomposition",
        format!("{label} p={p} eps={eps} h={h}"),
        identity_tolerance(h),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws: Vec<Potential> = (0..samples).map(|_| sample_potential(&mut rng, f.space().dim())).collect();
    let results: Vec<_> = ws
        .par_iter()
        .map(|w| (w, conjugate_decomposition_residual(f, eps, w)))
        .collect();
    for (w, r) in results {
        match r {
            Ok(res) => report.record(res, || format!("x*={} residual={res:.3e}", vec_str(w.as_slice()))),
            Err(e) => report.fail(format!("x*={}: {e}", vec_str(w.as_slice()))),
        }
    }
    report
}

/// Relative error `‖fd − ∇f_ε‖_∞ / max(‖∇f_ε‖_∞, 1)` of central differences.
pub fn gradient_fd_error<F: ConvexFunctional + ?Sized>(
    f: &F,
    eps: f64,
    x: &Quasidensity,
    delta: f64,
) -> Result<f64, KernelError> {
    let g = f.my_regularize(eps, x)?.gradient;
    let mut worst = 0.0_f64;
    for k in 0..x.len() {
        let mut up = x.clone();
        let mut dn = x.clone();
        up.0[k] += delta;
        dn.0[k] -= delta;
        let fd = (f.my_regularize(eps, &up)?.value - f.my_regularize(eps, &dn)?.value) / (2.0 * delta);
        worst = worst.max((fd - g.0[k]).abs());
    }
    Ok(worst / g.0.amax().max(1.0))
}

pub const FD_DELTA: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

fn sample_point(rng: &mut ChaCha8Rng, f: &GridFunctional) -> Quasidensity {
    match f.domain() {
        Domain::Box { lo, hi } => Quasidensity::from_vec(
            lo.iter()
                .zip(hi)
                .map(|(l, u)| rng.random_range(*l..*u))
                .collect(),
        ),
        Domain::Slice { .. } => Quasidensity::from_vec(random_vec(rng, f.space().dim(), -0.5, 1.5)),
    }
}

pub fn gradient_fd_suite(label: &str, f: &GridFunctional, eps: f64, samples: usize, seed: u64) -> LemmaReport {
    let p = f.space().p();
    let mut report = LemmaReport::new("gradient-fd", format!("{label} p={p} eps={eps}"), FD_TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Quasidensity> = (0..samples).map(|_| sample_point(&mut rng, f)).collect();
    let results: Vec<_> = xs
        .par_iter()
        .map(|x| (x, gradient_fd_error(f, eps, x, FD_DELTA)))
        .collect();
    for (x, r) in results {
        match r {
            Ok(err) => report.record(err, || format!("x={} rel_err={err:.3e}", vec_str(x.as_slice()))),
            Err(e) => report.fail(format!("x={}: {e}", vec_str(x.as_slice()))),
        }
    }
    report
}

/// `f_ε ≤ f` on every node, minimizers are fixed by the prox, and (for the
/// lattice functional) grid and exact regularizations agree in the interior.
pub fn prox_identities_suite(
    label: &str,
    f: &GridFunctional,
    exact: Option<&LiebFunctional>,
    eps: f64,
    samples: usize,
    seed: u64,
) -> LemmaReport {
    let h = f.resolution();
    let p = f.space().p();
    let mut report = LemmaReport::new(
        "prox-identities",
        format!("{label} p={p} eps={eps} h={h}"),
        identity_tolerance(h),
    );
    let nodes: Vec<(Quasidensity, f64)> = f.finite_nodes().map(|(_, x, v)| (x, v)).collect();
    let below: Vec<_> = nodes
        .par_iter()
        .map(|(x, v)| (x, *v, my_regularize(f, eps, x).map(|r| r.value)))
        .collect();
    for (x, v, r) in below {
        match r {
            Ok(fe) => {
                let excess = (fe - v).max(0.0);
                report.record(excess, || format!("node {} f_eps - f = {excess:.3e}", vec_str(x.as_slice())));
            }
            Err(e) => report.fail(format!("node {}: {e}", vec_str(x.as_slice()))),
        }
    }
    match f.minimize(|_| 0.0) {
        Ok(min) => match my_regularize(f, eps, &min.point) {
            Ok(r) => {
                let d = r.minimizer.max_abs_diff(&min.point);
                report.record((d - h).max(0.0), || format!("minimizer moved by {d:.3e}"));
            }
            Err(e) => report.fail(e.to_string()),
        },
        Err(e) => report.fail(e.to_string()),
    }
    if let Some(exact) = exact {
        let system = exact.system();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            // interior densities: ground densities of moderate potentials
            let v = Potential::from_vec(random_vec(&mut rng, f.space().dim(), -1.0, 1.0));
            let rho = match system.ground_state(&v) {
                Ok(gs) => gs.density,
                Err(e) => {
                    report.fail(e.to_string());
                    continue;
                }
            };
            match (my_regularize(f, eps, &rho), exact.my_regularize(eps, &rho)) {
                (Ok(a), Ok(b)) => {
                    let r = (a.value - b.value).abs();
                    report.record(r, || format!("x={} grid-vs-exact {r:.3e}", vec_str(rho.as_slice())));
                }
                (Err(e), _) | (_, Err(e)) => report.fail(e.to_string()),
            }
        }
    }
    report
}

/// Descent inequalities along randomized runs.
pub fn sandwich_suite(
    config: &ExperimentConfig,
    p: f64,
    runs: usize,
    seed: u64,
    hooks: &LemmaHooks,
) -> LemmaReport {
    let m = config.model.sites;
    let setting = format!("M={m} N={} p={p} eps={}", config.model.particles, config.lemma.eps);
    let mut report = LemmaReport::new("sandwich", setting.clone(), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = estimate_xu_constants_with(m, p, 20_000, XU_SCALE_DECADES, &mut rng, hooks.duality);
    report.xi = Some(est.xi);
    report.xi_prime = Some(est.xi_prime);
    let space = match SpaceSpec::new(m, p) {
        Ok(s) => s,
        Err(e) => return LemmaReport::error("sandwich", setting, e),
    };
    for _ in 0..runs {
        let ws = Potential::from_vec(random_vec(&mut rng, m, -1.0, 1.0));
        let n = config.model.particles as f64 / m as f64;
        let x0 = Quasidensity::from_vec(random_vec(&mut rng, m, n - 0.3, n + 0.3));
        let cfg = RunConfig {
            space,
            model_full: config.model(config.model.lambda_full, config.model.interaction),
            model_ref: config.model(config.model.lambda_ref, config.model.interaction),
            eps: config.lemma.eps,
            external_potential: ws.clone(),
            x0: Some(x0.clone()),
            residual_tol: config.run.residual_tol,
            max_iter: config.run.max_iter,
            grid_h: config.run.grid_h,
            gap_tol: config.run.gap_tol,
            seed: config.run.seed,
            damping: config.run.damping,
        };
        let describe = |what: &str| {
            format!("w*={} x0={} {what}", vec_str(ws.as_slice()), vec_str(x0.as_slice()))
        };
        match run(&cfg) {
            Ok(trace) => {
                let rep = check_descent(&trace, &space, cfg.eps, &est);
                report.samples += rep.steps;
                if !rep.descent_ok() {
                    report.fail(describe(&format!("descent violated at steps {:?}", rep.descent_violations)));
                }
                if !rep.sandwich_ok() {
                    report.fail(describe(&format!(
                        "sandwich violated at steps {:?} (ratio range {:?})",
                        rep.sandwich_violations, rep.xu_ratio_range
                    )));
                }
                if !rep.orthogonality_violations.is_empty() {
                    report.fail(describe("damping certificate violated"));
                }
            }
            Err(e) => report.fail(describe(&e.to_string())),
        }
    }
    report
}

/// Runs every suite configured in `config.lemma`.
pub fn run_lemma_suites(
    config: &ExperimentConfig,
    cache: &std::path::Path,
    hooks: &LemmaHooks,
) -> Vec<LemmaReport> {
    let lemma = &config.lemma;
    let mut reports = Vec::new();
    let mut seed = lemma.seed;
    let mut next_seed = || {
        seed = seed.wrapping_add(1);
        seed
    };
    for &dim in &lemma.dims {
        for &p in &lemma.p {
            reports.push(xu_suite(dim, p, lemma.xu_samples, next_seed(), hooks));
        }
    }
    let reference = config.model(config.model.lambda_ref, config.model.interaction);
    for &p in &lemma.p {
        reports.push(monotonicity_suite(
            &reference,
            config.run.gap_tol,
            p,
            lemma.eps,
            lemma.samples,
            next_seed(),
        ));
    }
    for &p in &lemma.p {
        let functionals = match test_functionals(config, p, lemma.grid_h, cache) {
            Ok(f) => f,
            Err(e) => {
                reports.push(LemmaReport::error("prox-identities", format!("p={p}"), e));
                continue;
            }
        };
        let exact = LatticeSystem::new(reference.clone(), config.run.gap_tol)
            .ok()
            .and_then(|s| LiebFunctional::new(s, p).ok());
        for (label, f, lattice) in &functionals {
            let n = lemma.samples;
            reports.push(my_shift_suite(label, f, lemma.eps, n.min(20), next_seed()));
            reports.push(conjugate_decomposition_suite(label, f, lemma.eps, n.min(20), next_seed()));
            reports.push(gradient_fd_suite(label, f, lemma.eps, n, next_seed()));
            reports.push(prox_identities_suite(
                label,
                f,
                if *lattice { exact.as_ref() } else { None },
                lemma.eps,
                n.min(20),
                next_seed(),
            ));
        }
        reports.push(sandwich_suite(config, p, lemma.descent_runs, next_seed(), hooks));
    }
    reports
}
