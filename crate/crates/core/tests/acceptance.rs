//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use myksoda::banach_geometry::{estimate_xu_constants, Potential, Quasidensity, SpaceSpec, XuEstimate, XU_SCALE_DECADES};
use myksoda::harness::config::ExperimentConfig;
use myksoda::harness::lemma::{
    conjugate_decomposition_suite, gradient_fd_suite, monotonicity_suite, my_shift_suite,
    prox_identities_suite, test_functionals, xu_suite, LemmaHooks, LemmaReport,
};
use myksoda::harness::{cli_run, run_baseline, trace_file_name};
use myksoda::lattice_system::{ground_state, LatticeModel, Topology, DEFAULT_GAP_TOL};
use myksoda::myksoda::{
    check_descent, deregularize, run, DampingRule, IterationTrace, MyksodaError, RunConfig,
};

const DESCENT_SLACK: f64 = 1e-10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, budget: Option<Duration>, body: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = body();
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let pass = v.pass && in_time;
    let budget_note = budget.map_or(String::new(), |b| format!(" budget {:.0}s", b.as_secs_f64()));
    println!(
        "{} {id} {name}: {} ({:.2}s{budget_note})",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn failures(reports: &[LemmaReport]) -> Vec<String> {
    reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{} [{}]: {}", r.lemma, r.setting, r.failures.first().cloned().unwrap_or_default()))
        .collect()
}

fn worst_of(reports: &[LemmaReport], lemma: &str) -> f64 {
    reports
        .iter()
        .filter(|r| r.lemma == lemma)
        .map(|r| r.worst)
        .fold(0.0, f64::max)
}

fn geometry() -> Verdict {
    let hooks = LemmaHooks::default();
    let mut reports = Vec::new();
    let mut seed = 100;
    for dim in [2, 3, 4] {
        for p in [2.0, 2.5, 3.0, 4.0] {
            seed += 1;
            reports.push(xu_suite(dim, p, 10_000, seed, &hooks));
        }
    }
    let failed = failures(&reports);
    Verdict {
        pass: failed.is_empty(),
        detail: format!(
            "{} settings x 10^4 pairs, worst residual {:.2e} (tol 1e-12){}",
            reports.len(),
            worst_of(&reports, "xu"),
            if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }
        ),
    }
}

fn two_site_config(p: f64, cache_h: f64) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "space.p = {p}\nmodel.sites = 2\nmodel.particles = 1\nmodel.interaction = 2.0\n\
         run.eps = 0.1\nrun.grid_h = {cache_h}\nrun.external_potential = [0.3, -0.3]\n"
    ))
    .expect("valid config")
}

fn kernel(cache: &Path) -> Verdict {
    let (h, eps) = (0.01, 0.1);
    let mut reports = Vec::new();
    let mut seed = 200;
    for p in [2.0, 3.0] {
        let config = two_site_config(p, h);
        let functionals = match test_functionals(&config, p, h, cache) {
            Ok(f) => f,
            Err(e) => {
                return Verdict {
                    pass: false,
                    detail: format!("tabulation failed: {e}"),
                }
            }
        };
        for (label, f, _) in &functionals {
            seed += 4;
            reports.push(prox_identities_suite(label, f, None, eps, 0, seed));
            reports.push(gradient_fd_suite(label, f, eps, 100, seed + 1));
            reports.push(conjugate_decomposition_suite(label, f, eps, 50, seed + 2));
            reports.push(my_shift_suite(label, f, eps, 50, seed + 3));
        }
    }
    let failed = failures(&reports);
    let shift_samples: usize = reports.iter().filter(|r| r.lemma == "my-shift").map(|r| r.samples).sum();
    Verdict {
        pass: failed.is_empty(),
        detail: format!(
            "1D and M=2 at h={h}: f_eps-f excess {:.1e}, fd rel err {:.1e} (tol 1e-4), \
             conjugate decomposition {:.1e}, MY-shift {:.1e} over {shift_samples} potentials (tol {:.0e}){}",
            worst_of(&reports, "prox-identities"),
            worst_of(&reports, "gradient-fd"),
            worst_of(&reports, "conjugate-decomposition"),
            worst_of(&reports, "my-shift"),
            10.0 * h * h,
            if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }
        ),
    }
}

fn reference_two_site() -> LatticeModel {
    LatticeModel {
        sites: 2,
        particles: 1,
        hopping: 1.0,
        interaction: 2.0,
        lambda: 0.0,
        topology: Topology::Chain,
    }
}

fn monotonicity() -> Verdict {
    let model = reference_two_site();
    let r2 = monotonicity_suite(&model, DEFAULT_GAP_TOL, 2.0, 0.1, 200, 301);
    let r3 = monotonicity_suite(&model, DEFAULT_GAP_TOL, 3.0, 0.1, 200, 302);
    let z2 = r2.zeta.unwrap_or(f64::NAN);
    let z3 = r3.zeta.unwrap_or(f64::NAN);
    let failed = failures(&[r2.clone(), r3.clone()]);
    Verdict {
        pass: r2.pass && r3.pass && z2 >= 1.0 - 1e-9 && z3 > 0.0 && r2.samples == 200 && r3.samples == 200,
        detail: format!(
            "zeta_hat(p=2) = {z2:.9} over {} pairs (>= 1 - 1e-9), zeta_hat(p=3) = {z3:.6} over {} pairs (> 0){}",
            r2.samples,
            r3.samples,
            if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }
        ),
    }
}

/// One randomized configuration of the descent suite and its outcome.
struct SuiteRun {
    config: RunConfig,
    trace: Option<IterationTrace>,
    error: Option<String>,
    closed_form_mismatch: bool,
}

fn random_config(rng: &mut ChaCha8Rng, index: usize) -> RunConfig {
    let sites = rng.random_range(2..=3usize);
    let particles = rng.random_range(1..=2usize);
    let p = if rng.random_bool(0.5) { 2.0 } else { 3.0 };
    let eps = [0.02, 0.1, 0.5][rng.random_range(0..3)];
    let full = LatticeModel {
        sites,
        particles,
        hopping: 1.0,
        interaction: rng.random_range(0.0..=4.0),
        lambda: 1.0,
        topology: Topology::Chain,
    };
    let fill = particles as f64 / sites as f64;
    let ws: Vec<f64> = (0..sites).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let x0: Vec<f64> = (0..sites).map(|_| fill + rng.random_range(-0.3..=0.3)).collect();
    RunConfig {
        space: SpaceSpec::new(sites, p).expect("valid exponent"),
        model_ref: full.with_lambda(0.0),
        model_full: full,
        eps,
        external_potential: Potential::from_vec(ws),
        x0: Some(Quasidensity::from_vec(x0)),
        residual_tol: 1e-8,
        max_iter: 500,
        grid_h: 0.01,
        gap_tol: DEFAULT_GAP_TOL,
        seed: index as u64,
        damping: DampingRule::Majorant,
    }
}

fn run_suite(configs: &[RunConfig]) -> Vec<SuiteRun> {
    configs
        .iter()
        .map(|cfg| match run(cfg) {
            Ok(trace) => SuiteRun {
                config: cfg.clone(),
                trace: Some(trace),
                error: None,
                closed_form_mismatch: false,
            },
            Err(e) => SuiteRun {
                config: cfg.clone(),
                trace: e.partial_trace().cloned(),
                closed_form_mismatch: matches!(e, MyksodaError::ClosedFormMismatch { .. }),
                error: Some(e.to_string()),
            },
        })
        .collect()
}

fn xu_for(estimates: &[((usize, u32), XuEstimate)], sites: usize, p: f64) -> XuEstimate {
    estimates
        .iter()
        .find(|((m, q), _)| *m == sites && *q == p as u32)
        .map(|(_, e)| *e)
        .expect("estimated for every (M, p)")
}

fn descent(runs: &[SuiteRun], estimates: &[((usize, u32), XuEstimate)]) -> Verdict {
    let mut steps = 0;
    let mut descent_bad = Vec::new();
    let mut sandwich_bad = Vec::new();
    let mut ratio = (f64::INFINITY, f64::NEG_INFINITY);
    let mut no_trace = 0;
    for (i, r) in runs.iter().enumerate() {
        let Some(trace) = &r.trace else {
            no_trace += 1;
            continue;
        };
        let cfg = &r.config;
        let xu = xu_for(estimates, cfg.space.dim(), cfg.space.p());
        let rep = check_descent(trace, &cfg.space, cfg.eps, &xu);
        steps += rep.steps;
        if !rep.descent_ok() {
            descent_bad.push(format!("run {i} steps {:?}", rep.descent_violations));
        }
        if !rep.sandwich_ok() {
            sandwich_bad.push(format!("run {i} steps {:?}", rep.sandwich_violations));
        }
        if rep.steps > 0 {
            ratio.0 = ratio.0.min(rep.xu_ratio_range.0);
            ratio.1 = ratio.1.max(rep.xu_ratio_range.1);
        }
    }
    let constants: Vec<String> = estimates
        .iter()
        .map(|((m, p), e)| format!("M={m},p={p}: [{:.4}, {:.3e}]", e.xi, e.xi_prime))
        .collect();
    Verdict {
        pass: descent_bad.is_empty() && sandwich_bad.is_empty() && no_trace == 0,
        detail: format!(
            "{} runs, {steps} steps (slack {DESCENT_SLACK:.0e}); descent violations {}, sandwich violations {}; \
             observed (e-m)p eps/tau^p in [{:.4}, {:.3e}]; xi-hat, xi-hat' {}{}{}",
            runs.len(),
            descent_bad.len(),
            sandwich_bad.len(),
            ratio.0,
            ratio.1,
            constants.join(" "),
            if descent_bad.is_empty() { String::new() } else { format!("; descent: {}", descent_bad.join(", ")) },
            if sandwich_bad.is_empty() { String::new() } else { format!("; sandwich: {}", sandwich_bad.join(", ")) },
        ),
    }
}

fn convergence(runs: &[SuiteRun]) -> Verdict {
    let converged: Vec<&SuiteRun> = runs
        .iter()
        .filter(|r| r.error.is_none() && r.trace.as_ref().is_some_and(|t| t.converged))
        .collect();
    let fraction = converged.len() as f64 / runs.len() as f64;
    let mut checked = 0;
    let mut degenerate = 0;
    let mut worst_density = 0.0_f64;
    let mut worst_energy = 0.0_f64;
    let mut bad = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        if let Some(e) = &r.error {
            bad.push(format!("run {i}: {e}"));
        }
        if !converged.iter().any(|c| std::ptr::eq(*c, r)) {
            if r.error.is_none() {
                bad.push(format!("run {i}: not converged"));
            }
            continue;
        }
        let cfg = &r.config;
        let trace = r.trace.as_ref().expect("converged runs carry a trace");
        let oracle = ground_state(&cfg.model_full, &cfg.external_potential).expect("oracle");
        if oracle.degenerate {
            degenerate += 1;
            continue;
        }
        checked += 1;
        let (rho, energy) =
            deregularize(&cfg.space, cfg.eps, &trace.z, &cfg.external_potential, trace.final_energy);
        let dd = rho.max_abs_diff(&oracle.density);
        let de = (energy - oracle.energy).abs();
        worst_density = worst_density.max(dd);
        worst_energy = worst_energy.max(de);
        if dd > 1e-5 || de > 1e-6 {
            bad.push(format!("run {i}: density error {dd:.2e}, energy error {de:.2e}"));
        }
    }
    let exact_ok = worst_density <= 1e-5 && worst_energy <= 1e-6;
    let iterations: Vec<usize> = converged.iter().filter_map(|r| r.trace.as_ref()).map(|t| t.iterations).collect();
    Verdict {
        pass: fraction >= 0.95 && exact_ok,
        detail: format!(
            "{}/{} converged to r <= 1e-8 within 500 iterations ({:.0}%, need 95%; max {} iterations); \
             {checked} non-degenerate checked ({degenerate} degenerate skipped): density err {worst_density:.2e} \
             (tol 1e-5), energy err {worst_energy:.2e} (tol 1e-6){}",
            converged.len(),
            runs.len(),
            100.0 * fraction,
            iterations.iter().max().copied().unwrap_or(0),
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
        ),
    }
}

fn closed_form(runs: &[SuiteRun]) -> Verdict {
    let mut steps = 0;
    let mut worst = 0.0_f64;
    let mut mismatched_runs = 0;
    for r in runs.iter().filter(|r| r.config.space.p() == 2.0) {
        if r.closed_form_mismatch {
            mismatched_runs += 1;
        }
        let Some(trace) = &r.trace else { continue };
        for s in &trace.steps {
            steps += 1;
            worst = worst.max((s.tau + r.config.eps * s.slope).abs());
        }
    }
    let runs_p2 = runs.iter().filter(|r| r.config.space.p() == 2.0).count();
    Verdict {
        pass: worst <= 1e-10 && mismatched_runs == 0 && steps > 0,
        detail: format!(
            "{runs_p2} p=2 runs, {steps} steps: max |tau + eps<grad+w*, y>| = {worst:.2e} (tol 1e-10), \
             {mismatched_runs} runs stopped on mismatch"
        ),
    }
}

/// Not a criterion: the same suite with the bowl centred at the shifted point.
fn shifted_center_note(configs: &[RunConfig], estimates: &[((usize, u32), XuEstimate)]) {
    for p in [2.0, 3.0] {
        let subset: Vec<RunConfig> = configs
            .iter()
            .filter(|c| c.space.p() == p)
            .map(|c| RunConfig {
                damping: DampingRule::ShiftedCenter,
                ..c.clone()
            })
            .collect();
        let runs = run_suite(&subset);
        let converged = runs
            .iter()
            .filter(|r| r.error.is_none() && r.trace.as_ref().is_some_and(|t| t.converged))
            .count();
        let non_descent = runs
            .iter()
            .filter(|r| {
                r.trace.as_ref().is_some_and(|t| {
                    let xu = xu_for(estimates, r.config.space.dim(), p);
                    !check_descent(t, &r.config.space, r.config.eps, &xu).descent_ok()
                })
            })
            .count();
        println!(
            "INFO shifted-centre damping, p = {p}: {converged}/{} converged, {non_descent} runs with energy increases",
            runs.len()
        );
    }
}

fn baseline(cache: &Path) -> Verdict {
    let h = 0.01;
    let config = two_site_config(2.0, h);
    match run_baseline(&config, cache) {
        Ok(out) => {
            // independent: the grid minimum of F + w* approximates the exact ground energy
            let exact = ground_state(&config.model(1.0, 2.0), &Potential::from_slice(&[0.3, -0.3]))
                .map(|g| g.energy)
                .unwrap_or(f64::NAN);
            Verdict {
                pass: out.monotone && out.final_gap <= 10.0 * h * h,
                detail: format!(
                    "{} iterations, final {:.10}, grid minimum {:.10}, gap {:.2e} (tol {:.0e}), non-increasing {}; \
                     exact ground energy {exact:.10}",
                    out.values.len() - 1,
                    out.values.last().copied().unwrap_or(f64::NAN),
                    out.grid_minimum,
                    out.final_gap,
                    10.0 * h * h,
                    out.monotone
                ),
            }
        }
        Err(e) => Verdict {
            pass: false,
            detail: e.to_string(),
        },
    }
}

fn determinism(dir: &Path) -> Verdict {
    let cfg_path = dir.join("determinism.toml");
    fs::write(
        &cfg_path,
        "space.p = 3\nmodel.sites = 3\nmodel.particles = 2\nmodel.interaction = 2.0\n\
         run.eps = 0.1\nrun.seed = 42\nrun.external_potential = [0.5, -0.2, 0.1]\n\
         output.verbosity = \"quiet\"\n",
    )
    .expect("writable temp dir");
    let (a, b) = (dir.join("det-a"), dir.join("det-b"));
    let codes = [cli_run(&cfg_path, Some(&a)), cli_run(&cfg_path, Some(&b))];
    let mut mismatched = Vec::new();
    for name in [trace_file_name(0), "summary.csv".to_string()] {
        let (x, y) = (fs::read(a.join(&name)), fs::read(b.join(&name)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y && !x.is_empty() => {}
            _ => mismatched.push(name),
        }
    }
    let rows = fs::read_to_string(a.join(trace_file_name(0)))
        .map(|t| t.lines().count().saturating_sub(1))
        .unwrap_or(0);
    Verdict {
        pass: codes == [0, 0] && mismatched.is_empty() && rows > 0,
        detail: format!(
            "exit codes {codes:?}, {rows} trace rows, differing files: {}",
            if mismatched.is_empty() { "none".to_string() } else { mismatched.join(", ") }
        ),
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let cache = tmp.path().join("cache");
    let mut all = true;

    all &= report(1, "geometry suite", Some(Duration::from_secs(5)), geometry);
    all &= report(2, "MY-kernel suite", Some(Duration::from_secs(60)), || kernel(&cache));
    all &= report(3, "strong monotonicity", Some(Duration::from_secs(30)), monotonicity);

    // criteria 4-6 share one suite of randomized runs
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let configs: Vec<RunConfig> = (0..50).map(|i| random_config(&mut rng, i)).collect();
    let mut estimates = Vec::new();
    for sites in [2, 3] {
        for p in [2.0, 3.0] {
            let est = estimate_xu_constants(sites, p, 20_000, XU_SCALE_DECADES, &mut rng);
            estimates.push(((sites, p as u32), est));
        }
    }
    let runs = run_suite(&configs);
    let suite_time = start.elapsed();
    all &= report(4, "MYKSODA descent", None, || {
        let mut v = descent(&runs, &estimates);
        v.pass &= suite_time <= Duration::from_secs(600);
        v.detail.push_str(&format!("; suite time {:.2}s (budget 600s)", suite_time.as_secs_f64()));
        v
    });
    all &= report(5, "convergence and exactness", None, || convergence(&runs));
    all &= report(6, "p = 2 closed-form damping", None, || closed_form(&runs));

    shifted_center_note(&configs, &estimates);

    all &= report(7, "proximal-point baseline", Some(Duration::from_secs(30)), || baseline(&cache));
    all &= report(8, "determinism", Some(Duration::from_secs(10)), || determinism(tmp.path()));

    if !all {
        std::process::exit(1);
    }
}
