use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TWO_SITE: &str = r#"space.p = 2
model.sites = 2
model.particles = 1
model.interaction = 2.0
run.eps = 0.1
run.residual_tol = 1e-8
run.external_potential = [0.3, -0.3]
run.x0 = [0.9, 0.1]
"#;

const THREE_SITE: &str = r#"space.p = 3
model.sites = 3
model.particles = 2
model.interaction = 2.0
run.eps = 0.1
run.external_potential = [0.5, -0.2, 0.1]
"#;

fn myksoda(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_myksoda"))
        .args(args)
        .env("MYKSODA_CACHE_DIR", dir.join("cache"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn trace_rows(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn two_site_run_converges_with_decreasing_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TWO_SITE);
    let out = tmp.path().join("out");
    let res = myksoda(&["run", &cfg, "--output", out.to_str().unwrap()], tmp.path());
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let header = fs::read_to_string(out.join("trace-000.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert!(header["fields"].as_array().unwrap().len() >= 10);
    assert_eq!(header["config_hash"].as_str().unwrap().len(), 64);
    let rows = trace_rows(&out.join("trace-000.jsonl"));
    assert!(rows.len() > 1);
    let energies: Vec<f64> = rows.iter().map(|r| r["energy"].as_f64().unwrap()).collect();
    // e_{i+1} ≤ e_i up to the descent slack; strict wherever the drop is resolvable
    for (w, r) in energies.windows(2).zip(&rows) {
        assert!(w[1] <= w[0] + 1e-10, "{energies:?}");
        if r["energy_drop"].as_f64().unwrap() > 1e-10 {
            assert!(w[1] < w[0], "{energies:?}");
        }
    }
    for r in &rows {
        assert!(r.as_object().unwrap().values().all(|v| !v.is_null()));
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().contains(",true,"));
}

#[test]
fn too_many_particles_is_rejected_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        "space.p = 2\nmodel.sites = 2\nmodel.particles = 3\n",
    );
    let res = myksoda(&["run", &cfg, "--output", tmp.path().to_str().unwrap()], tmp.path());
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("model.particles"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn single_iteration_budget_exits_1_with_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{THREE_SITE}run.max_iter = 1\nrun.x0 = [0.9, 0.2, 0.9]\n");
    let cfg = write_config(tmp.path(), "short.toml", &text);
    let out = tmp.path().join("out");
    let res = myksoda(&["run", &cfg, "--output", out.to_str().unwrap()], tmp.path());
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(trace_rows(&out.join("trace-000.jsonl")).len(), 1);
    assert!(fs::read_to_string(out.join("summary.csv")).unwrap().contains(",false,"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", THREE_SITE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let res = myksoda(&["run", &cfg, "--output", dir.to_str().unwrap()], tmp.path());
        assert_eq!(res.status.code(), Some(0));
    }
    for name in ["trace-000.jsonl", "summary.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn single_cell_sweep_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run_cfg = write_config(tmp.path(), "run.toml", THREE_SITE);
    let sweep_cfg = write_config(
        tmp.path(),
        "sweep.toml",
        &format!("{THREE_SITE}sweep.eps = [0.1]\nsweep.p = [3]\n"),
    );
    let (a, b) = (tmp.path().join("run"), tmp.path().join("sweep"));
    assert_eq!(myksoda(&["run", &run_cfg, "--output", a.to_str().unwrap()], tmp.path()).status.code(), Some(0));
    assert_eq!(myksoda(&["sweep", &sweep_cfg, "--output", b.to_str().unwrap()], tmp.path()).status.code(), Some(0));
    for name in ["trace-000.jsonl", "summary.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn sweep_without_sweep_section_is_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TWO_SITE);
    let res = myksoda(&["sweep", &cfg, "--output", tmp.path().to_str().unwrap()], tmp.path());
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn eps_and_p_sweep_gives_six_converged_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{TWO_SITE}sweep.eps = [0.5, 0.1, 0.02]\nsweep.p = [2, 3]\n");
    let cfg = write_config(tmp.path(), "sweep.toml", &text);
    let out = tmp.path().join("out");
    let res = myksoda(&["sweep", &cfg, "--output", out.to_str().unwrap()], tmp.path());
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let mut reader = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let keys: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
    assert!(rows.iter().all(|r| &r[6] == "true"));
}

#[test]
fn zero_interaction_stops_at_step_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let text = THREE_SITE.replace("model.interaction = 2.0", "model.interaction = 0.0");
    let cfg = write_config(tmp.path(), "free.toml", &text);
    let out = tmp.path().join("out");
    assert_eq!(myksoda(&["run", &cfg, "--output", out.to_str().unwrap()], tmp.path()).status.code(), Some(0));
    assert!(trace_rows(&out.join("trace-000.jsonl")).is_empty());
}
