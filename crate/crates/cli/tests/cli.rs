//! End-to-end runs of the `consrom` binary on the default benchmark.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn consrom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consrom"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value of `key=` on the first stdout line that has it.
fn value(o: &Output, key: &str) -> f64 {
    let pat = format!("{key}=");
    stdout(o)
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(&pat))
        .unwrap_or_else(|| panic!("no {key} in output:\n{}", stdout(o)))
        .parse()
        .unwrap()
}

fn csv_shape(path: &Path) -> (usize, usize) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let cols = lines.next().unwrap().split(',').count();
    (lines.count(), cols)
}

#[test]
fn default_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let fom = consrom(dir, &["fom"]);
    assert!(fom.status.success(), "{}", stderr(&fom));
    for mu in ["1.7", "1.8", "1.8999999999999999", "2"] {
        let path = dir.join(format!("out/fom/trajectory_mu_{mu}.csv"));
        assert_eq!(csv_shape(&path), (30, 301), "{}", path.display());
    }
    assert!(dir.join("out/fom/trajectory_mu_1.75.csv").exists());

    let train = consrom(dir, &["train"]);
    assert!(train.status.success(), "{}", stderr(&train));
    let manifest = fs::read_to_string(dir.join("out/train/manifest.txt")).unwrap();
    assert!(manifest.contains("phi.csv rows=300 cols=5"), "{manifest}");
    assert!(manifest.contains("sample_cells.txt count=20"), "{manifest}");
    assert!(stdout(&train).lines().next().unwrap().starts_with("phi energy="));
    assert!(value(&train, "energy") >= 0.99);

    let lspg_fv = consrom(dir, &["rom", "--method", "lspg-fv"]);
    assert!(lspg_fv.status.success(), "{}", stderr(&lspg_fv));
    assert!(value(&lspg_fv, "e_u") < 0.02);
    assert!(value(&lspg_fv, "e_r_global") <= 1e-6);
    assert!(dir.join("out/rom/lspg-fv_mu_1.75_log.csv").exists());

    let gnat_fv = consrom(dir, &["rom", "--method", "gnat-fv"]);
    assert!(gnat_fv.status.success(), "{}", stderr(&gnat_fv));
    assert!(value(&gnat_fv, "e_r_global") <= 1e-6);

    let lspg = consrom(dir, &["rom", "--method", "lspg"]);
    assert!(lspg.status.success(), "{}", stderr(&lspg));
    assert!(value(&lspg, "e_r_global") > value(&lspg_fv, "e_r_global"));

    let sweep = consrom(dir, &["sweep", "--jobs", "2"]);
    assert!(sweep.status.success(), "{}", stderr(&sweep));
    assert_eq!(csv_shape(&dir.join("out/sweep/results.csv")).0, 1);
    assert_eq!(csv_shape(&dir.join("out/sweep/pareto.csv")).0, 1);
}

#[test]
fn sweep_grid_collapses_unused_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("sweep.toml"),
        "[sweep]\nmethods = [\"lspg-fv\"]\np = [4, 5, 6]\nn_r = [10, 20, 30]\n",
    )
    .unwrap();
    assert!(consrom(dir, &["--config", "sweep.toml", "fom"]).status.success());
    let sweep = consrom(dir, &["--config", "sweep.toml", "sweep", "--jobs", "3"]);
    assert!(sweep.status.success(), "{}", stderr(&sweep));
    let results = fs::read_to_string(dir.join("out/sweep/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 4, "{results}");
    for p in ["4", "5", "6"] {
        assert!(results.lines().any(|l| l.starts_with(&format!("lspg-fv,{p},"))));
    }
}

#[test]
fn fom_outputs_are_deterministic_and_conservative() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let a = consrom(dir, &["fom", "--mu", "1.75", "--output-dir", "a"]);
    let b = consrom(dir, &["fom", "--mu", "1.75", "--output-dir", "b"]);
    assert!(a.status.success() && b.status.success());
    for file in ["trajectory_mu_1.75.csv", "state_snapshots_mu_1.75.csv", "residual_snapshots_mu_1.75.csv"] {
        let x = fs::read(dir.join("a/fom").join(file)).unwrap();
        let y = fs::read(dir.join("b/fom").join(file)).unwrap();
        assert!(x == y, "{file} differs between identical runs");
    }
    // Each converged step leaves at most the relative Newton tolerance of
    // its initial residual, which on this benchmark is below 1e-2 summed.
    assert!(value(&a, "e_r_global") <= 1e-2);
    assert!(!dir.join("a/fom/trajectory_mu_1.7.csv").exists());
}

#[test]
fn missing_artifacts_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = consrom(tmp.path(), &["rom"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("trajectory_mu_1.75.csv"), "{}", stderr(&o));

    assert!(consrom(tmp.path(), &["fom", "--mu", "1.75"]).status.success());
    let o = consrom(tmp.path(), &["rom"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("phi.csv"), "{}", stderr(&o));

    let o = consrom(tmp.path(), &["train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("trajectory_mu_1.7.csv"), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(consrom(dir, &["rom", "--method", "pod-galerkin"]).status.code(), Some(4));
    fs::write(dir.join("bad.toml"), "[rom]\nunknown_key = 1\n").unwrap();
    assert_eq!(consrom(dir, &["--config", "bad.toml", "fom"]).status.code(), Some(4));
    assert_eq!(consrom(dir, &["fom", "--dt=-1"]).status.code(), Some(4));
    assert_eq!(consrom(dir, &["rom", "--n-subdomains", "0"]).status.code(), Some(4));
}

#[test]
fn solver_failure_exits_with_code_2_and_keeps_partial_output() {
    // A single control volume spanning the whole nozzle has no backward-Euler
    // solution at the default time step.
    let tmp = tempfile::tempdir().unwrap();
    let o = consrom(tmp.path(), &["fom", "--mu", "1.75", "--n-cells", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let path = tmp.path().join("out/fom/trajectory_mu_1.75.csv");
    assert_eq!(csv_shape(&path), (1, 4));
}

#[test]
fn coarse_mesh_runs_and_conserves() {
    let tmp = tempfile::tempdir().unwrap();
    let o = consrom(tmp.path(), &["fom", "--mu", "1.75", "--n-cells", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(value(&o, "e_r_global") <= 1e-2);
}

#[test]
fn check_subcommand_passes_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = consrom(tmp.path(), &["check"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 6);
}
