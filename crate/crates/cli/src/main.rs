//! Command-line driver for the nozzle benchmark.
//!
//! Exit codes: 0 success, 1 failed invariant check or I/O error, 2 solver
//! failure, 3 missing artifact, 4 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use consrom::fv::build_decomposition;
use consrom::harness::{
    evaluate, fom_trajectory_path, load_fom, run_checks, run_fom, run_sweep, save_fom, save_rom, train, train_dir, write_sweep, FomRun, Method, RunConfig,
    SnapshotSource, Trained,
};
use consrom::io::fmt_g17;
use consrom::metrics::compare;
use consrom::training::{ReducedBasis, SnapshotKind};
use consrom::{Error, FiniteVolumeModel};

#[derive(Parser, Debug)]
#[command(name = "consrom", version, about = "Conservative model reduction for the quasi-1D Euler nozzle")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override keys of the configuration file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Online parameter; for `fom`, runs only this parameter.
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n_cells: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    final_time: Option<f64>,
    #[arg(long, global = true)]
    p: Option<usize>,
    #[arg(long, global = true)]
    n_r: Option<usize>,
    #[arg(long, global = true)]
    n_h: Option<usize>,
    #[arg(long, global = true)]
    n_s: Option<usize>,
    #[arg(long, global = true)]
    n_sample_cells: Option<usize>,
    /// One of galerkin, galerkin-fv, lspg, lspg-fv, gnat, gnat-fv, gnat-fv-x.
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    n_subdomains: Option<usize>,
    /// Penalty weight; `inf` keeps only the constraints.
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// `hard` or `penalty`.
    #[arg(long, global = true)]
    enforcement: Option<String>,
    /// One of fom, lspg, gnat, lspg-fv, gnat-fv.
    #[arg(long, global = true)]
    snapshot_source: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full-order runs: the training parameters and the online parameter, or
    /// only `--mu` when given.
    Fom,
    /// Bases and sample mesh from stored training trajectories.
    Train,
    /// One reduced model at the online parameter against the stored reference.
    Rom,
    /// Cross product of the sweep lists, with the Pareto front.
    Sweep {
        /// Trajectories run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Invariant suite at the online parameter.
    Check,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingArtifact(_) => 3,
            Error::Config(_) | Error::InvalidInput(_) | Error::Parse { .. } => 4,
            e if e.is_solver_failure() => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

fn load_config(o: &Overrides) -> Result<(RunConfig, bool), Failure> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &o.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = o.mu {
        cfg.mu = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    let d = &mut cfg.discretization;
    if let Some(v) = o.n_cells {
        d.n_cells = v;
    }
    if let Some(v) = o.dt {
        d.dt = v;
    }
    if let Some(v) = o.final_time {
        d.final_time = v;
    }
    let b = &mut cfg.bases;
    for (slot, v) in [(&mut b.p, o.p), (&mut b.n_r, o.n_r), (&mut b.n_h, o.n_h), (&mut b.n_s, o.n_s), (&mut b.n_sample_cells, o.n_sample_cells)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(v) = &o.method {
        cfg.rom.method = Method::from_str(v)?;
    }
    if let Some(v) = o.n_subdomains {
        cfg.rom.n_subdomains = v;
    }
    if let Some(v) = o.rho {
        cfg.rom.rho = v;
    }
    if let Some(v) = &o.enforcement {
        cfg.rom.enforcement = v.clone();
    }
    if let Some(v) = &o.snapshot_source {
        cfg.training.snapshot_source = SnapshotSource::from_str(v)?;
    }
    Ok((cfg, o.mu.is_some()))
}

fn load_training_foms(cfg: &RunConfig) -> Result<Vec<FomRun>, Failure> {
    Ok(cfg.training.train_mu.iter().map(|&mu| load_fom(cfg, mu)).collect::<Result<Vec<_>, _>>()?)
}

/// Loads the stored bases, keeping the leading `p` state modes when fewer
/// are requested than were trained.
fn load_trained(cfg: &RunConfig) -> Result<Trained, Failure> {
    let model = cfg.model_at(cfg.mu)?;
    let dir = train_dir(cfg);
    let mut trained = Trained::load(&dir, &model, cfg.bases)?;
    let stored = trained.phi().ncols();
    let p = cfg.bases.p;
    if p > stored {
        return Err(fail(4, format!("requested p = {p} but {} holds only {stored} state modes; rerun `train`", dir.display())));
    }
    if p < stored {
        trained.state = ReducedBasis::from_matrix(SnapshotKind::State, trained.phi().columns(0, p).into_owned());
    }
    trained.require(cfg.rom.method, &dir)?;
    Ok(trained)
}

fn cmd_fom(cfg: &RunConfig, single: bool) -> Result<(), Failure> {
    cfg.validate_model()?;
    let mut mus: Vec<f64> = if single { Vec::new() } else { cfg.training.train_mu.clone() };
    if !mus.contains(&cfg.mu) {
        mus.push(cfg.mu);
    }
    let mut failed = Vec::new();
    for mu in mus {
        let run = run_fom(cfg, mu)?;
        save_fom(cfg, &run)?;
        let model = cfg.model_at(mu)?;
        let global = build_decomposition(model.mesh(), 1, model.n_vars())?;
        let report = compare(&model, &cfg.scheme(), cfg.discretization.dt, &run.record, &run.record, &global)?;
        println!(
            "mu={} steps={} e_r_global={} wall_time={} file={}",
            fmt_g17(mu),
            run.record.completed_steps(),
            fmt_g17(report.e_r_global),
            fmt_g17(run.record.wall_time),
            fom_trajectory_path(cfg, mu).display()
        );
        if let Some(f) = &run.record.failure {
            failed.push(format!("mu = {} failed at step {}: {}", fmt_g17(mu), f.step, f.reason));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail(2, failed.join("; ")))
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate()?;
    let foms = load_training_foms(cfg)?;
    let trained = train(cfg, &foms)?;
    let dir = train_dir(cfg);
    trained.save(&dir)?;
    for (name, energy) in &trained.energies {
        println!("{name} energy={}", fmt_g17(*energy));
    }
    println!("manifest={}", dir.join("manifest.txt").display());
    Ok(())
}

fn cmd_rom(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate()?;
    let method = cfg.rom.method;
    let reference = load_fom(cfg, cfg.mu)?;
    let trained = load_trained(cfg)?;
    let (run, report) = evaluate(cfg, method, &trained, &reference)?;
    let summary = save_rom(cfg, method, &run, &report)?;
    print!("method={method}\n{}", report.summary());
    for e in &run.events {
        println!("event={e}");
    }
    println!("metrics={}", summary.display());
    match &run.record.failure {
        Some(f) => Err(fail(2, format!("{method} failed at step {}: {}", f.step, f.reason))),
        None => Ok(()),
    }
}

fn cmd_sweep(cfg: &RunConfig, jobs: usize) -> Result<(), Failure> {
    cfg.validate()?;
    let foms = load_training_foms(cfg)?;
    let reference = load_fom(cfg, cfg.mu)?;
    let rows = run_sweep(cfg, &foms, &reference, jobs)?;
    let dir = cfg.output_dir.join("sweep");
    write_sweep(&dir, &rows)?;
    let stable = rows.iter().filter(|r| r.stable).count();
    println!("runs={} stable={} results={}", rows.len(), stable, dir.join("results.csv").display());
    Ok(())
}

fn cmd_check(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate_model()?;
    let results = run_checks(cfg)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {} value={} tolerance={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            fmt_g17(r.value),
            fmt_g17(r.tolerance)
        );
        failed += usize::from(!r.passed);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(fail(1, format!("{failed} of {} checks failed", results.len())))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let (cfg, single) = load_config(&cli.overrides)?;
    match &cli.command {
        Command::Fom => cmd_fom(&cfg, single),
        Command::Train => cmd_train(&cfg),
        Command::Rom => cmd_rom(&cfg),
        Command::Sweep { jobs } => cmd_sweep(&cfg, *jobs),
        Command::Check => cmd_check(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
