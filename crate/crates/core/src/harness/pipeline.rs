//! Offline training and online evaluation of the nozzle benchmark.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::{BasisConfig, Method, RunConfig};
use crate::conservative::{integrate_conservative_rom, RomRun};
use crate::error::{Error, Result};
use crate::euler::EulerNozzle;
use crate::fv::build_decomposition;
use crate::io::{self, fmt_g17};
use crate::metrics::{compare, MetricReport};
use crate::model::{self, FiniteVolumeModel};
use crate::rom::HyperOperators;
use crate::time::{integrate_fom, FomOptions, TrajectoryRecord};
use crate::training::{greedy_sample, pod, pod_capped, ReducedBasis, SampleSelection, SnapshotKind, SnapshotSet};

/// Full-order trajectory at one parameter, with its Newton-iterate residuals.
#[derive(Debug, Clone)]
pub struct FomRun {
    pub mu: f64,
    pub record: TrajectoryRecord,
}

pub fn run_fom(cfg: &RunConfig, mu: f64) -> Result<FomRun> {
    let model = cfg.model_at(mu)?;
    let u0 = model.initial_condition()?;
    let opts = FomOptions {
        record_residuals: true,
        ..FomOptions::default()
    };
    let record = integrate_fom(&model, &cfg.scheme(), &cfg.grid()?, &u0, &opts)?;
    Ok(FomRun { mu, record })
}

/// Full-order runs over the training parameters, in parallel and returned in
/// parameter order.
pub fn run_training_foms(cfg: &RunConfig) -> Result<Vec<FomRun>> {
    cfg.training.train_mu.par_iter().map(|&mu| run_fom(cfg, mu)).collect()
}

fn mu_tag(mu: f64) -> String {
    format!("mu_{}", fmt_g17(mu))
}

pub fn fom_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("fom")
}

pub fn fom_trajectory_path(cfg: &RunConfig, mu: f64) -> PathBuf {
    fom_dir(cfg).join(format!("trajectory_{}.csv", mu_tag(mu)))
}

/// Writes the trajectory, the state snapshots (initial condition subtracted,
/// one per row) and the residual snapshots.
pub fn save_fom(cfg: &RunConfig, run: &FomRun) -> Result<()> {
    let dir = fom_dir(cfg);
    run.record.write_csv(&fom_trajectory_path(cfg, run.mu))?;
    if let Some(u0) = run.record.states.first() {
        let x: Vec<DVector<f64>> = run.record.states.iter().map(|s| s - u0).collect();
        io::write_plain_matrix(&dir.join(format!("state_snapshots_{}.csv", mu_tag(run.mu))), &DMatrix::from_columns(&x).transpose())?;
    }
    if !run.record.residual_snapshots.is_empty() {
        io::write_plain_matrix(
            &dir.join(format!("residual_snapshots_{}.csv", mu_tag(run.mu))),
            &DMatrix::from_columns(&run.record.residual_snapshots).transpose(),
        )?;
    }
    Ok(())
}

/// Reads a trajectory written by [`save_fom`], with its residual snapshots
/// when present.
pub fn load_fom(cfg: &RunConfig, mu: f64) -> Result<FomRun> {
    let mut record = TrajectoryRecord::read_csv(&fom_trajectory_path(cfg, mu))?;
    match io::read_matrix_csv(&fom_dir(cfg).join(format!("residual_snapshots_{}.csv", mu_tag(mu)))) {
        Ok((_, m)) => record.residual_snapshots = m.row_iter().map(|r| r.transpose()).collect(),
        Err(Error::MissingArtifact(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(FomRun { mu, record })
}

/// Bases and sample mesh of one training configuration.
#[derive(Debug, Clone)]
pub struct Trained {
    pub bases: BasisConfig,
    pub state: ReducedBasis,
    pub hyper: HyperOperators,
    /// Retained energies keyed by artifact name.
    pub energies: Vec<(String, f64)>,
}

impl Trained {
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.state.phi
    }

    pub fn energy(&self) -> f64 {
        self.state.retained_energy()
    }

    fn artifacts(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let mut out = vec![("phi", &self.state.phi)];
        for (name, b) in [
            ("phi_r", &self.hyper.phi_r),
            ("phi_v", &self.hyper.phi_v),
            ("phi_h", &self.hyper.phi_h),
            ("phi_s", &self.hyper.phi_s),
        ] {
            if let Some(b) = b {
                out.push((name, b));
            }
        }
        out
    }

    /// Writes each basis as CSV, the sample cells as an index file and a
    /// manifest listing every artifact with its dimensions.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = String::new();
        for (name, m) in self.artifacts() {
            let file = format!("{name}.csv");
            io::write_plain_matrix(&dir.join(&file), m)?;
            let energy = self.energies.iter().find(|(n, _)| n == name).map_or(f64::NAN, |e| e.1);
            let _ = writeln!(manifest, "{file} rows={} cols={} energy={}", m.nrows(), m.ncols(), fmt_g17(energy));
        }
        io::write_indices(&dir.join("sample_cells.txt"), &self.hyper.selection.cells)?;
        let _ = writeln!(manifest, "sample_cells.txt count={}", self.hyper.selection.cells.len());
        io::write_indices(&dir.join("residual_rows.txt"), &self.hyper.selection.residual_rows)?;
        let _ = writeln!(manifest, "residual_rows.txt count={}", self.hyper.selection.residual_rows.len());
        io::write_indices(&dir.join("face_rows.txt"), &self.hyper.selection.face_rows)?;
        let _ = writeln!(manifest, "face_rows.txt count={}", self.hyper.selection.face_rows.len());
        io::write_atomic(&dir.join("manifest.txt"), &manifest)
    }

    /// Reads artifacts written by [`Trained::save`]; the state basis, residual
    /// basis and sample cells are required.
    pub fn load<M: FiniteVolumeModel + ?Sized>(dir: &Path, model: &M, bases: BasisConfig) -> Result<Self> {
        let read = |name: &str| -> Result<DMatrix<f64>> { io::read_matrix_csv(&dir.join(format!("{name}.csv"))).map(|(_, m)| m) };
        let optional = |name: &str| -> Result<Option<DMatrix<f64>>> {
            match read(name) {
                Ok(m) => Ok(Some(m)),
                Err(Error::MissingArtifact(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let phi = read("phi")?;
        if phi.nrows() != model.n_dofs() {
            return Err(Error::dim("stored state basis", model.n_dofs(), phi.nrows()));
        }
        let cells = io::read_indices(&dir.join("sample_cells.txt"))?;
        let selection = SampleSelection::from_cells(cells, model.mesh(), model.n_vars())?;
        Ok(Trained {
            bases,
            state: ReducedBasis::from_matrix(SnapshotKind::State, phi),
            hyper: HyperOperators {
                selection,
                phi_r: Some(read("phi_r")?),
                phi_v: optional("phi_v")?,
                phi_h: optional("phi_h")?,
                phi_s: optional("phi_s")?,
            },
            energies: Vec::new(),
        })
    }

    /// Checks that the bases `method` needs are present.
    pub fn require(&self, method: Method, dir: &Path) -> Result<()> {
        if method.constraint_tier() == 2 {
            for (name, b) in [("phi_h", &self.hyper.phi_h), ("phi_s", &self.hyper.phi_s)] {
                if b.is_none() {
                    return Err(Error::MissingArtifact(dir.join(format!("{name}.csv"))));
                }
            }
        }
        Ok(())
    }
}

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("train")
}

/// Builds every basis and the sample mesh from training runs: POD of the
/// states (each relative to its own initial condition), of the Newton-iterate
/// residuals and of the velocities; greedy sampling on the residual basis;
/// and face-flux and source bases from the configured snapshot source.
pub fn train(cfg: &RunConfig, foms: &[FomRun]) -> Result<Trained> {
    if foms.is_empty() {
        return Err(Error::InvalidInput("training needs at least one full-order run".into()));
    }
    let b = cfg.bases;
    let mut states = SnapshotSet::new(SnapshotKind::State);
    let mut residuals = SnapshotSet::new(SnapshotKind::Residual);
    let mut velocities = SnapshotSet::new(SnapshotKind::Velocity);
    for run in foms {
        let model = cfg.model_at(run.mu)?;
        let u0 = run.record.states.first().ok_or_else(|| Error::InvalidInput("empty training trajectory".into()))?;
        states.push_states(&run.record.states[1..], u0, run.mu)?;
        for r in &run.record.residual_snapshots {
            residuals.push(r.clone(), run.mu)?;
        }
        for (k, s) in run.record.states.iter().enumerate() {
            velocities.push(model::velocity(&model, s, run.record.times[k])?, run.mu)?;
        }
    }
    let state = pod(&states, b.p)?;
    let phi_r = pod_capped(&residuals, b.n_r)?;
    let phi_v = pod_capped(&velocities, b.n_r)?;
    let model = cfg.model_at(foms[0].mu)?;
    let selection = greedy_sample(&phi_r.phi, b.n_sample_cells, model.mesh(), model.n_vars())?;
    let mut trained = Trained {
        bases: b,
        energies: vec![
            ("phi".into(), state.retained_energy()),
            ("phi_r".into(), phi_r.retained_energy()),
            ("phi_v".into(), phi_v.retained_energy()),
        ],
        state,
        hyper: HyperOperators {
            selection,
            phi_r: Some(phi_r.phi),
            phi_v: Some(phi_v.phi),
            phi_h: None,
            phi_s: None,
        },
    };

    let mut fluxes = SnapshotSet::new(SnapshotKind::FaceFlux);
    let mut sources = SnapshotSet::new(SnapshotKind::Source);
    for run in foms {
        let model = cfg.model_at(run.mu)?;
        let record = match cfg.training.snapshot_source.method() {
            None => run.record.clone(),
            Some(method) => {
                let rom = run_method(cfg, &model, method, &trained, run.mu)?;
                if let Some(f) = &rom.record.failure {
                    log::warn!("{method} snapshot run at mu = {} stopped at step {}: {}", run.mu, f.step, f.reason);
                }
                rom.record
            }
        };
        for (k, s) in record.states.iter().enumerate() {
            fluxes.push(model::face_fluxes(&model, s, record.times[k])?, run.mu)?;
            sources.push(model::sources(&model, s, record.times[k])?, run.mu)?;
        }
    }
    let phi_h = pod_capped(&fluxes, b.n_h)?;
    let phi_s = pod_capped(&sources, b.n_s)?;
    trained.energies.push(("phi_h".into(), phi_h.retained_energy()));
    trained.energies.push(("phi_s".into(), phi_s.retained_energy()));
    trained.hyper.phi_h = Some(phi_h.phi);
    trained.hyper.phi_s = Some(phi_s.phi);
    Ok(trained)
}

/// Runs `method` at parameter `mu` starting from that parameter's initial
/// condition.
pub fn run_method(cfg: &RunConfig, model: &EulerNozzle, method: Method, trained: &Trained, mu: f64) -> Result<RomRun> {
    if model.mu() != mu {
        return Err(Error::InvalidInput(format!("model is built for mu = {}, not {mu}", model.mu())));
    }
    let u0 = model.initial_condition()?;
    let spec = cfg.rom_spec(model, method)?;
    let hyper = method.is_hyper_reduced().then_some(&trained.hyper);
    integrate_conservative_rom(model, trained.phi(), &u0, &spec, hyper, &cfg.scheme(), &cfg.grid()?, &cfg.rom_options())
}

/// Runs `method` at the online parameter and compares it with `reference`.
pub fn evaluate(cfg: &RunConfig, method: Method, trained: &Trained, reference: &FomRun) -> Result<(RomRun, MetricReport)> {
    let model = cfg.model_at(cfg.mu)?;
    let run = run_method(cfg, &model, method, trained, cfg.mu)?;
    let global = build_decomposition(model.mesh(), 1, model.n_vars())?;
    let report = compare(&model, &cfg.scheme(), cfg.discretization.dt, &reference.record, &run.record, &global)?;
    Ok((run, report))
}

/// Writes the trajectory, generalized coordinates, solver log and metrics of
/// one reduced run under `output_dir/rom`.
pub fn save_rom(cfg: &RunConfig, method: Method, run: &RomRun, report: &MetricReport) -> Result<PathBuf> {
    let dir = cfg.output_dir.join("rom");
    let stem = format!("{}_{}", method.name(), mu_tag(cfg.mu));
    run.record.write_csv(&dir.join(format!("{stem}_trajectory.csv")))?;
    run.record.write_generalized_csv(&dir.join(format!("{stem}_generalized.csv")))?;
    run.write_log_csv(&dir.join(format!("{stem}_log.csv")))?;
    report.write_series_csv(&dir.join(format!("{stem}_series.csv")))?;
    let summary = dir.join(format!("{stem}_metrics.txt"));
    let mut text = format!("method={}\nmu={}\n", method.name(), fmt_g17(cfg.mu));
    text.push_str(&report.summary());
    for e in &run.events {
        let _ = writeln!(text, "event={e}");
    }
    io::write_atomic(&summary, &text)?;
    Ok(summary)
}
