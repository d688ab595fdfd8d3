//! Invariant suite run by the `check` subcommand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::pipeline::run_fom;
use crate::conservative::{ConstraintSpec, RomOptions, RomProblem, RomSpec};
use crate::error::Result;
use crate::fv::build_decomposition;
use crate::model::{self, FiniteVolumeModel};
use crate::rom::{ObjectiveSpec, Projection};
use crate::time::{multistep_residual, residual_floor, MultistepScheme, TrajectoryRecord};
use crate::training::{gappy_reconstructor, pod, SnapshotKind, SnapshotSet};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

/// Largest ratio of `‖C̄ rⁿ(uⁿ)‖` to `max(rel ‖rⁿ(u^{n−1})‖, floor)` over the
/// steps of a trajectory, where `floor` is the residual round-off floor of
/// the step. Values at most 1 mean every subdomain is conserved to the
/// relative tolerance, or to round-off once the initial residual itself is
/// at round-off.
pub fn conservation_ratio<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    scheme: &MultistepScheme,
    dt: f64,
    record: &TrajectoryRecord,
    cbar: &crate::sparse::SparseMatrix,
    rel: f64,
) -> Result<f64> {
    let vel: Vec<DVector<f64>> = record
        .states
        .iter()
        .zip(&record.times)
        .map(|(s, &t)| model::velocity(model, s, t))
        .collect::<Result<_>>()?;
    let mut worst = 0.0_f64;
    for n in 1..record.states.len() {
        let sch = scheme.at_step(n);
        let k = sch.steps();
        let hs: Vec<DVector<f64>> = (1..=k).map(|j| record.states[n - j].clone()).collect();
        let hv: Vec<DVector<f64>> = (1..=k).map(|j| vel[n - j].clone()).collect();
        let r = multistep_residual(&sch, dt, &hs, &hv, &record.states[n], &vel[n])?;
        let r0 = multistep_residual(&sch, dt, &hs, &hv, &record.states[n - 1], &vel[n - 1])?;
        let floor = residual_floor(model, &sch, dt, record.times[n], &hs)?;
        worst = worst.max(cbar.mul_vec(&r).norm() / (rel * r0.norm()).max(floor));
    }
    Ok(worst)
}

/// Largest column-wise relative difference between the reduced residual
/// Jacobian `Ψ = ∂rⁿ/∂w Φ` and central differences of `rⁿ(u⁰ + Φû)`.
#[allow(clippy::too_many_arguments)]
pub fn test_basis_fd_error<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    scheme: &MultistepScheme,
    dt: f64,
    t: f64,
    history: &[DVector<f64>],
    uhat: &DVector<f64>,
) -> Result<f64> {
    let spec = RomSpec {
        projection: Projection::Lspg,
        objective: ObjectiveSpec::exact(),
        constraint: ConstraintSpec::none(),
    };
    let problem = RomProblem::new(model, phi, u0, &spec, None, RomOptions::default())?;
    let hist = history
        .iter()
        .enumerate()
        .map(|(j, u)| problem.history_entry(u, t - (j + 1) as f64 * dt))
        .collect::<Result<Vec<_>>>()?;
    let lin = problem.linearization(scheme, dt, t, &hist, uhat)?;
    let h = 1e-7 * (u0 + phi * uhat).norm().max(1.0);
    let mut worst = 0.0_f64;
    for k in 0..phi.ncols() {
        let mut up = uhat.clone();
        let mut um = uhat.clone();
        up[k] += h;
        um[k] -= h;
        let yp = problem.linearization(scheme, dt, t, &hist, &up)?.y;
        let ym = problem.linearization(scheme, dt, t, &hist, &um)?.y;
        let fd = (yp - ym) / (2.0 * h);
        let col = lin.psi.column(k);
        worst = worst.max((&fd - col).norm() / col.norm());
    }
    Ok(worst)
}

/// Relative conservation tolerance inherited from the full-order Newton
/// tolerance.
pub const FOM_CONSERVATION_TOL: f64 = 1e-5;

/// FOM conservation over several decompositions, the test-basis Jacobian and
/// gappy interpolation, at the configured online parameter.
pub fn run_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let model = cfg.model_at(cfg.mu)?;
    let scheme = cfg.scheme();
    let dt = cfg.discretization.dt;
    let fom = run_fom(cfg, cfg.mu)?;
    let nc = model.mesh().n_cells();
    let mut subdomains: Vec<usize> = [1, 3, 10, nc].into_iter().filter(|&n| n <= nc).collect();
    subdomains.dedup();
    for n in subdomains {
        let d = build_decomposition(model.mesh(), n, model.n_vars())?;
        let ratio = conservation_ratio(&model, &scheme, dt, &fom.record, &d.cbar, FOM_CONSERVATION_TOL)?;
        out.push(CheckResult::new(format!("fom-conservation-{n}-subdomains"), ratio, 1.0));
    }

    let u0 = &fom.record.states[0];
    let mut snaps = SnapshotSet::new(SnapshotKind::State);
    snaps.push_states(&fom.record.states[1..], u0, cfg.mu)?;
    let p = cfg.bases.p.min(snaps.len());
    let phi = match pod(&snaps, p) {
        Ok(b) => b.phi,
        Err(_) => pod(&snaps, 1)?.phi,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0_f64;
    let n_steps = fom.record.completed_steps();
    for _ in 0..10 {
        if n_steps == 0 {
            break;
        }
        let n = rng.random_range(1..=n_steps);
        let mut uhat = phi.tr_mul(&(&fom.record.states[n] - u0));
        let scale = 1e-3 * uhat.norm();
        uhat.iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
        let sch = scheme.at_step(n);
        let history: Vec<DVector<f64>> = (1..=sch.steps()).map(|j| phi.tr_mul(&(&fom.record.states[n - j] - u0))).collect();
        worst = worst.max(test_basis_fd_error(&model, &phi, u0, &sch, dt, fom.record.times[n], &history, &uhat)?);
    }
    out.push(CheckResult::new("test-basis-finite-difference", worst, 1e-4));

    let n = model.n_dofs();
    let m = 8.min(n);
    let basis = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)).qr().q();
    let mut rows: Vec<usize> = Vec::new();
    while rows.len() < m {
        let r = rng.random_range(0..n);
        if !rows.contains(&r) {
            rows.push(r);
        }
    }
    rows.sort_unstable();
    let op = gappy_reconstructor(&basis, &rows)?;
    let mut gap = 0.0_f64;
    for _ in 0..100 {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let rec = op.apply(&v);
        let err = rows.iter().map(|&r| (rec[r] - v[r]).powi(2)).sum::<f64>().sqrt();
        let norm = rows.iter().map(|&r| v[r] * v[r]).sum::<f64>().sqrt();
        gap = gap.max(err / norm);
    }
    out.push(CheckResult::new("gappy-interpolation", gap, 1e-10));
    Ok(out)
}
