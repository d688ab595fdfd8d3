//! Accuracy and conservation metrics for reduced trajectories, and
//! diagnostics for the conservative formulations.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conservative::RomRun;
use crate::error::{Error, Result};
use crate::fv::DecomposedMesh;
use crate::io::{self, fmt_g17};
use crate::linalg::SortedSvd;
use crate::model::{self, FiniteVolumeModel};
use crate::sparse::SparseMatrix;
use crate::time::{multistep_residual, MultistepScheme, TrajectoryRecord};

/// Time-instantaneous metrics at step `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub n: usize,
    /// `‖uⁿ − ũⁿ‖ / ‖uⁿ‖`.
    pub e_u: f64,
    /// Same in the globally conserved variables.
    pub e_u_global: f64,
    /// `‖C̄_global rⁿ(ũⁿ)‖`.
    pub violation: f64,
}

/// Mean-squared errors over the completed steps of a reduced trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub e_u: f64,
    pub e_u_global: f64,
    /// `sqrt(Σₙ ‖C̄_global rⁿ(ũⁿ)‖²)`.
    pub e_r_global: f64,
    pub series: Vec<MetricRow>,
    pub wall_time: f64,
    /// First time index that was not computed, when the run ended early.
    pub failure_index: Option<usize>,
}

/// Compares a reduced trajectory with the full-order reference. Sums run over
/// the completed steps `n ≥ 1` of `rom`; the global conservation violation
/// uses the full-order residual with the reduced history.
pub fn compare<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    scheme: &MultistepScheme,
    dt: f64,
    fom: &TrajectoryRecord,
    rom: &TrajectoryRecord,
    global: &DecomposedMesh,
) -> Result<MetricReport> {
    if rom.states.len() > fom.states.len() {
        return Err(Error::InvalidInput(format!(
            "reduced trajectory has {} states, reference only {}",
            rom.states.len(),
            fom.states.len()
        )));
    }
    for (k, (a, b)) in rom.times.iter().zip(&fom.times).enumerate() {
        if (a - b).abs() > 1e-9 * dt.max(b.abs()) {
            return Err(Error::InvalidInput(format!("time grids differ at index {k}: {a} vs {b}")));
        }
    }
    if !global.is_global() {
        return Err(Error::InvalidInput("global metrics need the single-subdomain decomposition".into()));
    }
    let cg = &global.cbar;
    let velocities: Vec<DVector<f64>> = rom
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| model::velocity(model, s, rom.times.get(k).copied().unwrap_or(k as f64 * dt)))
        .collect::<Result<_>>()?;

    let mut series = Vec::with_capacity(rom.completed_steps());
    let (mut num, mut den, mut gnum, mut gden, mut viol) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for n in 1..rom.states.len() {
        let (u, w) = (&fom.states[n], &rom.states[n]);
        let diff = u - w;
        let gd = cg.mul_vec(&diff);
        let gu = cg.mul_vec(u);
        num += diff.norm_squared();
        den += u.norm_squared();
        gnum += gd.norm_squared();
        gden += gu.norm_squared();

        let sch = scheme.at_step(n);
        let k = sch.steps();
        let states: Vec<DVector<f64>> = (1..=k).map(|j| rom.states[n - j].clone()).collect();
        let vels: Vec<DVector<f64>> = (1..=k).map(|j| velocities[n - j].clone()).collect();
        let r = multistep_residual(&sch, dt, &states, &vels, w, &velocities[n])?;
        let v = cg.mul_vec(&r).norm();
        viol += v * v;
        series.push(MetricRow {
            n,
            e_u: diff.norm() / u.norm(),
            e_u_global: gd.norm() / gu.norm(),
            violation: v,
        });
    }
    let failure_index = rom
        .failure
        .as_ref()
        .map(|f| f.step)
        .or_else(|| (rom.states.len() < fom.states.len()).then_some(rom.states.len()));
    Ok(MetricReport {
        e_u: (num / den).sqrt(),
        e_u_global: (gnum / gden).sqrt(),
        e_r_global: viol.sqrt(),
        series,
        wall_time: rom.wall_time,
        failure_index,
    })
}

impl MetricReport {
    /// `key=value` lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "e_u={}", fmt_g17(self.e_u));
        let _ = writeln!(s, "e_u_global={}", fmt_g17(self.e_u_global));
        let _ = writeln!(s, "e_r_global={}", fmt_g17(self.e_r_global));
        let _ = writeln!(s, "wall_time={}", fmt_g17(self.wall_time));
        let _ = writeln!(s, "steps={}", self.series.len());
        let _ = writeln!(s, "failure_index={}", self.failure_index.map_or("none".to_string(), |i| i.to_string()));
        s
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.summary())
    }

    /// Per-step series as CSV with header `n,e_u,e_u_global,violation`.
    pub fn write_series_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = ["n", "e_u", "e_u_global", "violation"].iter().map(|s| s.to_string()).collect();
        let m = DMatrix::from_fn(self.series.len(), 4, |r, c| {
            let row = &self.series[r];
            match c {
                0 => row.n as f64,
                1 => row.e_u,
                2 => row.e_u_global,
                _ => row.violation,
            }
        });
        io::write_matrix_csv(path, &header, &m)
    }
}

/// Agreement of a conservative Galerkin run with a conservative LSPG run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `maxₙ ‖û_Gⁿ − û_Pⁿ‖₂`.
    pub max_state_discrepancy: f64,
    /// `maxₙ ‖λ_Pⁿ − Σⱼ αⱼ λ_G^{n−j}‖₂ / max(1, maxₙ ‖λ_Pⁿ‖₂)`.
    pub max_multiplier_residual: f64,
}

/// Compares conservative Galerkin and conservative LSPG runs of one model and
/// time grid. The multiplier relation needs the integrated Galerkin
/// multipliers of `galerkin`.
pub fn equivalence_diagnostic(galerkin: &RomRun, lspg: &RomRun, scheme: &MultistepScheme) -> Result<EquivalenceReport> {
    let (g, p) = (&galerkin.record, &lspg.record);
    if g.generalized.len() != p.generalized.len() {
        return Err(Error::InvalidInput(format!(
            "runs differ in length: {} vs {} states",
            g.generalized.len(),
            p.generalized.len()
        )));
    }
    if g.times != p.times {
        return Err(Error::InvalidInput("runs use different time grids".into()));
    }
    let max_state_discrepancy = g
        .generalized
        .iter()
        .zip(&p.generalized)
        .map(|(a, b)| {
            if a.len() != b.len() {
                f64::INFINITY
            } else {
                (a - b).norm()
            }
        })
        .fold(0.0, f64::max);
    let lg = &galerkin.galerkin_multipliers;
    let mut worst = 0.0_f64;
    let mut scale = 1.0_f64;
    if !lspg.multipliers.is_empty() {
        if lg.len() != lspg.multipliers.len() + 1 {
            return Err(Error::InvalidInput("Galerkin run has no integrated multipliers to compare".into()));
        }
        for (k, lp) in lspg.multipliers.iter().enumerate() {
            let n = k + 1;
            let sch = scheme.at_step(n);
            let mut acc = DVector::zeros(lp.len());
            for (j, a) in sch.alpha().iter().enumerate() {
                acc.axpy(*a, &lg[n - j], 1.0);
            }
            worst = worst.max((lp - acc).norm());
            scale = scale.max(lp.norm());
        }
    }
    Ok(EquivalenceReport {
        max_state_discrepancy,
        max_multiplier_residual: worst / scale,
    })
}

/// Numerical rank of `C̄Φ` with the pseudoinverse tolerance, and whether it
/// has full row rank (a sufficient condition for feasible constraints).
pub fn feasibility_rank_diagnostic(cbar: &SparseMatrix, phi: &DMatrix<f64>) -> Result<(usize, bool)> {
    if cbar.ncols() != phi.nrows() {
        return Err(Error::dim("C̄Φ product", cbar.ncols(), phi.nrows()));
    }
    let cphi = cbar.mul_dense(phi);
    let rank = SortedSvd::new(&cphi).rank();
    Ok((rank, rank == cphi.nrows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fv::build_decomposition;
    use crate::linear::LinearAdvection;
    use crate::time::{integrate_fom, FomOptions, TimeGrid};

    fn toy() -> LinearAdvection {
        LinearAdvection::new(1.0, 10, vec![1.0, 0.5], 0.3, vec![1.0, -0.5]).unwrap()
    }

    fn reference() -> (LinearAdvection, TrajectoryRecord, DecomposedMesh) {
        let m = toy();
        let u0 = DVector::from_fn(m.n_dofs(), |i, _| 1.0 + 0.1 * i as f64);
        let grid = TimeGrid::new(0.05, 6).unwrap();
        let fom = integrate_fom(&m, &MultistepScheme::backward_euler(), &grid, &u0, &FomOptions::default()).unwrap();
        let d = build_decomposition(m.mesh(), 1, 2).unwrap();
        (m, fom, d)
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let (m, fom, d) = reference();
        let r = compare(&m, &MultistepScheme::backward_euler(), 0.05, &fom, &fom, &d).unwrap();
        assert_eq!(r.e_u, 0.0);
        assert_eq!(r.e_u_global, 0.0);
        assert!(r.e_r_global < 1e-10);
        assert_eq!(r.series.len(), 6);
        assert_eq!(r.failure_index, None);
    }

    #[test]
    fn zero_trajectory_has_unit_error() {
        let (m, fom, d) = reference();
        let mut zero = fom.clone();
        for s in zero.states.iter_mut() {
            s.fill(0.0);
        }
        let r = compare(&m, &MultistepScheme::backward_euler(), 0.05, &fom, &zero, &d).unwrap();
        assert!((r.e_u - 1.0).abs() < 1e-15);
        assert!((r.e_u_global - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_runs_report_the_failure_index() {
        let (m, fom, d) = reference();
        let mut short = fom.clone();
        short.states.truncate(4);
        short.times.truncate(4);
        let r = compare(&m, &MultistepScheme::backward_euler(), 0.05, &fom, &short, &d).unwrap();
        assert_eq!(r.series.len(), 3);
        assert_eq!(r.failure_index, Some(4));
        assert!(r.summary().contains("failure_index=4"));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let (m, fom, d) = reference();
        let mut other = fom.clone();
        other.times[2] += 0.01;
        assert!(compare(&m, &MultistepScheme::backward_euler(), 0.05, &fom, &other, &d).is_err());
    }

    #[test]
    fn rank_diagnostic() {
        let m = toy();
        let d = build_decomposition(m.mesh(), 1, 2).unwrap();
        let n = m.n_dofs();
        let phi = DMatrix::from_fn(n, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + (i == j) as u8 as f64);
        let (rank, full) = feasibility_rank_diagnostic(&d.cbar, &phi).unwrap();
        assert_eq!(rank, 2);
        assert!(full);
        // columns with zero subdomain sums are invisible to the constraints
        let mut orth = DMatrix::zeros(n, 2);
        orth[(0, 0)] = 1.0;
        orth[(1, 0)] = -1.0;
        orth[(12, 1)] = 1.0;
        orth[(13, 1)] = -1.0;
        assert_eq!(feasibility_rank_diagnostic(&d.cbar, &orth).unwrap(), (0, false));
    }
}
