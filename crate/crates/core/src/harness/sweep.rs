//! Parameter sweeps over methods and basis sizes, with Pareto extraction.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::config::{BasisConfig, Method, RunConfig};
use super::pipeline::{evaluate, train, FomRun, Trained};
use crate::error::{Error, Result};
use crate::io::{self, fmt_g17};

/// One sweep point and its outcome. Metrics are NaN for runs that failed
/// before producing a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub bases: BasisConfig,
    pub n_subdomains: usize,
    pub rho: f64,
    pub e_u: f64,
    pub e_u_global: f64,
    pub e_r_global: f64,
    pub wall_time: f64,
    /// Completed every time step with finite errors.
    pub stable: bool,
}

/// Sweep points: the cross product of the sweep lists, with parameters a
/// method ignores collapsed to their first value and duplicates removed.
pub fn sweep_points(cfg: &RunConfig) -> Vec<(Method, BasisConfig, usize, f64)> {
    let s = &cfg.sweep;
    let mut out: Vec<(Method, BasisConfig, usize, f64)> = Vec::new();
    for &method in &s.methods {
        let hyper = method.objective_tier() == 2;
        let flux = method.constraint_tier() == 2;
        let constrained = method.constraint_tier() > 0;
        for &p in &s.p {
            for &n_r in if hyper { &s.n_r[..] } else { &s.n_r[..1] } {
                for &n_h in if flux { &s.n_h[..] } else { &s.n_h[..1] } {
                    for &n_cells in if hyper { &s.n_sample_cells[..] } else { &s.n_sample_cells[..1] } {
                        for &n_sub in if constrained { &s.n_subdomains[..] } else { &s.n_subdomains[..1] } {
                            for &rho in if constrained { &s.rho[..] } else { &s.rho[..1] } {
                                let bases = BasisConfig {
                                    p,
                                    n_r,
                                    n_h,
                                    n_s: n_h,
                                    n_sample_cells: n_cells,
                                };
                                let point = (method, bases, n_sub, rho);
                                if !out.iter().any(|q| q.0 == point.0 && q.1 == point.1 && q.2 == point.2 && q.3.to_bits() == point.3.to_bits()) {
                                    out.push(point);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs every sweep point on up to `jobs` threads. Training is shared across
/// points with equal basis settings; failed runs are recorded as unstable.
pub fn run_sweep(cfg: &RunConfig, foms: &[FomRun], reference: &FomRun, jobs: usize) -> Result<Vec<SweepRow>> {
    let points = sweep_points(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let mut distinct: Vec<BasisConfig> = Vec::new();
    for p in &points {
        if !distinct.contains(&p.1) {
            distinct.push(p.1);
        }
    }
    pool.install(|| {
        let trained: HashMap<BasisConfig, std::result::Result<Trained, String>> = distinct
            .par_iter()
            .map(|&b| {
                let mut c = cfg.clone();
                c.bases = b;
                (b, train(&c, foms).map_err(|e| e.to_string()))
            })
            .collect();
        let rows = points
            .par_iter()
            .map(|&(method, bases, n_sub, rho)| {
                let mut c = cfg.clone();
                c.bases = bases;
                c.rom.method = method;
                c.rom.n_subdomains = n_sub;
                c.rom.rho = rho;
                let outcome = match &trained[&bases] {
                    Ok(t) => c.validate().and_then(|_| evaluate(&c, method, t, reference)).map_err(|e| e.to_string()),
                    Err(e) => Err(e.clone()),
                };
                match outcome {
                    Ok((run, report)) => SweepRow {
                        method,
                        bases,
                        n_subdomains: n_sub,
                        rho,
                        e_u: report.e_u,
                        e_u_global: report.e_u_global,
                        e_r_global: report.e_r_global,
                        wall_time: report.wall_time,
                        stable: run.record.failure.is_none() && report.failure_index.is_none() && report.e_u.is_finite(),
                    },
                    Err(reason) => {
                        log::warn!("sweep point {method} p={} failed: {reason}", bases.p);
                        SweepRow {
                            method,
                            bases,
                            n_subdomains: n_sub,
                            rho,
                            e_u: f64::NAN,
                            e_u_global: f64::NAN,
                            e_r_global: f64::NAN,
                            wall_time: f64::NAN,
                            stable: false,
                        }
                    }
                }
            })
            .collect();
        Ok(rows)
    })
}

/// Indices of the stable rows not dominated in `(wall_time, e_u)`.
pub fn pareto_front(rows: &[SweepRow]) -> Vec<usize> {
    let dominates = |a: &SweepRow, b: &SweepRow| a.wall_time <= b.wall_time && a.e_u <= b.e_u && (a.wall_time < b.wall_time || a.e_u < b.e_u);
    (0..rows.len())
        .filter(|&i| rows[i].stable && !rows.iter().any(|r| r.stable && dominates(r, &rows[i])))
        .collect()
}

pub const SWEEP_HEADER: &str = "method,p,n_r,n_h,n_s,n_sample_cells,n_subdomains,rho,e_u,e_u_global,e_r_global,wall_time,stable";

pub fn rows_to_csv<'a>(rows: impl IntoIterator<Item = &'a SweepRow>) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let b = r.bases;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method.name(),
            b.p,
            b.n_r,
            b.n_h,
            b.n_s,
            b.n_sample_cells,
            r.n_subdomains,
            fmt_g17(r.rho),
            fmt_g17(r.e_u),
            fmt_g17(r.e_u_global),
            fmt_g17(r.e_r_global),
            fmt_g17(r.wall_time),
            u8::from(r.stable)
        );
    }
    s
}

/// Writes `results.csv` (every row) and `pareto.csv` (the front) to `dir`.
pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    io::write_atomic(&dir.join("results.csv"), &rows_to_csv(rows))?;
    let front = pareto_front(rows);
    io::write_atomic(&dir.join("pareto.csv"), &rows_to_csv(front.iter().map(|&i| &rows[i])))
}
