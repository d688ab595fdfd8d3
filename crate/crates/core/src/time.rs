//! Linear multistep time discretization, Newton's method and the full-order
//! integrator.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{self, FiniteVolumeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    BackwardEuler,
    ForwardEuler,
    Bdf2,
    AdamsBashforth2,
}

/// `Σ_j α_j u^{n−j} = Δt Σ_j β_j f(u^{n−j})`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultistepScheme {
    name: String,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl MultistepScheme {
    pub fn new(name: &str, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 || alpha.len() != beta.len() {
            return Err(Error::InvalidInput(format!(
                "scheme {name}: need matching coefficient lists of length >= 2"
            )));
        }
        if alpha[0] == 0.0 {
            return Err(Error::InvalidInput(format!("scheme {name}: alpha_0 must be nonzero")));
        }
        let sum: f64 = alpha.iter().sum();
        let scale: f64 = alpha.iter().map(|a| a.abs()).sum();
        if sum.abs() > 1e-14 * scale {
            return Err(Error::InvalidInput(format!(
                "scheme {name}: alpha coefficients sum to {sum}, consistency requires 0"
            )));
        }
        Ok(MultistepScheme {
            name: name.into(),
            alpha,
            beta,
        })
    }

    pub fn from_kind(kind: SchemeKind) -> Self {
        match kind {
            SchemeKind::BackwardEuler => Self::backward_euler(),
            SchemeKind::ForwardEuler => Self::forward_euler(),
            SchemeKind::Bdf2 => Self::bdf2(),
            SchemeKind::AdamsBashforth2 => Self::adams_bashforth2(),
        }
    }

    pub fn backward_euler() -> Self {
        Self::new("backward-euler", vec![1.0, -1.0], vec![1.0, 0.0]).expect("valid")
    }

    pub fn forward_euler() -> Self {
        Self::new("forward-euler", vec![1.0, -1.0], vec![0.0, 1.0]).expect("valid")
    }

    pub fn bdf2() -> Self {
        Self::new("bdf2", vec![1.0, -4.0 / 3.0, 1.0 / 3.0], vec![2.0 / 3.0, 0.0, 0.0]).expect("valid")
    }

    pub fn adams_bashforth2() -> Self {
        Self::new("adams-bashforth2", vec![1.0, -1.0, 0.0], vec![0.0, 1.5, -0.5]).expect("valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of steps `k`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn is_implicit(&self) -> bool {
        self.beta[0] != 0.0
    }

    /// Scheme to use at step `n` (1-based) given the history available:
    /// multistep methods start with backward Euler, explicit ones with forward
    /// Euler so the start-up stays explicit.
    pub fn at_step(&self, n: usize) -> MultistepScheme {
        if n >= self.steps() {
            self.clone()
        } else if self.is_implicit() {
            Self::backward_euler()
        } else {
            Self::forward_euler()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        Ok(TimeGrid { dt, n_steps })
    }

    /// Uniform grid reaching `final_time` (rounded to the nearest step count).
    pub fn from_final_time(dt: f64, final_time: f64) -> Result<Self> {
        if !(final_time >= 0.0) {
            return Err(Error::InvalidInput(format!("final time must be nonnegative, got {final_time}")));
        }
        Self::new(dt, (final_time / dt).round() as usize)
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
}

/// `Σ_{j≥1} (α_j u^{n−j} − Δt β_j f(u^{n−j}))`; `states[0]` is `u^{n−1}`.
pub fn history_term(scheme: &MultistepScheme, dt: f64, states: &[DVector<f64>], velocities: &[DVector<f64>]) -> Result<DVector<f64>> {
    let k = scheme.steps();
    if states.len() < k || velocities.len() < k {
        return Err(Error::dim("multistep history", k, states.len().min(velocities.len())));
    }
    let n = states[0].len();
    let mut acc = DVector::zeros(n);
    for j in 1..=k {
        if states[j - 1].len() != n || velocities[j - 1].len() != n {
            return Err(Error::dim("multistep history entry", n, states[j - 1].len()));
        }
        acc.axpy(scheme.alpha[j], &states[j - 1], 1.0);
        if scheme.beta[j] != 0.0 {
            acc.axpy(-dt * scheme.beta[j], &velocities[j - 1], 1.0);
        }
    }
    Ok(acc)
}

/// `r^n(w) = α_0 w − Δt β_0 f(w) + Σ_{j≥1} (α_j u^{n−j} − Δt β_j f(u^{n−j}))`.
pub fn multistep_residual(
    scheme: &MultistepScheme,
    dt: f64,
    states: &[DVector<f64>],
    velocities: &[DVector<f64>],
    w: &DVector<f64>,
    fw: &DVector<f64>,
) -> Result<DVector<f64>> {
    let hist = history_term(scheme, dt, states, velocities)?;
    if w.len() != hist.len() || fw.len() != hist.len() {
        return Err(Error::dim("multistep residual", hist.len(), w.len()));
    }
    Ok(residual_from_history(scheme, dt, &hist, w, fw))
}

pub(crate) fn residual_from_history(scheme: &MultistepScheme, dt: f64, hist: &DVector<f64>, w: &DVector<f64>, fw: &DVector<f64>) -> DVector<f64> {
    let mut r = hist.clone();
    r.axpy(scheme.alpha[0], w, 1.0);
    if scheme.beta[0] != 0.0 {
        r.axpy(-dt * scheme.beta[0], fw, 1.0);
    }
    r
}

/// `∂r/∂w = α_0 I − Δt β_0 ∂f/∂w`.
pub fn residual_jacobian(scheme: &MultistepScheme, dt: f64, dfdw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = dfdw.nrows();
    DMatrix::identity(n, n) * scheme.alpha[0] - dfdw * (dt * scheme.beta[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub rel_tol: f64,
    /// Absolute floor below which the residual counts as converged regardless
    /// of the relative criterion (0 disables it).
    pub abs_tol: f64,
    pub max_iter: usize,
    /// Step-length policy applied to each Newton correction.
    pub line_search: LineSearch,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            rel_tol: 1e-5,
            abs_tol: 0.0,
            max_iter: 50,
            line_search: LineSearch::Full,
        }
    }
}

/// How a Newton correction is scaled before it is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineSearch {
    /// Always take the unit step.
    Full,
    /// Halve the step (at most `max_halvings` times) while the trial state is
    /// nonphysical.
    Admissible { max_halvings: u32 },
    /// Halve while the trial state is nonphysical or the residual norm grows.
    Monotone { max_halvings: u32 },
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub initial_norm: f64,
    pub final_norm: f64,
    /// Residuals at the iterates that did not yet satisfy the tolerance.
    pub unconverged_residuals: Vec<DVector<f64>>,
}

/// Newton's method with unit step length. `step(w, r)` must return the
/// correction `δ` solving `J(w) δ = −r`.
pub fn newton_solve<R, S>(mut residual: R, mut step: S, w_init: &DVector<f64>, opts: &NewtonOptions, keep_residuals: bool) -> Result<NewtonOutcome>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    S: FnMut(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    if w_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("Newton initial guess is not finite".into()));
    }
    let mut w = w_init.clone();
    let mut r = residual(&w)?;
    let r0 = r.norm();
    let target = (opts.rel_tol * r0).max(opts.abs_tol);
    let mut kept = Vec::new();
    let mut it = 0;
    let mut norm = r0;
    while norm > target && it < opts.max_iter {
        if keep_residuals {
            kept.push(r.clone());
        }
        let delta = step(&w, &r)?;
        let (w_new, r_new) = apply_step(&mut residual, &w, &delta, norm, opts.line_search)?;
        w = w_new;
        r = r_new;
        norm = r.norm();
        it += 1;
        if !norm.is_finite() {
            return Err(Error::Singular("Newton iteration produced a non-finite residual"));
        }
    }
    Ok(NewtonOutcome {
        x: w,
        iterations: it,
        converged: norm <= target,
        initial_norm: r0,
        final_norm: norm,
        unconverged_residuals: kept,
    })
}

fn apply_step<R>(residual: &mut R, w: &DVector<f64>, delta: &DVector<f64>, norm: f64, policy: LineSearch) -> Result<(DVector<f64>, DVector<f64>)>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let (max_halvings, monotone) = match policy {
        LineSearch::Full => {
            let w_new = w + delta;
            let r = residual(&w_new)?;
            return Ok((w_new, r));
        }
        LineSearch::Admissible { max_halvings } => (max_halvings, false),
        LineSearch::Monotone { max_halvings } => (max_halvings, true),
    };
    let mut lambda = 1.0;
    for attempt in 0..=max_halvings {
        let trial = w + delta * lambda;
        let last = attempt == max_halvings;
        match residual(&trial) {
            Ok(r) => {
                if !monotone || r.norm() < norm || last {
                    return Ok((trial, r));
                }
            }
            Err(e @ Error::ModelFailure { .. }) if last => return Err(e),
            Err(Error::ModelFailure { .. }) => {}
            Err(e) => return Err(e),
        }
        lambda *= 0.5;
    }
    unreachable!("loop returns on the final attempt")
}

/// Newton with a dense Jacobian callback.
pub fn newton_solve_dense<R, J>(residual: R, mut jacobian: J, w_init: &DVector<f64>, opts: &NewtonOptions) -> Result<NewtonOutcome>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    newton_solve(
        residual,
        |w, r| {
            let jac = jacobian(w)?;
            crate::linalg::solve_dense(&jac, &(-r), "Newton step")
        },
        w_init,
        opts,
        false,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepFailure {
    /// Time index whose solve failed (1-based).
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Generalized coordinates for reduced models.
    pub generalized: Vec<DVector<f64>>,
    pub newton_iters: Vec<usize>,
    /// Residual snapshots collected from unconverged Newton iterates.
    pub residual_snapshots: Vec<DVector<f64>>,
    pub wall_time: f64,
    pub failure: Option<StepFailure>,
}

impl TrajectoryRecord {
    pub fn completed_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_complete(&self, grid: &TimeGrid) -> bool {
        self.failure.is_none() && self.completed_steps() == grid.n_steps
    }

    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.states.first().map_or(0, |s| s.len());
        DMatrix::from_fn(self.states.len(), n + 1, |r, c| if c == 0 { self.times[r] } else { self.states[r][c - 1] })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("dof_{i}")));
        io::write_matrix_csv(path, &header, &self.state_matrix())
    }

    pub fn write_generalized_csv(&self, path: &Path) -> Result<()> {
        let p = self.generalized.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..p).map(|i| format!("uhat_{i}")));
        let m = DMatrix::from_fn(self.generalized.len(), p + 1, |r, c| {
            if c == 0 {
                self.times[r]
            } else {
                self.generalized[r][c - 1]
            }
        });
        io::write_matrix_csv(path, &header, &m)
    }

    /// Reads the `t,dof_0,...` layout back.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, m) = io::read_matrix_csv(path)?;
        if header.first().map(String::as_str) != Some("t") {
            return Err(Error::Parse {
                file: path.display().to_string(),
                reason: "first column must be t".into(),
            });
        }
        Ok(TrajectoryRecord {
            times: m.column(0).iter().copied().collect(),
            states: (0..m.nrows())
                .map(|r| DVector::from_iterator(m.ncols() - 1, m.row(r).iter().skip(1).copied()))
                .collect(),
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FomOptions {
    pub newton: NewtonOptions,
    pub record_residuals: bool,
    /// Retry failed steps with continuation in the time-step weight.
    pub continuation: bool,
}

impl Default for FomOptions {
    fn default() -> Self {
        FomOptions {
            newton: NewtonOptions::default(),
            record_residuals: false,
            continuation: true,
        }
    }
}

/// Multiple of machine epsilon defining the residual round-off floor.
pub const ROUNDOFF_FACTOR: f64 = 100.0;

/// Round-off floor of the residual at the current instance:
/// `100 ε (Σ_j |α_j| ‖u^{n−j}‖ + Δt Σ_j |β_j| ‖|B||h| + |f^s|‖)`, with the
/// velocity magnitude of the newest history state standing in for all terms.
/// Residual norms below it carry no information.
pub fn residual_floor<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    scheme: &MultistepScheme,
    dt: f64,
    t: f64,
    states: &[DVector<f64>],
) -> Result<f64> {
    let k = scheme.steps();
    let mut state_part = scheme.alpha()[0].abs() * states[0].norm();
    for j in 1..=k {
        state_part += scheme.alpha()[j].abs() * states[j - 1].norm();
    }
    let beta_sum: f64 = scheme.beta().iter().map(|b| b.abs()).sum();
    let vel = velocity_magnitude_or_zero(model, &states[0], t, beta_sum);
    Ok(ROUNDOFF_FACTOR * f64::EPSILON * (state_part + dt * beta_sum * vel?))
}

fn velocity_magnitude_or_zero<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, t: f64, beta_sum: f64) -> Result<f64> {
    if beta_sum == 0.0 {
        Ok(0.0)
    } else {
        model::velocity_magnitude(model, u, t)
    }
}

/// Continuation increments in the time-step weight.
const CONTINUATION_FIRST_INCREMENT: f64 = 0.01;
const CONTINUATION_MIN_INCREMENT: f64 = 1e-6;
/// Newton iterations allowed per continuation level.
const CONTINUATION_LEVEL_MAX_ITER: usize = 6;

/// Solves one time instance of the full-order O∆E by Newton's method, using the
/// previous state as initial guess. When the unit-step iteration fails and
/// continuation is enabled, the step is re-solved by continuation in the
/// time-step weight: `r_s(w) = α_0 w + Σ_j α_j u^{n−j} − s Δt Σ_j β_j f^{n−j}`
/// is solved for `s` increasing from 0 (where the solution is explicit) to 1,
/// each level starting Newton from the previous one, with the increment grown
/// after successes and halved after failures. The final level uses the same
/// convergence test as the unit-step iteration.
pub fn fom_step<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    scheme: &MultistepScheme,
    dt: f64,
    t: f64,
    states: &[DVector<f64>],
    velocities: &[DVector<f64>],
    opts: &FomOptions,
) -> Result<NewtonOutcome> {
    let hist = history_term(scheme, dt, states, velocities)?;
    let (a0, b0) = (scheme.alpha()[0], scheme.beta()[0]);
    let (nc, nv) = (model.mesh().n_cells(), model.n_vars());
    let mut newton = opts.newton;
    newton.abs_tol = newton.abs_tol.max(residual_floor(model, scheme, dt, t, states)?);
    // Residual and Newton correction of the problem at weight `s`.
    let state_hist = history_term(scheme, dt, states, &vec![DVector::zeros(hist.len()); velocities.len()])?;
    let vel_hist = &hist - &state_hist;
    let residual_at = |s: f64, w: &DVector<f64>| -> Result<DVector<f64>> {
        let fw = if b0 != 0.0 { model::velocity(model, w, t)? } else { DVector::zeros(w.len()) };
        let h = &state_hist + &vel_hist * s;
        Ok(residual_from_history(scheme, s * dt, &h, w, &fw))
    };
    let step_at = |s: f64, w: &DVector<f64>, r: &DVector<f64>| -> Result<DVector<f64>> {
        if b0 == 0.0 {
            return Ok(-r / a0);
        }
        let jac = model::velocity_jacobian(model, w, t)?;
        model::solve_shifted(&jac, a0, -s * dt * b0, nc, nv, &(-r))
    };
    let first = newton_solve(|w| residual_at(1.0, w), |w, r| step_at(1.0, w, r), &states[0], &newton, opts.record_residuals);
    let r0 = match first {
        Ok(out) if out.converged => return Ok(out),
        Ok(out) if opts.continuation && b0 != 0.0 => out.initial_norm,
        Err(Error::ModelFailure { .. }) | Err(Error::Singular(_)) if opts.continuation && b0 != 0.0 => residual_at(1.0, &states[0])?.norm(),
        other => return other,
    };
    log::debug!("unit-step Newton failed at t = {t}; retrying with continuation");

    let mut w = -&state_hist / a0;
    let mut s = 0.0;
    let mut ds = CONTINUATION_FIRST_INCREMENT;
    let mut iterations = 0;
    // A level needing many iterations may have left the branch; it is
    // retried with a smaller increment instead.
    let level = NewtonOptions {
        max_iter: CONTINUATION_LEVEL_MAX_ITER,
        line_search: LineSearch::Monotone { max_halvings: 10 },
        ..newton
    };
    while s < 1.0 {
        if ds < CONTINUATION_MIN_INCREMENT {
            return Ok(NewtonOutcome {
                x: states[0].clone(),
                iterations,
                converged: false,
                initial_norm: r0,
                final_norm: f64::INFINITY,
                unconverged_residuals: Vec::new(),
            });
        }
        let s_next = (s + ds).min(1.0);
        let out = newton_solve(|w| residual_at(s_next, w), |w, r| step_at(s_next, w, r), &w, &level, false);
        match out {
            Ok(out) if out.converged => {
                log::trace!("continuation level s = {s_next:.6}: {} iterations", out.iterations);
                iterations += out.iterations;
                w = out.x;
                s = s_next;
                ds *= 2.0;
            }
            Ok(_) | Err(Error::ModelFailure { .. }) | Err(Error::Singular(_)) => ds *= 0.5,
            Err(e) => return Err(e),
        }
    }
    // Polish at full weight against the original convergence test.
    let fin = NewtonOptions {
        rel_tol: 0.0,
        abs_tol: (newton.rel_tol * r0).max(newton.abs_tol),
        ..newton
    };
    let out = newton_solve(|w| residual_at(1.0, w), |w, r| step_at(1.0, w, r), &w, &fin, opts.record_residuals)?;
    Ok(NewtonOutcome {
        iterations: iterations + out.iterations,
        initial_norm: r0,
        ..out
    })
}

/// Integrates the full-order model. Solver failures end the trajectory early
/// and are reported in the record rather than as an error.
pub fn integrate_fom<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    scheme: &MultistepScheme,
    grid: &TimeGrid,
    u0: &DVector<f64>,
    opts: &FomOptions,
) -> Result<TrajectoryRecord> {
    if u0.len() != model.n_dofs() {
        return Err(Error::dim("initial state", model.n_dofs(), u0.len()));
    }
    let start = Instant::now();
    let mut rec = TrajectoryRecord {
        times: vec![0.0],
        states: vec![u0.clone()],
        ..Default::default()
    };
    let mut vel = match model::velocity(model, u0, 0.0) {
        Ok(f) => vec![f],
        Err(e) => {
            rec.failure = Some(StepFailure {
                step: 0,
                reason: e.to_string(),
            });
            rec.wall_time = start.elapsed().as_secs_f64();
            return Ok(rec);
        }
    };
    for n in 1..=grid.n_steps {
        let sch = scheme.at_step(n);
        let k = sch.steps();
        let states: Vec<DVector<f64>> = rec.states.iter().rev().take(k).cloned().collect();
        let vels: Vec<DVector<f64>> = vel.iter().rev().take(k).cloned().collect();
        let t = grid.time(n);
        let outcome = fom_step(model, &sch, grid.dt, t, &states, &vels, opts).and_then(|out| {
            if out.converged {
                let f = model::velocity(model, &out.x, t)?;
                Ok((out, f))
            } else {
                Err(Error::Singular("Newton iteration did not converge"))
            }
        });
        match outcome {
            Ok((out, f)) => {
                log::debug!("fom step {n}: {} Newton iterations, |r| {:.3e} -> {:.3e}", out.iterations, out.initial_norm, out.final_norm);
                rec.residual_snapshots.extend(out.unconverged_residuals);
                rec.newton_iters.push(out.iterations);
                rec.times.push(t);
                rec.states.push(out.x);
                vel.push(f);
            }
            Err(e) => {
                log::warn!("fom step {n} failed: {e}");
                rec.failure = Some(StepFailure {
                    step: n,
                    reason: e.to_string(),
                });
                break;
            }
        }
    }
    rec.wall_time = start.elapsed().as_secs_f64();
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::LinearAdvection;

    #[test]
    fn scheme_construction_checks_consistency() {
        assert!(MultistepScheme::new("bad", vec![1.0, -0.9], vec![1.0, 0.0]).is_err());
        assert!(MultistepScheme::new("bad", vec![0.0, 0.0], vec![1.0, 0.0]).is_err());
        for s in [
            MultistepScheme::backward_euler(),
            MultistepScheme::forward_euler(),
            MultistepScheme::bdf2(),
            MultistepScheme::adams_bashforth2(),
        ] {
            assert!(s.alpha().iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(MultistepScheme::bdf2().is_implicit());
        assert!(!MultistepScheme::adams_bashforth2().is_implicit());
    }

    #[test]
    fn backward_euler_zero_velocity() {
        let s = MultistepScheme::backward_euler();
        let prev = DVector::from_vec(vec![1.0, 2.0]);
        let w = DVector::from_vec(vec![3.0, -1.0]);
        let z = DVector::zeros(2);
        let r = multistep_residual(&s, 0.1, std::slice::from_ref(&prev), std::slice::from_ref(&z), &w, &z).unwrap();
        assert_eq!(r, &w - &prev);
    }

    #[test]
    fn forward_euler_update_has_zero_residual() {
        let s = MultistepScheme::forward_euler();
        let prev = DVector::from_vec(vec![1.0, 2.0]);
        let fprev = DVector::from_vec(vec![-0.5, 4.0]);
        let w = &prev + &fprev * 0.1;
        let r = multistep_residual(&s, 0.1, &[prev], &[fprev], &w, &DVector::from_vec(vec![9.0, 9.0])).unwrap();
        assert!(r.amax() < 1e-15);
    }

    #[test]
    fn bdf2_scalar_expansion() {
        // f(u) = λu
        let (lam, dt) = (-0.7, 0.2);
        let (u1, u2, w) = (1.3, 1.1, 0.9);
        let s = MultistepScheme::bdf2();
        let v = |x: f64| DVector::from_element(1, x);
        let r = multistep_residual(&s, dt, &[v(u1), v(u2)], &[v(lam * u1), v(lam * u2)], &v(w), &v(lam * w)).unwrap();
        let hand = w - 4.0 / 3.0 * u1 + 1.0 / 3.0 * u2 - 2.0 / 3.0 * dt * lam * w;
        assert!((r[0] - hand).abs() < 1e-15);
    }

    #[test]
    fn residual_jacobian_forms() {
        let s = MultistepScheme::backward_euler();
        let z = DMatrix::zeros(3, 3);
        assert_eq!(residual_jacobian(&s, 0.1, &z), DMatrix::identity(3, 3));
        let l = DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64);
        assert_eq!(residual_jacobian(&s, 0.1, &l), DMatrix::identity(3, 3) - &l * 0.1);
    }

    #[test]
    fn newton_linear_and_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let out = newton_solve_dense(|w| Ok(&a * w - &b), |_| Ok(a.clone()), &DVector::zeros(2), &NewtonOptions::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);

        let mut trace = Vec::new();
        let opts = NewtonOptions {
            rel_tol: 1e-14,
            ..Default::default()
        };
        let out = newton_solve_dense(
            |w| {
                trace.push((w[0] - 2.0).abs());
                Ok(DVector::from_element(1, w[0] * w[0] - 4.0))
            },
            |w| Ok(DMatrix::from_element(1, 1, 2.0 * w[0])),
            &DVector::from_element(1, 3.0),
            &opts,
        )
        .unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-14);
        // quadratic convergence: e_{k+1} ≈ e_k² / (2·2)
        for w in trace.windows(2).filter(|w| w[0] > 1e-6) {
            assert!(w[1] <= 0.3 * w[0] * w[0] + 1e-15);
        }
    }

    #[test]
    fn zero_velocity_trajectory_is_constant() {
        // zero inflow and state with no decay still advects; use zero state
        let m = LinearAdvection::new(1.0, 5, vec![1.0], 0.0, vec![0.0]).unwrap();
        let grid = TimeGrid::new(0.1, 4).unwrap();
        let rec = integrate_fom(&m, &MultistepScheme::backward_euler(), &grid, &DVector::zeros(5), &FomOptions::default()).unwrap();
        assert!(rec.is_complete(&grid));
        assert!(rec.states.iter().all(|s| s.amax() == 0.0));
    }

    #[test]
    fn linear_backward_euler_closed_form() {
        let m = LinearAdvection::new(1.0, 8, vec![1.0, 0.3], 0.5, vec![1.0, 2.0]).unwrap();
        let (l, g) = m.affine_operator();
        let grid = TimeGrid::new(0.05, 6).unwrap();
        let u0 = DVector::from_fn(16, |k, _| (k as f64 * 0.4).sin());
        let opts = FomOptions {
            newton: NewtonOptions {
                rel_tol: 1e-13,
                ..Default::default()
            },
            record_residuals: true,
            continuation: true,
        };
        let rec = integrate_fom(&m, &MultistepScheme::backward_euler(), &grid, &u0, &opts).unwrap();
        let a = DMatrix::identity(16, 16) - &l * 0.05;
        let lu = a.lu();
        let mut u = u0;
        for n in 1..=6 {
            u = lu.solve(&(&u + &g * 0.05)).unwrap();
            assert!((&rec.states[n] - &u).amax() < 1e-12);
        }
        // linear: one Newton iteration per step, one residual snapshot each
        assert!(rec.newton_iters.iter().all(|&i| i == 1));
        assert_eq!(rec.residual_snapshots.len(), 6);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = TrajectoryRecord {
            times: vec![0.0, 0.01],
            states: vec![DVector::from_vec(vec![1.0 / 3.0, 2.0]), DVector::from_vec(vec![-1e-17, 5.5])],
            ..Default::default()
        };
        let p = dir.path().join("traj.csv");
        rec.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,dof_0,dof_1\n"));
        let back = TrajectoryRecord::read_csv(&p).unwrap();
        assert_eq!(back.times, rec.times);
        assert_eq!(back.states, rec.states);
    }
}
