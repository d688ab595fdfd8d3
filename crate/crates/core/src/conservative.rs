//! Conservation-constrained reduced models and the shared reduced time loop.
//!
//! A reduced model is a projection (Galerkin or LSPG), an objective channel
//! and optionally a constraint channel `c(û) = C̄ r̃(u⁰ + Φû)` over a decomposed
//! mesh. Constraints are enforced exactly (saddle-point / SQP iterations) or
//! through a quadratic penalty.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::{coarsen, DecomposedMesh};
use crate::io;
use crate::linalg::{solve_dense, SortedSvd};
use crate::model::FiniteVolumeModel;
use crate::rom::{self, cell_dofs, reconstruct_dofs, Channel, HyperKind, HyperOperators, ObjectiveSpec, Projection};
use crate::time::{MultistepScheme, StepFailure, TimeGrid, TrajectoryRecord, ROUNDOFF_FACTOR};

/// What to do when the linearized constraints admit no solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibilityPolicy {
    /// Drop one subdomain and continue from the current time instance.
    CoarsenResume,
    /// Drop one subdomain and restart the simulation.
    CoarsenRestart,
    /// Move the constraints into a penalty with the given weight.
    Penalty(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Enforcement {
    Hard(InfeasibilityPolicy),
    /// Penalty weight `ρ ≥ 0`; infinity keeps only the constraint term.
    Penalty(f64),
}

/// Tier-B constraints: 0 none, 1 exact `C̄r`, 2 hyper-reduced `C̄r̃̃`.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub tier: u8,
    pub decomposition: Option<DecomposedMesh>,
    /// Hyper-reduction of the constraint residual (tier 2 only).
    pub kind: HyperKind,
    pub enforcement: Enforcement,
}

impl ConstraintSpec {
    pub fn none() -> Self {
        ConstraintSpec {
            tier: 0,
            decomposition: None,
            kind: HyperKind::None,
            enforcement: Enforcement::Hard(InfeasibilityPolicy::CoarsenResume),
        }
    }

    pub fn exact(decomposition: DecomposedMesh, enforcement: Enforcement) -> Self {
        ConstraintSpec {
            tier: 1,
            decomposition: Some(decomposition),
            kind: HyperKind::None,
            enforcement,
        }
    }

    pub fn hyper(decomposition: DecomposedMesh, kind: HyperKind, enforcement: Enforcement) -> Self {
        ConstraintSpec {
            tier: 2,
            decomposition: Some(decomposition),
            kind,
            enforcement,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.tier {
            0 => Ok(()),
            1 | 2 => {
                if self.decomposition.is_none() {
                    return Err(Error::InvalidInput("constraints need a decomposed mesh".into()));
                }
                if self.tier == 1 && self.kind != HyperKind::None {
                    return Err(Error::InvalidInput("tier-1 constraints are exact".into()));
                }
                if self.tier == 2 && self.kind == HyperKind::None {
                    return Err(Error::InvalidInput("tier-2 constraints need a hyper-reduction kind".into()));
                }
                match self.enforcement {
                    Enforcement::Penalty(rho) if !(rho >= 0.0) => Err(Error::InvalidInput(format!("penalty weight must be >= 0, got {rho}"))),
                    Enforcement::Hard(InfeasibilityPolicy::Penalty(rho)) if !(rho >= 0.0) => {
                        Err(Error::InvalidInput(format!("fallback penalty weight must be >= 0, got {rho}")))
                    }
                    _ => Ok(()),
                }
            }
            t => Err(Error::InvalidInput(format!("constraint tier must be 0, 1 or 2, got {t}"))),
        }
    }

    pub fn n_subdomains(&self) -> Option<usize> {
        self.decomposition.as_ref().map(|d| d.n_subdomains())
    }
}

/// Projection, objective and constraints of a reduced model (tier `A-B`).
#[derive(Debug, Clone)]
pub struct RomSpec {
    pub projection: Projection,
    pub objective: ObjectiveSpec,
    pub constraint: ConstraintSpec,
}

impl RomSpec {
    pub fn tiers(&self) -> (u8, u8) {
        (self.objective.tier(), self.constraint.tier)
    }
}

impl fmt::Display for RomSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.tiers();
        let p = match self.projection {
            Projection::Galerkin => 'G',
            Projection::Lspg => 'P',
        };
        write!(f, "({p},{a},{b})")
    }
}

/// Constraint channel `c(û) = C̄ r̃`. Exact constraints only sample the faces on
/// subdomain boundaries (interior fluxes cancel) and the sources.
pub fn constraint_channel<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    spec: &ConstraintSpec,
    hyper: Option<&HyperOperators>,
) -> Result<Option<Channel>> {
    spec.validate()?;
    let Some(decomp) = spec.decomposition.as_ref().filter(|_| spec.tier > 0) else {
        return Ok(None);
    };
    if decomp.mesh().n_cells() != model.mesh().n_cells() || decomp.n_vars() != model.n_vars() {
        return Err(Error::InvalidInput("decomposition does not match the model mesh".into()));
    }
    if spec.tier == 1 {
        let n = model.n_dofs();
        let faces = decomp.bbar.active_columns();
        let bbar = decomp.bbar.to_dense();
        let cbar = decomp.cbar.to_dense();
        let mut mf = DMatrix::zeros(decomp.n_constraints(), faces.len() + n);
        for (k, &col) in faces.iter().enumerate() {
            mf.set_column(k, &bbar.column(col));
        }
        mf.columns_mut(faces.len(), n).copy_from(&cbar);
        return Channel::from_parts(
            model,
            vec![
                (crate::model::RowKind::FaceFlux, faces),
                (crate::model::RowKind::Source, (0..n).collect()),
            ],
            decomp.cbar.mul_dense(phi),
            decomp.cbar.mul_vec(u0),
            rom::Mix::Dense(mf),
        )
        .map(Some);
    }
    let full = rom::full_space_channel(model, phi, u0, spec.kind, hyper)?;
    full.left_multiply(model, &decomp.cbar).map(Some)
}

/// Solver controls for reduced time steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RomOptions {
    /// Relative decrease of the optimality measure that ends an iteration.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Constraint tolerance relative to `max(1, ‖y(û_init)‖)`.
    pub constraint_tol: f64,
    /// Relative least-squares residual above which linearized constraints are
    /// declared infeasible.
    pub feasibility_tol: f64,
}

impl Default for RomOptions {
    fn default() -> Self {
        RomOptions {
            rel_tol: 1e-5,
            max_iter: 50,
            constraint_tol: 1e-8,
            feasibility_tol: 1e-8,
        }
    }
}

/// Result of one reduced time step (or one saddle-point solve).
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    /// Generalized coordinates (or their rate for the time-continuous problem).
    pub primal: DVector<f64>,
    /// Lagrange multipliers; empty without hard constraints.
    pub lambda: DVector<f64>,
    /// `‖c‖₂` at the solution (0 without constraints).
    pub violation: f64,
    /// `max(1, ‖y(û_init)‖)`, the scale of the constraint tolerance.
    pub reference: f64,
    pub feasible: bool,
    pub iterations: usize,
    pub converged: bool,
}

/// Least-squares solvability of `A x = b`: returns whether the relative
/// residual `‖A x* − b‖/‖b‖` is within `tol`, and that residual.
pub fn feasibility_check(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> (bool, f64) {
    let bn = b.norm();
    if bn == 0.0 {
        return (true, 0.0);
    }
    let x = SortedSvd::new(a).solve(b);
    let rel = (a * x - b).norm() / bn;
    (rel <= tol, rel)
}

/// Continuous-time conservative Galerkin velocity and multiplier rate:
/// `dû/dt = Φᵀf + (C̄Φ)⁺[C̄f − C̄ΦΦᵀf]`, `dλ/dt = −(C̄Φ(C̄Φ)ᵀ)⁺[C̄f − C̄ΦΦᵀf]`.
pub fn saddle_rates(phi_t_f: &DVector<f64>, cphi: &DMatrix<f64>, cf: &DVector<f64>, tol: f64) -> Result<SaddleSolution> {
    if cphi.ncols() != phi_t_f.len() || cphi.nrows() != cf.len() {
        return Err(Error::dim("saddle-point operands", cphi.ncols(), phi_t_f.len()));
    }
    let gap = cf - cphi * phi_t_f;
    let svd = SortedSvd::new(cphi);
    let corr = svd.solve(&gap);
    let ls = (cphi * &corr - &gap).norm();
    let rel = if gap.norm() == 0.0 { 0.0 } else { ls / gap.norm() };
    if rel > tol {
        return Err(Error::Infeasible {
            n_subdomains: 0,
            ls_residual: rel,
        });
    }
    // (AAᵀ)⁺ g = U Σ⁻² Uᵀ g
    let mut lambda = DVector::zeros(cphi.nrows());
    for k in 0..svd.rank() {
        let coef = svd.u.column(k).dot(&gap) / (svd.s[k] * svd.s[k]);
        lambda.axpy(-coef, &svd.u.column(k), 1.0);
    }
    Ok(SaddleSolution {
        primal: phi_t_f + corr,
        lambda,
        violation: ls,
        reference: 1.0,
        feasible: true,
        iterations: 0,
        converged: true,
    })
}

/// Conservative Galerkin right-hand side with exact velocity and constraints.
pub fn cons_galerkin_rhs<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    decomp: &DecomposedMesh,
    u0: &DVector<f64>,
    uhat: &DVector<f64>,
    t: f64,
) -> Result<SaddleSolution> {
    if uhat.len() != phi.ncols() {
        return Err(Error::dim("generalized coordinates", phi.ncols(), uhat.len()));
    }
    let w = u0 + phi * uhat;
    let f = crate::model::velocity(model, &w, t)?;
    let cphi = decomp.cbar.mul_dense(phi);
    saddle_rates(&(phi.transpose() * &f), &cphi, &decomp.cbar.mul_vec(&f), RomOptions::default().feasibility_tol).map_err(|e| match e {
        Error::Infeasible { ls_residual, .. } => Error::Infeasible {
            n_subdomains: decomp.n_subdomains(),
            ls_residual,
        },
        e => e,
    })
}

/// Applies the infeasibility policy of `spec`, returning the updated spec.
/// Coarsening past a single subdomain is an error.
pub fn infeasibility_policy(spec: &ConstraintSpec) -> Result<ConstraintSpec> {
    let mut next = spec.clone();
    match spec.enforcement {
        Enforcement::Hard(InfeasibilityPolicy::CoarsenResume | InfeasibilityPolicy::CoarsenRestart) => {
            let d = spec
                .decomposition
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("no decomposition to coarsen".into()))?;
            next.decomposition = Some(coarsen(d)?);
        }
        Enforcement::Hard(InfeasibilityPolicy::Penalty(rho)) => next.enforcement = Enforcement::Penalty(rho),
        Enforcement::Penalty(_) => {
            return Err(Error::InvalidInput("penalty formulations cannot be infeasible".into()));
        }
    }
    Ok(next)
}

/// Sampled rows at a converged reduced state, kept for the multistep history.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub uhat: DVector<f64>,
    pub t: f64,
    pub g_obj: DVector<f64>,
    pub g_con: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Unconstrained,
    Penalty(f64),
    ConstraintOnly,
    Hard,
}

/// Residual, constraint and their reduced Jacobians at one iterate.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub y: DVector<f64>,
    /// `∂y/∂û`; for LSPG this is the test basis.
    pub psi: DMatrix<f64>,
    pub c: Option<DVector<f64>>,
    pub a: Option<DMatrix<f64>>,
    g_obj: DVector<f64>,
    g_con: Option<DVector<f64>>,
    scale_obj: f64,
    scale_con: f64,
}

/// Part of a channel output fixed by the history, and its round-off scale.
struct HistoryPart {
    value: DVector<f64>,
    noise: f64,
}

/// A reduced model ready to be stepped in time.
pub struct RomProblem<'a, M: FiniteVolumeModel + ?Sized> {
    model: &'a M,
    phi: &'a DMatrix<f64>,
    phi_t: DMatrix<f64>,
    u0: &'a DVector<f64>,
    projection: Projection,
    objective: Channel,
    constraint: Option<Channel>,
    spec: RomSpec,
    dofs: Option<Vec<usize>>,
    opts: RomOptions,
}

impl<'a, M: FiniteVolumeModel + ?Sized> RomProblem<'a, M> {
    pub fn new(
        model: &'a M,
        phi: &'a DMatrix<f64>,
        u0: &'a DVector<f64>,
        spec: &RomSpec,
        hyper: Option<&HyperOperators>,
        opts: RomOptions,
    ) -> Result<Self> {
        let objective = rom::objective_channel(model, phi, u0, spec.projection, &spec.objective, hyper)?;
        if spec.projection == Projection::Galerkin && objective.dim() != model.n_dofs() {
            return Err(Error::InvalidInput("Galerkin projection needs a full-space objective".into()));
        }
        let constraint = constraint_channel(model, phi, u0, &spec.constraint, hyper)?;
        let mut cells: Vec<usize> = objective.cells().to_vec();
        if let Some(c) = &constraint {
            cells.extend_from_slice(c.cells());
        }
        cells.sort_unstable();
        cells.dedup();
        let dofs = (cells.len() < model.mesh().n_cells()).then(|| cell_dofs(model, &cells));
        Ok(RomProblem {
            model,
            phi,
            phi_t: phi.transpose(),
            u0,
            projection: spec.projection,
            objective,
            constraint,
            spec: spec.clone(),
            dofs,
            opts,
        })
    }

    pub fn spec(&self) -> &RomSpec {
        &self.spec
    }

    pub fn objective(&self) -> &Channel {
        &self.objective
    }

    pub fn constraint(&self) -> Option<&Channel> {
        self.constraint.as_ref()
    }

    fn mode(&self) -> Mode {
        if self.constraint.is_none() {
            return Mode::Unconstrained;
        }
        match self.spec.constraint.enforcement {
            Enforcement::Hard(_) => Mode::Hard,
            Enforcement::Penalty(0.0) => Mode::Unconstrained,
            Enforcement::Penalty(r) if r.is_infinite() => Mode::ConstraintOnly,
            Enforcement::Penalty(r) => Mode::Penalty(r),
        }
    }

    /// Evaluates the sampled rows at `uhat` (for the history).
    pub fn history_entry(&self, uhat: &DVector<f64>, t: f64) -> Result<HistoryEntry> {
        let w = reconstruct_dofs(self.u0, self.phi, uhat, self.dofs.as_deref());
        let g_obj = self.objective.eval(self.model, &w, t, None)?.g;
        let g_con = match &self.constraint {
            Some(c) => Some(c.eval(self.model, &w, t, None)?.g),
            None => None,
        };
        Ok(HistoryEntry {
            uhat: uhat.clone(),
            t,
            g_obj,
            g_con,
        })
    }

    fn history_part(channel: &Channel, scheme: &MultistepScheme, dt: f64, hist: &[HistoryEntry], g: impl Fn(&HistoryEntry) -> Option<&DVector<f64>>) -> Result<HistoryPart> {
        let k = scheme.steps();
        if hist.len() < k {
            return Err(Error::dim("reduced history", k, hist.len()));
        }
        let mut value = DVector::zeros(channel.dim());
        let mut noise = 0.0;
        for j in 1..=k {
            let e = &hist[j - 1];
            let s = channel.state_part(&e.uhat);
            noise += scheme.alpha()[j].abs() * s.norm();
            value.axpy(scheme.alpha()[j], &s, 1.0);
            let b = scheme.beta()[j];
            if b != 0.0 {
                let gj = g(e).ok_or(Error::InvalidInput("history lacks constraint samples".into()))?;
                value.axpy(-dt * b, &channel.velocity_part(gj), 1.0);
            }
        }
        Ok(HistoryPart { value, noise })
    }

    /// Residual, constraint and Jacobians at `uhat` for the step whose history
    /// parts are given.
    fn linearize(&self, scheme: &MultistepScheme, dt: f64, t: f64, uhat: &DVector<f64>, hy: &DVector<f64>, hc: Option<&DVector<f64>>) -> Result<Linearization> {
        let (a0, b0) = (scheme.alpha()[0], scheme.beta()[0]);
        let implicit = b0 != 0.0;
        let w = reconstruct_dofs(self.u0, self.phi, uhat, self.dofs.as_deref());
        let jac_phi = implicit.then_some(self.phi);
        let eo = self.objective.eval(self.model, &w, t, jac_phi)?;
        let (y, psi) = Self::assemble(&self.objective, a0, b0, dt, uhat, hy, &eo);
        let scale_obj = a0.abs() * self.objective.state_part(uhat).norm() + dt * b0.abs() * self.objective.velocity_scale(&eo.magnitude);
        let (c, a, g_con, scale_con) = match (&self.constraint, hc) {
            (Some(ch), Some(hc)) => {
                let ec = ch.eval(self.model, &w, t, jac_phi)?;
                let (c, a) = Self::assemble(ch, a0, b0, dt, uhat, hc, &ec);
                let s = a0.abs() * ch.state_part(uhat).norm() + dt * b0.abs() * ch.velocity_scale(&ec.magnitude);
                (Some(c), Some(a), Some(ec.g), s)
            }
            _ => (None, None, None, 0.0),
        };
        Ok(Linearization {
            y,
            psi,
            c,
            a,
            g_obj: eo.g,
            g_con,
            scale_obj,
            scale_con,
        })
    }

    fn assemble(ch: &Channel, a0: f64, b0: f64, dt: f64, uhat: &DVector<f64>, hist: &DVector<f64>, ev: &rom::ChannelEval) -> (DVector<f64>, DMatrix<f64>) {
        let mut y = hist + ch.state_part(uhat) * a0;
        let mut psi = ch.state_map() * a0;
        if b0 != 0.0 {
            y.axpy(-dt * b0, &ch.velocity_part(&ev.g), 1.0);
            if let Some(j) = &ev.jacobian {
                psi -= ch.velocity_jacobian(j) * (dt * b0);
            }
        }
        (y, psi)
    }

    /// Residual and test basis `Ψ = ∂y/∂û` at `uhat` for the step at time `t`.
    pub fn linearization(&self, scheme: &MultistepScheme, dt: f64, t: f64, hist: &[HistoryEntry], uhat: &DVector<f64>) -> Result<Linearization> {
        let hy = Self::history_part(&self.objective, scheme, dt, hist, |e| Some(&e.g_obj))?;
        let hc = match &self.constraint {
            Some(c) => Some(Self::history_part(c, scheme, dt, hist, |e| e.g_con.as_ref())?),
            None => None,
        };
        self.linearize(scheme, dt, t, uhat, &hy.value, hc.as_ref().map(|h| &h.value))
    }

    /// Optimality measure of the current iterate.
    fn measure(&self, lin: &Linearization, lambda: &DVector<f64>) -> DVector<f64> {
        let cmat = || self.constraint.as_ref().expect("constraint channel").state_map();
        match (self.projection, self.mode()) {
            (Projection::Lspg, Mode::Unconstrained) => lin.psi.tr_mul(&lin.y),
            (Projection::Lspg, Mode::Penalty(rho)) => lin.psi.tr_mul(&lin.y) + lin.a.as_ref().unwrap().tr_mul(lin.c.as_ref().unwrap()) * rho,
            (Projection::Lspg, Mode::ConstraintOnly) => lin.a.as_ref().unwrap().tr_mul(lin.c.as_ref().unwrap()),
            (Projection::Lspg, Mode::Hard) => lin.psi.tr_mul(&lin.y) + lin.a.as_ref().unwrap().tr_mul(lambda),
            (Projection::Galerkin, Mode::Unconstrained) => &self.phi_t * &lin.y,
            (Projection::Galerkin, Mode::Penalty(rho)) => &self.phi_t * &lin.y + cmat().tr_mul(lin.c.as_ref().unwrap()) * rho,
            (Projection::Galerkin, Mode::ConstraintOnly) => cmat().tr_mul(lin.c.as_ref().unwrap()),
            (Projection::Galerkin, Mode::Hard) => &self.phi_t * &lin.y + cmat().tr_mul(lambda),
        }
    }

    /// Takes the full correction unless it produces a nonphysical state, in
    /// which case the step is halved until it does not.
    fn admissible_step<F>(&self, uhat: &DVector<f64>, delta: &DVector<f64>, mut linearize: F) -> Result<(DVector<f64>, Linearization)>
    where
        F: FnMut(&DVector<f64>) -> Result<Linearization>,
    {
        let mut scale = 1.0;
        for attempt in 0..=ADMISSIBLE_HALVINGS {
            let trial = uhat + delta * scale;
            match linearize(&trial) {
                Ok(lin) => return Ok((trial, lin)),
                Err(e @ Error::ModelFailure { .. }) if attempt == ADMISSIBLE_HALVINGS => return Err(e),
                Err(Error::ModelFailure { .. }) => scale *= 0.5,
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on the final attempt")
    }

    /// Least-squares multipliers of the current linearization, which make the
    /// optimality measure the projected gradient.
    fn ls_multiplier(&self, lin: &Linearization) -> DVector<f64> {
        let (grad, cmat) = match self.projection {
            Projection::Lspg => (lin.psi.tr_mul(&lin.y), lin.a.as_ref().expect("constraint Jacobian").clone()),
            Projection::Galerkin => (&self.phi_t * &lin.y, self.constraint.as_ref().expect("constraint channel").state_map().clone()),
        };
        SortedSvd::new(&cmat.transpose()).solve(&(-grad))
    }

    /// Round-off floor of the optimality measure.
    fn measure_floor(&self, lin: &Linearization, noise_y: f64, noise_c: f64, lambda: &DVector<f64>) -> f64 {
        let eps = ROUNDOFF_FACTOR * f64::EPSILON;
        let obj = match self.projection {
            Projection::Lspg => lin.psi.norm() * noise_y,
            Projection::Galerkin => noise_y,
        };
        let cnorm = match (self.projection, &self.constraint) {
            (_, None) => 0.0,
            (Projection::Lspg, Some(_)) => lin.a.as_ref().map_or(0.0, |a| a.norm()),
            (Projection::Galerkin, Some(c)) => c.state_map().norm(),
        };
        match self.mode() {
            Mode::Unconstrained => obj,
            Mode::Penalty(rho) => obj + rho * cnorm * noise_c,
            Mode::ConstraintOnly => cnorm * noise_c,
            Mode::Hard => obj + eps * cnorm * lambda.norm(),
        }
    }

    /// One Newton / Gauss–Newton / SQP correction: `(δ, λ_new)`.
    fn correction(&self, lin: &Linearization, ctol: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = self.phi.ncols();
        let empty = DVector::zeros(0);
        let n_sub = self.spec.constraint.n_subdomains().unwrap_or(0);
        let infeasible = |ls: f64| Error::Infeasible {
            n_subdomains: n_sub,
            ls_residual: ls,
        };
        match (self.projection, self.mode()) {
            (Projection::Lspg, Mode::Unconstrained) => Ok((SortedSvd::new(&lin.psi).solve(&(-&lin.y)), empty)),
            (Projection::Lspg, Mode::Penalty(rho)) => {
                let (a, c) = (lin.a.as_ref().unwrap(), lin.c.as_ref().unwrap());
                let s = rho.sqrt();
                let m = lin.psi.nrows();
                let mut stack = DMatrix::zeros(m + a.nrows(), p);
                stack.rows_mut(0, m).copy_from(&lin.psi);
                stack.rows_mut(m, a.nrows()).copy_from(&(a * s));
                let mut rhs = DVector::zeros(m + a.nrows());
                rhs.rows_mut(0, m).copy_from(&(-&lin.y));
                rhs.rows_mut(m, a.nrows()).copy_from(&(-c * s));
                Ok((SortedSvd::new(&stack).solve(&rhs), c * rho))
            }
            (_, Mode::ConstraintOnly) => {
                let (a, c) = (lin.a.as_ref().unwrap(), lin.c.as_ref().unwrap());
                let jac = match self.projection {
                    Projection::Lspg => a.clone(),
                    Projection::Galerkin => self.constraint.as_ref().unwrap().state_map().tr_mul(a),
                };
                let rhs = match self.projection {
                    Projection::Lspg => -c,
                    Projection::Galerkin => -self.constraint.as_ref().unwrap().state_map().tr_mul(c),
                };
                Ok((SortedSvd::new(&jac).solve(&rhs), empty))
            }
            (Projection::Lspg, Mode::Hard) => {
                let (a, c) = (lin.a.as_ref().unwrap(), lin.c.as_ref().unwrap());
                let svd = SortedSvd::new(a);
                let dp = svd.solve(&(-c));
                let ls = (a * &dp + c).norm();
                if ls > self.opts.feasibility_tol * c.norm() && ls > ctol {
                    return Err(infeasible(ls / c.norm()));
                }
                let z = svd.null_space();
                let base = &lin.y + &lin.psi * &dp;
                let delta = if z.ncols() == 0 {
                    dp
                } else {
                    let pz = &lin.psi * &z;
                    dp + &z * SortedSvd::new(&pz).solve(&(-&base))
                };
                let grad = lin.psi.tr_mul(&(&lin.y + &lin.psi * &delta));
                let lambda = SortedSvd::new(&a.transpose()).solve(&(-grad));
                Ok((delta, lambda))
            }
            (Projection::Galerkin, Mode::Unconstrained) => {
                let jac = &self.phi_t * &lin.psi;
                Ok((solve_dense(&jac, &(-(&self.phi_t * &lin.y)), "Galerkin Newton step")?, empty))
            }
            (Projection::Galerkin, Mode::Penalty(rho)) => {
                let (a, c) = (lin.a.as_ref().unwrap(), lin.c.as_ref().unwrap());
                let cphi = self.constraint.as_ref().unwrap().state_map();
                let jac = &self.phi_t * &lin.psi + cphi.tr_mul(a) * rho;
                let rhs = -(&self.phi_t * &lin.y + cphi.tr_mul(c) * rho);
                Ok((solve_dense(&jac, &rhs, "penalized Galerkin Newton step")?, c * rho))
            }
            (Projection::Galerkin, Mode::Hard) => {
                let (a, c) = (lin.a.as_ref().unwrap(), lin.c.as_ref().unwrap());
                let (feasible, rel) = feasibility_check(a, &(-c), self.opts.feasibility_tol);
                if !feasible && rel * c.norm() > ctol {
                    return Err(infeasible(rel));
                }
                let cphi = self.constraint.as_ref().unwrap().state_map();
                let nb = a.nrows();
                let mut kkt = DMatrix::zeros(p + nb, p + nb);
                kkt.view_mut((0, 0), (p, p)).copy_from(&(&self.phi_t * &lin.psi));
                kkt.view_mut((0, p), (p, nb)).copy_from(&cphi.transpose());
                kkt.view_mut((p, 0), (nb, p)).copy_from(a);
                let mut rhs = DVector::zeros(p + nb);
                rhs.rows_mut(0, p).copy_from(&(-(&self.phi_t * &lin.y)));
                rhs.rows_mut(p, nb).copy_from(&(-c));
                let sol = solve_dense(&kkt, &rhs, "conservative Galerkin saddle point")?;
                Ok((sol.rows(0, p).into_owned(), sol.rows(p, nb).into_owned()))
            }
        }
    }

    /// Solves one time instance starting from `uhat_init`. `hist[0]` is the
    /// newest converged state.
    pub fn solve_step(
        &self,
        scheme: &MultistepScheme,
        dt: f64,
        t: f64,
        hist: &[HistoryEntry],
        uhat_init: &DVector<f64>,
    ) -> Result<(SaddleSolution, HistoryEntry)> {
        let hy = Self::history_part(&self.objective, scheme, dt, hist, |e| Some(&e.g_obj))?;
        let hc = match &self.constraint {
            Some(c) => Some(Self::history_part(c, scheme, dt, hist, |e| e.g_con.as_ref())?),
            None => None,
        };
        let hcv = hc.as_ref().map(|h| &h.value);
        let eps = ROUNDOFF_FACTOR * f64::EPSILON;
        let mode = self.mode();

        let mut uhat = uhat_init.clone();
        let mut lin = self.linearize(scheme, dt, t, &uhat, &hy.value, hcv)?;
        let reference = lin.y.norm().max(1.0);
        let noise_y = eps * (hy.noise + lin.scale_obj);
        let noise_c = eps * (hc.as_ref().map_or(0.0, |h| h.noise) + lin.scale_con);
        let ctol = (self.opts.constraint_tol * reference).max(noise_c);
        let n_con = self.constraint.as_ref().map_or(0, |c| c.dim());
        let mut lambda = DVector::zeros(if mode == Mode::Hard { n_con } else { 0 });
        let m0 = self.measure(&lin, &DVector::zeros(lambda.len())).norm();
        let rel_target = self.opts.rel_tol * m0;
        let needs_c = matches!(mode, Mode::Hard);

        let mut it = 0;
        let converged = loop {
            if mode == Mode::Hard {
                lambda = self.ls_multiplier(&lin);
            }
            let m = self.measure(&lin, &lambda).norm();
            let target = rel_target.max(self.measure_floor(&lin, noise_y, noise_c, &lambda));
            let cn = lin.c.as_ref().map_or(0.0, |c| c.norm());
            if m <= target && (!needs_c || cn <= ctol) {
                break true;
            }
            if !m.is_finite() {
                return Err(Error::Singular("reduced iteration produced a non-finite residual"));
            }
            if it >= self.opts.max_iter {
                break false;
            }
            let (delta, _) = self.correction(&lin, ctol)?;
            let (u_next, lin_next) = self.admissible_step(&uhat, &delta, |u| self.linearize(scheme, dt, t, u, &hy.value, hcv))?;
            uhat = u_next;
            lin = lin_next;
            it += 1;
        };
        if converged && needs_c {
            // Drive the constraint toward round-off while each correction
            // still contracts it; a stalled correction is discarded.
            for _ in 0..POLISH_STEPS {
                let cn = lin.c.as_ref().map_or(0.0, |c| c.norm());
                if cn <= 10.0 * noise_c {
                    break;
                }
                let (delta, _) = self.correction(&lin, ctol)?;
                let trial_u = &uhat + delta;
                let trial = match self.linearize(scheme, dt, t, &trial_u, &hy.value, hcv) {
                    Ok(l) => l,
                    Err(Error::ModelFailure { .. }) => break,
                    Err(e) => return Err(e),
                };
                if trial.c.as_ref().map_or(0.0, |c| c.norm()) > 0.5 * cn {
                    break;
                }
                uhat = trial_u;
                lin = trial;
            }
            lambda = self.ls_multiplier(&lin);
        }
        let penalty_lambda = match mode {
            Mode::Penalty(rho) => lin.c.as_ref().map(|c| c * rho),
            _ => None,
        };
        let violation = lin.c.as_ref().map_or(0.0, |c| c.norm());
        let sol = SaddleSolution {
            primal: uhat.clone(),
            lambda: penalty_lambda.unwrap_or(lambda),
            violation,
            reference,
            feasible: true,
            iterations: it,
            converged,
        };
        let entry = HistoryEntry {
            uhat,
            t,
            g_obj: lin.g_obj,
            g_con: lin.g_con,
        };
        Ok((sol, entry))
    }

    /// Multiplier rate of the time-continuous conservative Galerkin problem at
    /// a converged state (hard constraints only).
    pub fn multiplier_rate(&self, entry: &HistoryEntry) -> Result<Option<DVector<f64>>> {
        let (Some(con), Some(gc)) = (&self.constraint, &entry.g_con) else {
            return Ok(None);
        };
        if self.projection != Projection::Galerkin || self.mode() != Mode::Hard {
            return Ok(None);
        }
        let phi_t_f = &self.phi_t * self.objective.velocity_part(&entry.g_obj);
        let cf = con.velocity_part(gc);
        match saddle_rates(&phi_t_f, con.state_map(), &cf, f64::INFINITY) {
            Ok(s) => Ok(Some(s.lambda)),
            Err(e) => Err(e),
        }
    }
}

/// Step halvings allowed when a correction leaves the physical state space.
const ADMISSIBLE_HALVINGS: usize = 10;

/// Extra corrections applied after convergence to reduce the constraint
/// violation toward round-off.
const POLISH_STEPS: usize = 3;

/// Per-time-instance solver log of a reduced run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub n: usize,
    pub newton_iters: usize,
    /// `‖c(ûⁿ)‖₂` (0 without constraints).
    pub constraint_violation: f64,
    /// Scale of the constraint tolerance, `max(1, ‖y(û_init)‖)`.
    pub reference: f64,
    pub lambda_norm: f64,
    pub feasible: bool,
    pub n_subdomains: usize,
}

/// Trajectory of a reduced model with its solver log.
#[derive(Debug, Clone, Default)]
pub struct RomRun {
    pub record: TrajectoryRecord,
    pub log: Vec<StepLog>,
    /// Step multipliers (`λ_Pⁿ` for LSPG, the discrete multiplier for Galerkin).
    pub multipliers: Vec<DVector<f64>>,
    /// Time-integrated Galerkin multipliers `λ_Gⁿ`, from `n = 0`.
    pub galerkin_multipliers: Vec<DVector<f64>>,
    /// Policy actions taken, as human-readable notes.
    pub events: Vec<String>,
    /// Subdomain count in force at the end of the run.
    pub final_subdomains: Option<usize>,
}

impl RomRun {
    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = ["n", "newton_iters", "constraint_violation", "lambda_norm", "feasible"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let m = DMatrix::from_fn(self.log.len(), 5, |r, c| {
            let l = &self.log[r];
            match c {
                0 => l.n as f64,
                1 => l.newton_iters as f64,
                2 => l.constraint_violation,
                3 => l.lambda_norm,
                _ => f64::from(u8::from(l.feasible)),
            }
        });
        io::write_matrix_csv(path, &header, &m)
    }
}

/// Integrates a reduced model from `û(0) = 0`. Solver failures end the run
/// early and are recorded in `record.failure`; infeasible constraints trigger
/// the configured policy.
#[allow(clippy::too_many_arguments)]
pub fn integrate_conservative_rom<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    spec: &RomSpec,
    hyper: Option<&HyperOperators>,
    scheme: &MultistepScheme,
    grid: &TimeGrid,
    opts: &RomOptions,
) -> Result<RomRun> {
    let p = phi.ncols();
    let mut problem = RomProblem::new(model, phi, u0, spec, hyper, *opts)?;
    // operator assembly is offline work; time the online loop only
    let start = Instant::now();
    let mut run = RomRun::default();
    let mut hist: Vec<HistoryEntry> = Vec::new();
    let mut rates: Vec<DVector<f64>> = Vec::new();
    let mut times = vec![0.0];
    let mut uhats = vec![DVector::zeros(p)];

    let init = |problem: &RomProblem<'_, M>| -> Result<(HistoryEntry, Option<DVector<f64>>)> {
        let e = problem.history_entry(&DVector::zeros(p), 0.0)?;
        let r = problem.multiplier_rate(&e)?;
        Ok((e, r))
    };
    match init(&problem) {
        Ok((e, r)) => {
            hist.push(e);
            if let Some(r) = r {
                rates.push(r);
                run.galerkin_multipliers.push(DVector::zeros(problem.constraint().map_or(0, |c| c.dim())));
            }
        }
        Err(e) => {
            run.record.failure = Some(StepFailure {
                step: 0,
                reason: e.to_string(),
            });
            return Ok(finish(run, times, uhats, u0, phi, start, &problem));
        }
    }

    let mut n = 1;
    while n <= grid.n_steps {
        let sch = scheme.at_step(n);
        let k = sch.steps();
        let t = grid.time(n);
        let recent: Vec<HistoryEntry> = hist.iter().rev().take(k).cloned().collect();
        let outcome = problem.solve_step(&sch, grid.dt, t, &recent, &recent[0].uhat);
        match outcome {
            Ok((sol, entry)) if sol.converged => {
                log::debug!("rom step {n}: {} iterations, violation {:.3e}", sol.iterations, sol.violation);
                if let Some(rate) = problem.multiplier_rate(&entry)? {
                    rates.push(rate);
                    let lg = integrate_multiplier(&sch, grid.dt, &run.galerkin_multipliers, &rates);
                    run.galerkin_multipliers.push(lg);
                }
                run.log.push(StepLog {
                    n,
                    newton_iters: sol.iterations,
                    constraint_violation: sol.violation,
                    reference: sol.reference,
                    lambda_norm: sol.lambda.norm(),
                    feasible: sol.feasible,
                    n_subdomains: problem.spec().constraint.n_subdomains().unwrap_or(0),
                });
                run.record.newton_iters.push(sol.iterations);
                run.multipliers.push(sol.lambda);
                times.push(t);
                uhats.push(entry.uhat.clone());
                hist.push(entry);
                n += 1;
            }
            Ok(_) => {
                run.record.failure = Some(StepFailure {
                    step: n,
                    reason: "reduced iteration did not converge".into(),
                });
                break;
            }
            Err(Error::Infeasible { n_subdomains, ls_residual }) => {
                let current = &problem.spec().constraint;
                let next = match infeasibility_policy(current) {
                    Ok(s) => s,
                    Err(e) => {
                        run.record.failure = Some(StepFailure {
                            step: n,
                            reason: format!("constraints infeasible with {n_subdomains} subdomain(s) (residual {ls_residual:.3e}): {e}"),
                        });
                        break;
                    }
                };
                let restart = matches!(current.enforcement, Enforcement::Hard(InfeasibilityPolicy::CoarsenRestart));
                run.events.push(format!(
                    "step {n}: infeasible with {n_subdomains} subdomain(s); {}",
                    match next.enforcement {
                        Enforcement::Penalty(rho) => format!("switching to penalty {rho}"),
                        _ => format!("coarsening to {} subdomain(s)", next.n_subdomains().unwrap_or(0)),
                    }
                ));
                log::info!("{}", run.events.last().unwrap());
                let mut new_spec = problem.spec().clone();
                new_spec.constraint = next;
                problem = RomProblem::new(model, phi, u0, &new_spec, hyper, *opts)?;
                if restart {
                    hist.clear();
                    rates.clear();
                    run.galerkin_multipliers.clear();
                    run.log.clear();
                    run.multipliers.clear();
                    run.record.newton_iters.clear();
                    times.truncate(1);
                    uhats.truncate(1);
                    let (e, r) = init(&problem)?;
                    hist.push(e);
                    if let Some(r) = r {
                        rates.push(r);
                        run.galerkin_multipliers.push(DVector::zeros(problem.constraint().map_or(0, |c| c.dim())));
                    }
                    n = 1;
                } else {
                    // constraint samples in the history belong to the old channel
                    let mut refreshed = Vec::with_capacity(hist.len());
                    for e in &hist {
                        refreshed.push(problem.history_entry(&e.uhat, e.t)?);
                    }
                    hist = refreshed;
                    if !rates.is_empty() {
                        rates.clear();
                        run.galerkin_multipliers.clear();
                        for e in &hist {
                            if let Some(r) = problem.multiplier_rate(e)? {
                                rates.push(r);
                                run.galerkin_multipliers.push(DVector::zeros(problem.constraint().map_or(0, |c| c.dim())));
                            }
                        }
                    }
                }
            }
            Err(e) => {
                log::warn!("rom step {n} failed: {e}");
                run.record.failure = Some(StepFailure {
                    step: n,
                    reason: e.to_string(),
                });
                break;
            }
        }
        // keep only what the multistep history can reach
        let keep = scheme.steps().max(2);
        if hist.len() > keep {
            hist.drain(..hist.len() - keep);
        }
    }
    Ok(finish(run, times, uhats, u0, phi, start, &problem))
}

/// `Σ_j α_j λ_G^{n−j} = Δt Σ_j β_j (dλ/dt)^{n−j}` solved for `λ_Gⁿ`.
fn integrate_multiplier(scheme: &MultistepScheme, dt: f64, past: &[DVector<f64>], rates: &[DVector<f64>]) -> DVector<f64> {
    let k = scheme.steps();
    let (a, b) = (scheme.alpha(), scheme.beta());
    let nr = rates.len();
    let np = past.len();
    let mut acc = &rates[nr - 1] * (dt * b[0]);
    for j in 1..=k {
        acc.axpy(dt * b[j], &rates[nr - 1 - j], 1.0);
        acc.axpy(-a[j], &past[np - j], 1.0);
    }
    acc / a[0]
}

fn finish<M: FiniteVolumeModel + ?Sized>(
    mut run: RomRun,
    times: Vec<f64>,
    uhats: Vec<DVector<f64>>,
    u0: &DVector<f64>,
    phi: &DMatrix<f64>,
    start: Instant,
    problem: &RomProblem<'_, M>,
) -> RomRun {
    run.record.wall_time = start.elapsed().as_secs_f64();
    run.record.states = uhats.iter().map(|u| u0 + phi * u).collect();
    run.record.generalized = uhats;
    run.record.times = times;
    run.final_subdomains = problem.spec().constraint.n_subdomains();
    run
}

/// Unconstrained reduced model (tier `A-0`).
#[allow(clippy::too_many_arguments)]
pub fn integrate_rom<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    projection: Projection,
    objective: ObjectiveSpec,
    hyper: Option<&HyperOperators>,
    scheme: &MultistepScheme,
    grid: &TimeGrid,
    opts: &RomOptions,
) -> Result<RomRun> {
    let spec = RomSpec {
        projection,
        objective,
        constraint: ConstraintSpec::none(),
    };
    integrate_conservative_rom(model, phi, u0, &spec, hyper, scheme, grid, opts)
}

fn history_entries<M: FiniteVolumeModel + ?Sized>(problem: &RomProblem<'_, M>, history: &[DVector<f64>], t: f64, dt: f64) -> Result<Vec<HistoryEntry>> {
    history
        .iter()
        .enumerate()
        .map(|(j, u)| problem.history_entry(u, t - (j + 1) as f64 * dt))
        .collect()
}

/// One exact LSPG time step (Gauss–Newton on `min ‖rⁿ(u⁰ + Φŝ)‖₂`).
#[allow(clippy::too_many_arguments)]
pub fn lspg_step<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    scheme: &MultistepScheme,
    dt: f64,
    t: f64,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    history: &[DVector<f64>],
    uhat_init: &DVector<f64>,
) -> Result<SaddleSolution> {
    let spec = RomSpec {
        projection: Projection::Lspg,
        objective: ObjectiveSpec::exact(),
        constraint: ConstraintSpec::none(),
    };
    let problem = RomProblem::new(model, phi, u0, &spec, None, RomOptions::default())?;
    let hist = history_entries(&problem, history, t, dt)?;
    Ok(problem.solve_step(scheme, dt, t, &hist, uhat_init)?.0)
}

/// One conservative LSPG time step with exact constraints `C̄ rⁿ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn cons_lspg_step<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    scheme: &MultistepScheme,
    dt: f64,
    t: f64,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    decomp: &DecomposedMesh,
    history: &[DVector<f64>],
    uhat_init: &DVector<f64>,
) -> Result<SaddleSolution> {
    let spec = RomSpec {
        projection: Projection::Lspg,
        objective: ObjectiveSpec::exact(),
        constraint: ConstraintSpec::exact(decomp.clone(), Enforcement::Hard(InfeasibilityPolicy::CoarsenResume)),
    };
    let problem = RomProblem::new(model, phi, u0, &spec, None, RomOptions::default())?;
    let hist = history_entries(&problem, history, t, dt)?;
    Ok(problem.solve_step(scheme, dt, t, &hist, uhat_init)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fv::build_decomposition;
    use crate::linear::LinearAdvection;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> LinearAdvection {
        LinearAdvection::new(1.0, 12, vec![1.0, 0.5], 0.3, vec![1.0, -0.5]).unwrap()
    }

    fn orthonormal(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        m.qr().q()
    }

    fn state(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5))
    }

    fn spec(projection: Projection, decomp: &DecomposedMesh, enforcement: Enforcement) -> RomSpec {
        RomSpec {
            projection,
            objective: ObjectiveSpec::exact(),
            constraint: ConstraintSpec::exact(decomp.clone(), enforcement),
        }
    }

    const HARD: Enforcement = Enforcement::Hard(InfeasibilityPolicy::CoarsenResume);

    #[test]
    fn hard_lspg_step_matches_kkt_system() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 6, 1);
        let u0 = state(n, 2);
        let d = build_decomposition(m.mesh(), 2, 2).unwrap();
        let dt = 0.05;
        let be = MultistepScheme::backward_euler();
        let p0 = DVector::zeros(6);
        let sol = cons_lspg_step(&m, &be, dt, dt, &phi, &u0, &d, std::slice::from_ref(&p0), &p0).unwrap();

        let (l, g) = m.affine_operator();
        let psi = (DMatrix::identity(n, n) - &l * dt) * &phi;
        let y0 = -(&l * &u0 + &g) * dt;
        let cbar = d.cbar.to_dense();
        let a = &cbar * &psi;
        let c0 = &cbar * &y0;
        let nb = a.nrows();
        let mut kkt = DMatrix::zeros(6 + nb, 6 + nb);
        kkt.view_mut((0, 0), (6, 6)).copy_from(&psi.tr_mul(&psi));
        kkt.view_mut((0, 6), (6, nb)).copy_from(&a.transpose());
        kkt.view_mut((6, 0), (nb, 6)).copy_from(&a);
        let mut rhs = DVector::zeros(6 + nb);
        rhs.rows_mut(0, 6).copy_from(&(-psi.tr_mul(&y0)));
        rhs.rows_mut(6, nb).copy_from(&(-c0));
        let x = kkt.lu().solve(&rhs).unwrap();
        assert!(sol.converged);
        assert!((&sol.primal - x.rows(0, 6)).norm() <= 1e-10 * x.norm());
        assert!((&sol.lambda - x.rows(6, nb)).norm() <= 1e-8 * x.norm());
        assert!(sol.violation <= 1e-10);
    }

    #[test]
    fn unconstrained_lspg_step_is_least_squares() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 5, 3);
        let u0 = state(n, 4);
        let dt = 0.05;
        let p0 = DVector::zeros(5);
        let sol = lspg_step(&m, &MultistepScheme::backward_euler(), dt, dt, &phi, &u0, std::slice::from_ref(&p0), &p0).unwrap();
        let (l, g) = m.affine_operator();
        let psi = (DMatrix::identity(n, n) - &l * dt) * &phi;
        let y0 = -(&l * &u0 + &g) * dt;
        let normal = psi.tr_mul(&psi).lu().solve(&(-psi.tr_mul(&y0))).unwrap();
        assert!((&sol.primal - &normal).norm() <= 1e-10 * normal.norm());
        assert!(sol.lambda.is_empty());
    }

    #[test]
    fn zero_penalty_reproduces_unconstrained_run() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 5, 5);
        let u0 = state(n, 6);
        let d = build_decomposition(m.mesh(), 3, 2).unwrap();
        let grid = TimeGrid::new(0.02, 5).unwrap();
        let bdf2 = MultistepScheme::bdf2();
        let opts = RomOptions::default();
        for proj in [Projection::Lspg, Projection::Galerkin] {
            let plain = integrate_rom(&m, &phi, &u0, proj, ObjectiveSpec::exact(), None, &bdf2, &grid, &opts).unwrap();
            let pen = integrate_conservative_rom(&m, &phi, &u0, &spec(proj, &d, Enforcement::Penalty(0.0)), None, &bdf2, &grid, &opts).unwrap();
            assert_eq!(plain.record.generalized, pen.record.generalized);
        }
    }

    #[test]
    fn large_penalty_approaches_hard_constraints() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 6, 7);
        let u0 = state(n, 8);
        let d = build_decomposition(m.mesh(), 2, 2).unwrap();
        let grid = TimeGrid::new(0.02, 3).unwrap();
        let be = MultistepScheme::backward_euler();
        let opts = RomOptions::default();
        for proj in [Projection::Lspg, Projection::Galerkin] {
            let hard = integrate_conservative_rom(&m, &phi, &u0, &spec(proj, &d, HARD), None, &be, &grid, &opts).unwrap();
            let pen = integrate_conservative_rom(&m, &phi, &u0, &spec(proj, &d, Enforcement::Penalty(1e8)), None, &be, &grid, &opts).unwrap();
            let only = integrate_conservative_rom(&m, &phi, &u0, &spec(proj, &d, Enforcement::Penalty(f64::INFINITY)), None, &be, &grid, &opts).unwrap();
            let h = hard.record.generalized.last().unwrap();
            let p = pen.record.generalized.last().unwrap();
            assert!((h - p).norm() <= 1e-5 * h.norm(), "{proj}: {}", (h - p).norm());
            for l in &hard.log {
                assert!(l.constraint_violation <= 1e-8 * l.reference);
            }
            for l in &only.log {
                assert!(l.constraint_violation <= 1e-8 * l.reference);
            }
        }
    }

    #[test]
    fn hard_galerkin_satisfies_stationarity() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 6, 9);
        let u0 = state(n, 10);
        let d = build_decomposition(m.mesh(), 2, 2).unwrap();
        let s = spec(Projection::Galerkin, &d, HARD);
        let problem = RomProblem::new(&m, &phi, &u0, &s, None, RomOptions::default()).unwrap();
        let be = MultistepScheme::backward_euler();
        let p0 = DVector::zeros(6);
        let hist = vec![problem.history_entry(&p0, 0.0).unwrap()];
        let (sol, _) = problem.solve_step(&be, 0.05, 0.05, &hist, &p0).unwrap();
        let lin = problem.linearization(&be, 0.05, 0.05, &hist, &sol.primal).unwrap();
        let cphi = problem.constraint().unwrap().state_map();
        let stat = phi.tr_mul(&lin.y) + cphi.tr_mul(&sol.lambda);
        assert!(stat.norm() <= 1e-10 * lin.y.norm().max(1.0));
        assert!(lin.c.unwrap().norm() <= 1e-10);
    }

    #[test]
    fn forward_euler_multipliers_match_integrated_galerkin_multipliers() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 6, 11);
        let u0 = state(n, 12);
        let d = build_decomposition(m.mesh(), 2, 2).unwrap();
        let grid = TimeGrid::new(0.01, 6).unwrap();
        let fe = MultistepScheme::forward_euler();
        let run = integrate_conservative_rom(&m, &phi, &u0, &spec(Projection::Galerkin, &d, HARD), None, &fe, &grid, &RomOptions::default()).unwrap();
        assert!(run.record.failure.is_none());
        let lg = &run.galerkin_multipliers;
        assert_eq!(lg.len(), grid.n_steps + 1);
        for (k, lp) in run.multipliers.iter().enumerate() {
            let diff = &lg[k + 1] - &lg[k];
            assert!((lp - &diff).norm() <= 1e-9 * diff.norm().max(1e-12), "step {}", k + 1);
        }
    }

    #[test]
    fn saddle_rates_enforce_constraint_rates() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 6, 13);
        let u0 = state(n, 14);
        let d = build_decomposition(m.mesh(), 3, 2).unwrap();
        let uhat = DVector::from_element(6, 0.1);
        let sol = cons_galerkin_rhs(&m, &phi, &d, &u0, &uhat, 0.0).unwrap();
        let f = crate::model::velocity(&m, &(&u0 + &phi * &uhat), 0.0).unwrap();
        let cphi = d.cbar.mul_dense(&phi);
        assert!((&cphi * &sol.primal - d.cbar.mul_vec(&f)).norm() <= 1e-10 * f.norm());
    }

    #[test]
    fn overconstrained_step_is_infeasible_and_coarsens() {
        let m = toy();
        let n = m.n_dofs();
        let phi = orthonormal(n, 3, 15);
        let u0 = state(n, 16);
        let d = build_decomposition(m.mesh(), 6, 2).unwrap();
        let be = MultistepScheme::backward_euler();
        let p0 = DVector::zeros(3);
        let err = cons_lspg_step(&m, &be, 0.05, 0.05, &phi, &u0, &d, std::slice::from_ref(&p0), &p0).unwrap_err();
        assert!(matches!(err, Error::Infeasible { n_subdomains: 6, .. }));

        let grid = TimeGrid::new(0.05, 2).unwrap();
        let run = integrate_conservative_rom(&m, &phi, &u0, &spec(Projection::Lspg, &d, HARD), None, &be, &grid, &RomOptions::default()).unwrap();
        assert!(!run.events.is_empty());
        assert!(run.final_subdomains.unwrap() < 6);
    }

    #[test]
    fn feasibility_check_detects_inconsistent_systems() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(feasibility_check(&a, &DVector::from_vec(vec![2.0, 2.0]), 1e-8).0);
        let (ok, rel) = feasibility_check(&a, &DVector::from_vec(vec![1.0, -1.0]), 1e-8);
        assert!(!ok && (rel - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let m = toy();
        let d = build_decomposition(m.mesh(), 2, 2).unwrap();
        assert!(ConstraintSpec::exact(d.clone(), Enforcement::Penalty(-1.0)).validate().is_err());
        assert!(ConstraintSpec::hyper(d, HyperKind::None, HARD).validate().is_err());
        assert!(ConstraintSpec::none().validate().is_ok());
    }
}
