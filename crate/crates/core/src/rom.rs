//! Galerkin and LSPG reduced-order models and their hyper-reduced variants.
//!
//! Every residual-like quantity a reduced model needs (the objective residual,
//! the conservation constraints) has the same affine structure in the state
//! and in a vector `g` of sampled model rows:
//!
//! `y(û) = α_0 M_w w + Σ_j α_j M_w w_j − Δt (β_0 M_f g(w) + Σ_j β_j M_f g(w_j))`,
//!
//! with `w = u⁰ + Φû`. A [`Channel`] stores `M_w Φ`, `M_w u⁰`, `M_f` and the
//! rows making up `g`, so full-order, gappy and collocation variants share
//! one solver.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::model::{self, FiniteVolumeModel, RowKind};
use crate::sparse::SparseMatrix;
use crate::training::{select_rows, SampleSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    Galerkin,
    Lspg,
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Galerkin => "galerkin",
            Projection::Lspg => "lspg",
        })
    }
}

/// How the nonlinear terms of an objective or constraint are approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperKind {
    None,
    ResidualGappy,
    ResidualCollocation,
    VelocityGappy,
    VelocityCollocation,
    FluxSourceGappy,
    FluxSourceCollocation,
}

impl HyperKind {
    pub const ALL: [HyperKind; 7] = [
        HyperKind::None,
        HyperKind::ResidualGappy,
        HyperKind::ResidualCollocation,
        HyperKind::VelocityGappy,
        HyperKind::VelocityCollocation,
        HyperKind::FluxSourceGappy,
        HyperKind::FluxSourceCollocation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HyperKind::None => "none",
            HyperKind::ResidualGappy => "residual-gappy",
            HyperKind::ResidualCollocation => "residual-collocation",
            HyperKind::VelocityGappy => "velocity-gappy",
            HyperKind::VelocityCollocation => "velocity-collocation",
            HyperKind::FluxSourceGappy => "flux-source-gappy",
            HyperKind::FluxSourceCollocation => "flux-source-collocation",
        }
    }
}

impl fmt::Display for HyperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HyperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HyperKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown hyper-reduction kind '{s}'")))
    }
}

/// Trained hyper-reduction ingredients. Only the bases a configuration uses
/// need to be present.
#[derive(Debug, Clone)]
pub struct HyperOperators {
    pub selection: SampleSelection,
    pub phi_r: Option<DMatrix<f64>>,
    pub phi_v: Option<DMatrix<f64>>,
    pub phi_h: Option<DMatrix<f64>>,
    pub phi_s: Option<DMatrix<f64>>,
}

impl HyperOperators {
    fn basis<'a>(&self, b: &'a Option<DMatrix<f64>>, name: &str) -> Result<&'a DMatrix<f64>> {
        b.as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("hyper-reduction needs the {name} basis")))
    }
}

/// Objective of a reduced model: tier 1 uses the exact residual, tier 2 a
/// hyper-reduced one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: HyperKind,
}

impl ObjectiveSpec {
    pub fn exact() -> Self {
        ObjectiveSpec { kind: HyperKind::None }
    }

    pub fn hyper(kind: HyperKind) -> Self {
        ObjectiveSpec { kind }
    }

    pub fn tier(&self) -> u8 {
        if self.kind == HyperKind::None {
            1
        } else {
            2
        }
    }
}

/// Generalized coordinates of a reduced state.
#[derive(Debug, Clone, PartialEq)]
pub struct RomState {
    pub uhat: DVector<f64>,
}

impl RomState {
    pub fn zeros(p: usize) -> Self {
        RomState { uhat: DVector::zeros(p) }
    }

    /// `ũ = u⁰ + Φ û`.
    pub fn reconstruct(&self, u0: &DVector<f64>, phi: &DMatrix<f64>) -> DVector<f64> {
        u0 + phi * &self.uhat
    }
}

/// A linear map stored either implicitly (identity) or as a dense matrix.
#[derive(Debug, Clone)]
pub enum Mix {
    Identity(usize),
    Dense(DMatrix<f64>),
}

impl Mix {
    pub fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            Mix::Identity(_) => g.clone(),
            Mix::Dense(m) => m * g,
        }
    }

    pub fn apply_mat(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Mix::Identity(_) => g.clone(),
            Mix::Dense(m) => m * g,
        }
    }

    fn abs(&self) -> Mix {
        match self {
            Mix::Identity(n) => Mix::Identity(*n),
            Mix::Dense(m) => Mix::Dense(m.abs()),
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Mix::Identity(n) => DMatrix::identity(*n, *n),
            Mix::Dense(m) => m.clone(),
        }
    }

    fn nrows(&self) -> usize {
        match self {
            Mix::Identity(n) => *n,
            Mix::Dense(m) => m.nrows(),
        }
    }
}

/// Sampled model rows and the affine maps turning them into a residual-like
/// vector (see the module documentation).
#[derive(Debug, Clone)]
pub struct Channel {
    blocks: Vec<(RowKind, Vec<usize>)>,
    mw_phi: DMatrix<f64>,
    mw_u0: DVector<f64>,
    mf: Mix,
    mf_abs: Mix,
    cells: Vec<usize>,
    n_g: usize,
}

/// Sampled model rows at one state.
#[derive(Debug, Clone)]
pub struct ChannelEval {
    pub g: DVector<f64>,
    /// Row-wise magnitude of the terms summed into `g`.
    pub magnitude: DVector<f64>,
    /// `∂g/∂w Φ`, when requested.
    pub jacobian: Option<DMatrix<f64>>,
}

impl Channel {
    pub fn from_parts<M: FiniteVolumeModel + ?Sized>(
        model: &M,
        blocks: Vec<(RowKind, Vec<usize>)>,
        mw_phi: DMatrix<f64>,
        mw_u0: DVector<f64>,
        mf: Mix,
    ) -> Result<Self> {
        let n_g: usize = blocks.iter().map(|(_, r)| r.len()).sum();
        let mf_cols = match &mf {
            Mix::Identity(n) => *n,
            Mix::Dense(m) => m.ncols(),
        };
        if mf_cols != n_g {
            return Err(Error::dim("channel sample count", mf_cols, n_g));
        }
        if mf.nrows() != mw_phi.nrows() || mw_u0.len() != mw_phi.nrows() {
            return Err(Error::dim("channel output", mw_phi.nrows(), mf.nrows()));
        }
        let mut cells: Vec<usize> = blocks
            .iter()
            .flat_map(|(k, rows)| model::stencil_cells(model.mesh(), *k, rows))
            .collect();
        cells.sort_unstable();
        cells.dedup();
        let mf_abs = mf.abs();
        Ok(Channel {
            blocks,
            mw_phi,
            mw_u0,
            mf,
            mf_abs,
            cells,
            n_g,
        })
    }

    /// Output dimension.
    pub fn dim(&self) -> usize {
        self.mw_phi.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.n_g
    }

    /// Cells whose states the sampled rows depend on.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// `M_w Φ`.
    pub fn state_map(&self) -> &DMatrix<f64> {
        &self.mw_phi
    }

    /// `M_w (u⁰ + Φ û)`.
    pub fn state_part(&self, uhat: &DVector<f64>) -> DVector<f64> {
        &self.mw_u0 + &self.mw_phi * uhat
    }

    /// `M_f g`.
    pub fn velocity_part(&self, g: &DVector<f64>) -> DVector<f64> {
        self.mf.apply(g)
    }

    /// `M_f (∂g/∂w) Φ`.
    pub fn velocity_jacobian(&self, jg_phi: &DMatrix<f64>) -> DMatrix<f64> {
        self.mf.apply_mat(jg_phi)
    }

    /// `‖ |M_f| m ‖`, the scale of the round-off in `M_f g`.
    pub fn velocity_scale(&self, magnitude: &DVector<f64>) -> f64 {
        self.mf_abs.apply(magnitude).norm()
    }

    /// Samples the model rows at the (possibly partially reconstructed) state
    /// `w`; only the dofs of [`Channel::cells`] are read.
    pub fn eval<M: FiniteVolumeModel + ?Sized>(
        &self,
        model: &M,
        w: &DVector<f64>,
        t: f64,
        phi: Option<&DMatrix<f64>>,
    ) -> Result<ChannelEval> {
        let mut g = DVector::zeros(self.n_g);
        let mut magnitude = DVector::zeros(self.n_g);
        let mut jac = phi.map(|p| DMatrix::zeros(self.n_g, p.ncols()));
        let mut off = 0;
        for (kind, rows) in &self.blocks {
            let (v, m) = model::eval_rows_with_magnitude(model, w, t, *kind, rows)?;
            g.rows_mut(off, rows.len()).copy_from(&v);
            magnitude.rows_mut(off, rows.len()).copy_from(&m);
            if let (Some(j), Some(p)) = (jac.as_mut(), phi) {
                let block = model::jacobian_rows(model, w, t, *kind, rows)?.mul_dense(p);
                j.rows_mut(off, rows.len()).copy_from(&block);
            }
            off += rows.len();
        }
        Ok(ChannelEval {
            g,
            magnitude,
            jacobian: jac,
        })
    }

    /// `C Channel`: left-multiplies the output by a sparse matrix.
    pub fn left_multiply<M: FiniteVolumeModel + ?Sized>(&self, model: &M, c: &SparseMatrix) -> Result<Channel> {
        if c.ncols() != self.dim() {
            return Err(Error::dim("left factor", self.dim(), c.ncols()));
        }
        let mf = match &self.mf {
            Mix::Identity(_) => Mix::Dense(c.to_dense()),
            Mix::Dense(m) => Mix::Dense(c.mul_dense(m)),
        };
        Channel::from_parts(model, self.blocks.clone(), c.mul_dense(&self.mw_phi), c.mul_vec(&self.mw_u0), mf)
    }
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Selection matrix transpose `Sᵀ` (n_full × rows) as a dense matrix.
fn scatter(n_full: usize, rows: &[usize]) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n_full, rows.len());
    for (k, &r) in rows.iter().enumerate() {
        s[(r, k)] = 1.0;
    }
    s
}

/// Exact residual: `y = r`.
pub fn exact_channel<M: FiniteVolumeModel + ?Sized>(model: &M, phi: &DMatrix<f64>, u0: &DVector<f64>) -> Result<Channel> {
    let n = model.n_dofs();
    check_basis(model, phi, u0)?;
    Channel::from_parts(
        model,
        vec![(RowKind::Velocity, all_rows(n))],
        phi.clone(),
        u0.clone(),
        Mix::Identity(n),
    )
}

fn check_basis<M: FiniteVolumeModel + ?Sized>(model: &M, phi: &DMatrix<f64>, u0: &DVector<f64>) -> Result<()> {
    let n = model.n_dofs();
    if phi.nrows() != n {
        return Err(Error::dim("basis rows", n, phi.nrows()));
    }
    if u0.len() != n {
        return Err(Error::dim("reference state", n, u0.len()));
    }
    Ok(())
}

/// Hyper-reduced residual approximation in the full state space:
/// `y = r̃ = α_0 w + … − Δt β_0 f̃(w) − …` (velocity and flux/source kinds) or
/// `y = A r` with `A` the gappy or collocation projector (residual kinds).
pub fn full_space_channel<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    kind: HyperKind,
    hyper: Option<&HyperOperators>,
) -> Result<Channel> {
    check_basis(model, phi, u0)?;
    if kind == HyperKind::None {
        return exact_channel(model, phi, u0);
    }
    let hyper = hyper.ok_or_else(|| Error::InvalidInput(format!("{kind} needs trained hyper-reduction operators")))?;
    let n = model.n_dofs();
    let sel = &hyper.selection;
    let state = |m: &DMatrix<f64>| -> (DMatrix<f64>, DVector<f64>) { (m * phi, m * u0) };
    match kind {
        HyperKind::None => unreachable!("handled above"),
        HyperKind::ResidualGappy => {
            let phi_r = hyper.basis(&hyper.phi_r, "residual")?;
            let rows = &sel.residual_rows;
            let q = phi_r * pinv(&select_rows(phi_r, rows));
            let mw = &q * scatter(n, rows).transpose();
            let (mw_phi, mw_u0) = state(&mw);
            Channel::from_parts(model, vec![(RowKind::Velocity, rows.clone())], mw_phi, mw_u0, Mix::Dense(q))
        }
        HyperKind::ResidualCollocation => {
            let rows = &sel.residual_rows;
            let st = scatter(n, rows);
            let (mw_phi, mw_u0) = state(&(&st * st.transpose()));
            Channel::from_parts(model, vec![(RowKind::Velocity, rows.clone())], mw_phi, mw_u0, Mix::Dense(st))
        }
        HyperKind::VelocityGappy => {
            let phi_v = hyper.basis(&hyper.phi_v, "velocity")?;
            let rows = sel.velocity_rows();
            let q = phi_v * pinv(&select_rows(phi_v, rows));
            Channel::from_parts(model, vec![(RowKind::Velocity, rows.to_vec())], phi.clone(), u0.clone(), Mix::Dense(q))
        }
        HyperKind::VelocityCollocation => {
            let rows = sel.velocity_rows();
            Channel::from_parts(
                model,
                vec![(RowKind::Velocity, rows.to_vec())],
                phi.clone(),
                u0.clone(),
                Mix::Dense(scatter(n, rows)),
            )
        }
        HyperKind::FluxSourceGappy | HyperKind::FluxSourceCollocation => {
            let b = model.mesh().incidence(model.n_vars()).matrix;
            let (hrows, srows) = (&sel.face_rows, sel.source_rows());
            let (qh, qs) = if kind == HyperKind::FluxSourceGappy {
                let phi_h = hyper.basis(&hyper.phi_h, "face-flux")?;
                let phi_s = hyper.basis(&hyper.phi_s, "source")?;
                (
                    phi_h * pinv(&select_rows(phi_h, hrows)),
                    phi_s * pinv(&select_rows(phi_s, srows)),
                )
            } else {
                (scatter(model.n_face_dofs(), hrows), scatter(n, srows))
            };
            let bh = b.mul_dense(&qh);
            let mut mf = DMatrix::zeros(n, bh.ncols() + qs.ncols());
            mf.columns_mut(0, bh.ncols()).copy_from(&bh);
            mf.columns_mut(bh.ncols(), qs.ncols()).copy_from(&qs);
            Channel::from_parts(
                model,
                vec![(RowKind::FaceFlux, hrows.clone()), (RowKind::Source, srows.to_vec())],
                phi.clone(),
                u0.clone(),
                Mix::Dense(mf),
            )
        }
    }
}

/// Objective channel of a projection. LSPG with residual gappy POD minimizes
/// the gappy coefficients `(S_rΦ_r)⁺ S_r r` (whose norm equals that of the
/// reconstructed residual) and with residual collocation `S_r r`; every other
/// case works in the full state space.
pub fn objective_channel<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    projection: Projection,
    spec: &ObjectiveSpec,
    hyper: Option<&HyperOperators>,
) -> Result<Channel> {
    check_basis(model, phi, u0)?;
    if projection == Projection::Lspg {
        match spec.kind {
            HyperKind::ResidualGappy => {
                let hyper = hyper.ok_or_else(|| Error::InvalidInput("residual gappy POD needs trained operators".into()))?;
                let phi_r = hyper.basis(&hyper.phi_r, "residual")?;
                let rows = &hyper.selection.residual_rows;
                let a = pinv(&select_rows(phi_r, rows));
                return Channel::from_parts(
                    model,
                    vec![(RowKind::Velocity, rows.clone())],
                    &a * select_rows(phi, rows),
                    &a * crate::training::select_entries(u0, rows),
                    Mix::Dense(a),
                );
            }
            HyperKind::ResidualCollocation => {
                let hyper = hyper.ok_or_else(|| Error::InvalidInput("residual collocation needs a sample mesh".into()))?;
                let rows = &hyper.selection.residual_rows;
                return Channel::from_parts(
                    model,
                    vec![(RowKind::Velocity, rows.clone())],
                    select_rows(phi, rows),
                    crate::training::select_entries(u0, rows),
                    Mix::Identity(rows.len()),
                );
            }
            _ => {}
        }
    }
    full_space_channel(model, phi, u0, spec.kind, hyper)
}

/// Reconstructs `u⁰ + Φû` on the listed dofs; other entries keep `u⁰`.
pub fn reconstruct_dofs(u0: &DVector<f64>, phi: &DMatrix<f64>, uhat: &DVector<f64>, dofs: Option<&[usize]>) -> DVector<f64> {
    match dofs {
        None => u0 + phi * uhat,
        Some(d) => {
            let mut w = u0.clone();
            for &i in d {
                w[i] += phi.row(i).transpose().dot(uhat);
            }
            w
        }
    }
}

/// `Φᵀ f(u⁰ + Φû, t)`.
pub fn galerkin_rhs<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    uhat: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    check_basis(model, phi, u0)?;
    if uhat.len() != phi.ncols() {
        return Err(Error::dim("generalized coordinates", phi.ncols(), uhat.len()));
    }
    let w = u0 + phi * uhat;
    Ok(phi.transpose() * model::velocity(model, &w, t)?)
}

/// `Φᵀ f̃(u⁰ + Φû, t)` with the velocity approximation of a full-space
/// channel (`f̃ = f` for the exact one).
pub fn hyper_galerkin_rhs<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    channel: &Channel,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    uhat: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    if channel.dim() != model.n_dofs() {
        return Err(Error::dim("Galerkin channel", model.n_dofs(), channel.dim()));
    }
    let dofs = cell_dofs(model, channel.cells());
    let w = reconstruct_dofs(u0, phi, uhat, Some(&dofs));
    let ev = channel.eval(model, &w, t, None)?;
    Ok(phi.transpose() * channel.velocity_part(&ev.g))
}

/// All dofs of the listed cells.
pub fn cell_dofs<M: FiniteVolumeModel + ?Sized>(model: &M, cells: &[usize]) -> Vec<usize> {
    let nc = model.mesh().n_cells();
    (0..model.n_vars()).flat_map(|i| cells.iter().map(move |&c| i * nc + c)).collect()
}

/// The residual-like vector of a channel at `w`, given the multistep history
/// (`history[0]` is the newest state): this is `r̃` (or `A r`) for objective
/// channels and `C̄ r̃` for constraint channels.
#[allow(clippy::too_many_arguments)]
pub fn hyper_residual<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    channel: &Channel,
    scheme: &crate::time::MultistepScheme,
    dt: f64,
    t: f64,
    phi: &DMatrix<f64>,
    u0: &DVector<f64>,
    uhat: &DVector<f64>,
    history: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let k = scheme.steps();
    if history.len() < k {
        return Err(Error::dim("reduced history", k, history.len()));
    }
    let dofs = cell_dofs(model, channel.cells());
    let mut y = channel.state_part(uhat) * scheme.alpha()[0];
    let times = |j: usize| t - j as f64 * dt;
    for j in 0..=k {
        let u = if j == 0 { uhat } else { &history[j - 1] };
        if j > 0 {
            y.axpy(scheme.alpha()[j], &channel.state_part(u), 1.0);
        }
        let b = scheme.beta()[j];
        if b != 0.0 {
            let w = reconstruct_dofs(u0, phi, u, Some(&dofs));
            let g = channel.eval(model, &w, times(j), None)?.g;
            y.axpy(-dt * b, &channel.velocity_part(&g), 1.0);
        }
    }
    Ok(y)
}

/// Dense copy of `M_f`, for diagnostics.
pub fn velocity_map(channel: &Channel) -> DMatrix<f64> {
    channel.mf.to_dense()
}
