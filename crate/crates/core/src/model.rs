//! The finite-volume model abstraction and the assembly of velocities, face
//! fluxes, sources and their Jacobians from local per-face/per-cell kernels.
//!
//! Everything downstream (full-order solves, hyper-reduced ROMs) goes through
//! the local kernels, so sampled evaluations only touch the cells they need.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fv::Mesh;
use crate::linalg::BandedMatrix;
use crate::sparse::SparseMatrix;

/// Largest number of conserved variables supported by the stack buffers.
pub const MAX_VARS: usize = 4;

pub type Block = [f64; MAX_VARS * MAX_VARS];

/// Finite-difference step used for Jacobian columns.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    1e-7f64.max(1e-7 * x.abs())
}

pub trait FiniteVolumeModel: Send + Sync {
    fn mesh(&self) -> &Mesh;

    fn n_vars(&self) -> usize;

    /// Numerical flux through `face` given the states of the adjacent cells
    /// (`None` on the domain boundary). Writes `n_vars` values.
    fn face_flux(&self, face: usize, left: Option<&[f64]>, right: Option<&[f64]>, t: f64, out: &mut [f64]) -> Result<()>;

    /// Cell-averaged source term of `cell`. Writes `n_vars` values.
    fn source(&self, cell: usize, state: &[f64], t: f64, out: &mut [f64]) -> Result<()>;

    /// Derivatives of the face flux with respect to the left and right states,
    /// row-major `n_vars × n_vars` blocks. Absent sides are left untouched.
    fn face_flux_jacobian(
        &self,
        face: usize,
        left: Option<&[f64]>,
        right: Option<&[f64]>,
        t: f64,
        d_left: &mut Block,
        d_right: &mut Block,
    ) -> Result<()> {
        let n = self.n_vars();
        let mut base = [0.0; MAX_VARS];
        let mut pert = [0.0; MAX_VARS];
        self.face_flux(face, left, right, t, &mut base[..n])?;
        if let Some(l) = left {
            let mut w = [0.0; MAX_VARS];
            w[..n].copy_from_slice(l);
            for c in 0..n {
                let h = fd_step(l[c]);
                w[c] = l[c] + h;
                self.face_flux(face, Some(&w[..n]), right, t, &mut pert[..n])?;
                w[c] = l[c];
                for r in 0..n {
                    d_left[r * n + c] = (pert[r] - base[r]) / h;
                }
            }
        }
        if let Some(rs) = right {
            let mut w = [0.0; MAX_VARS];
            w[..n].copy_from_slice(rs);
            for c in 0..n {
                let h = fd_step(rs[c]);
                w[c] = rs[c] + h;
                self.face_flux(face, left, Some(&w[..n]), t, &mut pert[..n])?;
                w[c] = rs[c];
                for r in 0..n {
                    d_right[r * n + c] = (pert[r] - base[r]) / h;
                }
            }
        }
        Ok(())
    }

    /// Derivative of the cell source with respect to the cell state.
    fn source_jacobian(&self, cell: usize, state: &[f64], t: f64, out: &mut Block) -> Result<()> {
        let n = self.n_vars();
        let mut base = [0.0; MAX_VARS];
        let mut pert = [0.0; MAX_VARS];
        self.source(cell, state, t, &mut base[..n])?;
        let mut w = [0.0; MAX_VARS];
        w[..n].copy_from_slice(state);
        for c in 0..n {
            let h = fd_step(state[c]);
            w[c] = state[c] + h;
            self.source(cell, &w[..n], t, &mut pert[..n])?;
            w[c] = state[c];
            for r in 0..n {
                out[r * n + c] = (pert[r] - base[r]) / h;
            }
        }
        Ok(())
    }

    fn n_dofs(&self) -> usize {
        self.n_vars() * self.mesh().n_cells()
    }

    fn n_face_dofs(&self) -> usize {
        self.n_vars() * self.mesh().n_faces()
    }
}

/// Gathers the conserved variables of `cell` into a stack buffer.
#[inline]
pub fn cell_state(u: &DVector<f64>, n_cells: usize, n_vars: usize, cell: usize) -> [f64; MAX_VARS] {
    let mut out = [0.0; MAX_VARS];
    for (i, o) in out.iter_mut().enumerate().take(n_vars) {
        *o = u[i * n_cells + cell];
    }
    out
}

fn check_len<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>) -> Result<()> {
    if u.len() != model.n_dofs() {
        return Err(Error::dim("state vector", model.n_dofs(), u.len()));
    }
    Ok(())
}

fn flux_at<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, face: usize, t: f64) -> Result<[f64; MAX_VARS]> {
    let nc = model.mesh().n_cells();
    let nv = model.n_vars();
    let left = (face > 0).then(|| cell_state(u, nc, nv, face - 1));
    let right = (face < nc).then(|| cell_state(u, nc, nv, face));
    let mut out = [0.0; MAX_VARS];
    model.face_flux(
        face,
        left.as_ref().map(|s| &s[..nv]),
        right.as_ref().map(|s| &s[..nv]),
        t,
        &mut out[..nv],
    )?;
    Ok(out)
}

fn source_at<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, cell: usize, t: f64) -> Result<[f64; MAX_VARS]> {
    let nc = model.mesh().n_cells();
    let nv = model.n_vars();
    let s = cell_state(u, nc, nv, cell);
    let mut out = [0.0; MAX_VARS];
    model.source(cell, &s[..nv], t, &mut out[..nv])?;
    Ok(out)
}

/// All face fluxes `h`, length `n_vars · N_e`.
pub fn face_fluxes<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_len(model, u)?;
    let nf = model.mesh().n_faces();
    let nv = model.n_vars();
    let mut h = DVector::zeros(nv * nf);
    for k in 0..nf {
        let f = flux_at(model, u, k, t)?;
        for i in 0..nv {
            h[i * nf + k] = f[i];
        }
    }
    Ok(h)
}

/// All cell sources `f^s`, length `N`.
pub fn sources<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_len(model, u)?;
    let nc = model.mesh().n_cells();
    let nv = model.n_vars();
    let mut s = DVector::zeros(nv * nc);
    for j in 0..nc {
        let v = source_at(model, u, j, t)?;
        for i in 0..nv {
            s[i * nc + j] = v[i];
        }
    }
    Ok(s)
}

/// Velocity `f = B h + f^s`.
pub fn velocity<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let h = face_fluxes(model, u, t)?;
    let mut f = sources(model, u, t)?;
    let mesh = model.mesh();
    let (nc, nf) = (mesh.n_cells(), mesh.n_faces());
    for i in 0..model.n_vars() {
        for j in 0..nc {
            f[i * nc + j] += (h[i * nf + j] - h[i * nf + j + 1]) / mesh.cell_sizes()[j];
        }
    }
    Ok(f)
}

/// Norm of `|B||h| + |f^s|`: the magnitude of the terms whose cancellation
/// forms the velocity, which sets the round-off level of any computed `f`.
pub fn velocity_magnitude<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, t: f64) -> Result<f64> {
    let h = face_fluxes(model, u, t)?;
    let s = sources(model, u, t)?;
    let mesh = model.mesh();
    let (nc, nf) = (mesh.n_cells(), mesh.n_faces());
    let mut acc = 0.0;
    for i in 0..model.n_vars() {
        for j in 0..nc {
            let v = (h[i * nf + j].abs() + h[i * nf + j + 1].abs()) / mesh.cell_sizes()[j] + s[i * nc + j].abs();
            acc += v * v;
        }
    }
    Ok(acc.sqrt())
}

/// Which vector a set of sampled rows refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Rows of the velocity `f` (state dofs).
    Velocity,
    /// Rows of the face-flux vector `h` (face dofs).
    FaceFlux,
    /// Rows of the source vector `f^s` (state dofs).
    Source,
}

/// Evaluates selected rows of `f`, `h` or `f^s`, touching only the faces and
/// cells those rows depend on.
pub fn eval_rows<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    u: &DVector<f64>,
    t: f64,
    kind: RowKind,
    rows: &[usize],
) -> Result<DVector<f64>> {
    Ok(eval_rows_with_magnitude(model, u, t, kind, rows)?.0)
}

/// Like [`eval_rows`], also returning for each row the magnitude of the terms
/// it sums (`(|h_in| + |h_out|)/|Ω_j| + |s_j|` for velocity rows), which sets
/// the scale of its round-off error.
pub fn eval_rows_with_magnitude<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    u: &DVector<f64>,
    t: f64,
    kind: RowKind,
    rows: &[usize],
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len(model, u)?;
    let mesh = model.mesh();
    let (nc, nf) = (mesh.n_cells(), mesh.n_faces());
    let mut flux_cache: HashMap<usize, [f64; MAX_VARS]> = HashMap::new();
    let mut src_cache: HashMap<usize, [f64; MAX_VARS]> = HashMap::new();
    let mut out = DVector::zeros(rows.len());
    let mut mag = DVector::zeros(rows.len());
    for (r, &row) in rows.iter().enumerate() {
        let (v, m) = match kind {
            RowKind::FaceFlux => {
                let (i, k) = (row / nf, row % nf);
                let f = cached(&mut flux_cache, k, || flux_at(model, u, k, t))?[i];
                (f, f.abs())
            }
            RowKind::Source => {
                let (i, j) = (row / nc, row % nc);
                let s = cached(&mut src_cache, j, || source_at(model, u, j, t))?[i];
                (s, s.abs())
            }
            RowKind::Velocity => {
                let (i, j) = (row / nc, row % nc);
                let fl = cached(&mut flux_cache, j, || flux_at(model, u, j, t))?[i];
                let fr = cached(&mut flux_cache, j + 1, || flux_at(model, u, j + 1, t))?[i];
                let s = cached(&mut src_cache, j, || source_at(model, u, j, t))?[i];
                let inv = 1.0 / mesh.cell_sizes()[j];
                ((fl - fr) * inv + s, (fl.abs() + fr.abs()) * inv + s.abs())
            }
        };
        out[r] = v;
        mag[r] = m;
    }
    Ok((out, mag))
}

/// Cells whose states the given rows depend on (sorted, unique).
pub fn stencil_cells(mesh: &Mesh, kind: RowKind, rows: &[usize]) -> Vec<usize> {
    let (nc, nf) = (mesh.n_cells(), mesh.n_faces());
    let mut cells = Vec::new();
    for &row in rows {
        match kind {
            RowKind::FaceFlux => {
                let k = row % nf;
                if k > 0 {
                    cells.push(k - 1);
                }
                if k < nc {
                    cells.push(k);
                }
            }
            RowKind::Source => cells.push(row % nc),
            RowKind::Velocity => {
                let j = row % nc;
                if j > 0 {
                    cells.push(j - 1);
                }
                cells.push(j);
                if j + 1 < nc {
                    cells.push(j + 1);
                }
            }
        }
    }
    cells.sort_unstable();
    cells.dedup();
    cells
}

fn cached<F>(cache: &mut HashMap<usize, [f64; MAX_VARS]>, key: usize, f: F) -> Result<[f64; MAX_VARS]>
where
    F: FnOnce() -> Result<[f64; MAX_VARS]>,
{
    if let Some(v) = cache.get(&key) {
        return Ok(*v);
    }
    let v = f()?;
    cache.insert(key, v);
    Ok(v)
}

struct LocalJacobians<'a, M: FiniteVolumeModel + ?Sized> {
    model: &'a M,
    u: &'a DVector<f64>,
    t: f64,
    faces: HashMap<usize, (Block, Block)>,
    cells: HashMap<usize, Block>,
}

impl<'a, M: FiniteVolumeModel + ?Sized> LocalJacobians<'a, M> {
    fn new(model: &'a M, u: &'a DVector<f64>, t: f64) -> Self {
        LocalJacobians {
            model,
            u,
            t,
            faces: HashMap::new(),
            cells: HashMap::new(),
        }
    }

    fn face(&mut self, k: usize) -> Result<(Block, Block)> {
        if let Some(b) = self.faces.get(&k) {
            return Ok(*b);
        }
        let nc = self.model.mesh().n_cells();
        let nv = self.model.n_vars();
        let left = (k > 0).then(|| cell_state(self.u, nc, nv, k - 1));
        let right = (k < nc).then(|| cell_state(self.u, nc, nv, k));
        let mut dl = [0.0; MAX_VARS * MAX_VARS];
        let mut dr = [0.0; MAX_VARS * MAX_VARS];
        self.model.face_flux_jacobian(
            k,
            left.as_ref().map(|s| &s[..nv]),
            right.as_ref().map(|s| &s[..nv]),
            self.t,
            &mut dl,
            &mut dr,
        )?;
        self.faces.insert(k, (dl, dr));
        Ok((dl, dr))
    }

    fn cell(&mut self, j: usize) -> Result<Block> {
        if let Some(b) = self.cells.get(&j) {
            return Ok(*b);
        }
        let nc = self.model.mesh().n_cells();
        let nv = self.model.n_vars();
        let s = cell_state(self.u, nc, nv, j);
        let mut ds = [0.0; MAX_VARS * MAX_VARS];
        self.model.source_jacobian(j, &s[..nv], self.t, &mut ds)?;
        self.cells.insert(j, ds);
        Ok(ds)
    }
}

/// Jacobian rows (with respect to the state) of selected entries of `f`, `h`
/// or `f^s`, as a sparse `rows.len() × N` matrix.
pub fn jacobian_rows<M: FiniteVolumeModel + ?Sized>(
    model: &M,
    u: &DVector<f64>,
    t: f64,
    kind: RowKind,
    rows: &[usize],
) -> Result<SparseMatrix> {
    check_len(model, u)?;
    let mesh = model.mesh();
    let (nc, nf, nv) = (mesh.n_cells(), mesh.n_faces(), model.n_vars());
    let mut local = LocalJacobians::new(model, u, t);
    let mut trip = Vec::with_capacity(rows.len() * 3 * nv);
    for (r, &row) in rows.iter().enumerate() {
        match kind {
            RowKind::FaceFlux => {
                let (i, k) = (row / nf, row % nf);
                let (dl, dr) = local.face(k)?;
                for c in 0..nv {
                    if k > 0 {
                        trip.push((r, c * nc + k - 1, dl[i * nv + c]));
                    }
                    if k < nc {
                        trip.push((r, c * nc + k, dr[i * nv + c]));
                    }
                }
            }
            RowKind::Source => {
                let (i, j) = (row / nc, row % nc);
                let ds = local.cell(j)?;
                for c in 0..nv {
                    trip.push((r, c * nc + j, ds[i * nv + c]));
                }
            }
            RowKind::Velocity => {
                let (i, j) = (row / nc, row % nc);
                let inv = 1.0 / mesh.cell_sizes()[j];
                let (dl_in, dr_in) = local.face(j)?;
                let (dl_out, dr_out) = local.face(j + 1)?;
                let ds = local.cell(j)?;
                for c in 0..nv {
                    if j > 0 {
                        trip.push((r, c * nc + j - 1, inv * dl_in[i * nv + c]));
                    }
                    let diag = inv * (dr_in[i * nv + c] - dl_out[i * nv + c]) + ds[i * nv + c];
                    trip.push((r, c * nc + j, diag));
                    if j + 1 < nc {
                        trip.push((r, c * nc + j + 1, -inv * dr_out[i * nv + c]));
                    }
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(rows.len(), nv * nc, &trip))
}

/// Full velocity Jacobian as a sparse matrix.
pub fn velocity_jacobian<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, t: f64) -> Result<SparseMatrix> {
    let rows: Vec<usize> = (0..model.n_dofs()).collect();
    jacobian_rows(model, u, t, RowKind::Velocity, &rows)
}

/// Column-by-column one-sided finite-difference velocity Jacobian (dense).
pub fn velocity_jacobian_fd<M: FiniteVolumeModel + ?Sized>(model: &M, u: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
    let f0 = velocity(model, u, t)?;
    let n = u.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut w = u.clone();
    for c in 0..n {
        let h = fd_step(u[c]);
        w[c] = u[c] + h;
        let f1 = velocity(model, &w, t)?;
        w[c] = u[c];
        jac.set_column(c, &((f1 - &f0) / h));
    }
    Ok(jac)
}

/// Permutation from variable-major dofs to cell-major order, which makes the
/// first-order stencil banded with half-bandwidth `2·n_vars − 1`.
#[inline]
pub fn cell_major(dof: usize, n_cells: usize, n_vars: usize) -> usize {
    (dof % n_cells) * n_vars + dof / n_cells
}

/// Assembles `a·I + b·J` in cell-major banded storage.
pub fn banded_shifted(jac: &SparseMatrix, a: f64, b: f64, n_cells: usize, n_vars: usize) -> BandedMatrix {
    let n = jac.nrows();
    let bw = 2 * n_vars - 1;
    let mut band = BandedMatrix::zeros(n, bw, bw);
    for (i, j, v) in jac.triplets() {
        band.add(cell_major(i, n_cells, n_vars), cell_major(j, n_cells, n_vars), b * v);
    }
    for i in 0..n {
        band.add(i, i, a);
    }
    band
}

/// Solves `(a·I + b·J) x = rhs` for a first-order stencil Jacobian.
pub fn solve_shifted(jac: &SparseMatrix, a: f64, b: f64, n_cells: usize, n_vars: usize, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = rhs.len();
    let mut permuted = DVector::zeros(n);
    for i in 0..n {
        permuted[cell_major(i, n_cells, n_vars)] = rhs[i];
    }
    let y = banded_shifted(jac, a, b, n_cells, n_vars).solve(&permuted)?;
    Ok(DVector::from_fn(n, |i, _| y[cell_major(i, n_cells, n_vars)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::LinearAdvection;

    #[test]
    fn sampled_rows_match_full_vectors() {
        let model = LinearAdvection::new(1.0, 12, vec![1.0, 0.5], 0.3, vec![2.0, -1.0]).unwrap();
        let u = DVector::from_fn(24, |k, _| (0.7 * k as f64).sin());
        let f = velocity(&model, &u, 0.0).unwrap();
        let h = face_fluxes(&model, &u, 0.0).unwrap();
        let s = sources(&model, &u, 0.0).unwrap();
        let rows = [0usize, 5, 11, 12, 23];
        let fr = eval_rows(&model, &u, 0.0, RowKind::Velocity, &rows).unwrap();
        let sr = eval_rows(&model, &u, 0.0, RowKind::Source, &rows).unwrap();
        for (r, &k) in rows.iter().enumerate() {
            assert!((fr[r] - f[k]).abs() < 1e-13);
            assert!((sr[r] - s[k]).abs() < 1e-13);
        }
        let faces = [0usize, 12, 13, 25];
        let hr = eval_rows(&model, &u, 0.0, RowKind::FaceFlux, &faces).unwrap();
        for (r, &k) in faces.iter().enumerate() {
            assert!((hr[r] - h[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn shifted_banded_solve_matches_dense() {
        let model = LinearAdvection::new(1.0, 9, vec![1.0, 2.0, 0.5], 0.1, vec![1.0, 1.0, 1.0]).unwrap();
        let u = DVector::from_fn(27, |k, _| k as f64 * 0.01);
        let jac = velocity_jacobian(&model, &u, 0.0).unwrap();
        let rhs = DVector::from_fn(27, |k, _| (k as f64).cos());
        let x = solve_shifted(&jac, 1.0, -0.05, 9, 3, &rhs).unwrap();
        let dense = DMatrix::identity(27, 27) - jac.to_dense() * 0.05;
        assert!((dense * x - rhs).amax() < 1e-12);
    }
}
