//! One-dimensional finite-volume meshes, subdomain decompositions and the
//! operators that express conservation over them.
//!
//! Degrees of freedom are ordered variable-major: the state entry for
//! variable `i` on cell `j` lives at `i * n_cells + j`. Face fluxes follow the
//! same layout with `n_faces = n_cells + 1`, face `k` sitting between cells
//! `k - 1` and `k`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    edges: Vec<f64>,
    sizes: Vec<f64>,
}

/// Uniform partition of `[0, length]`.
pub fn build_mesh(length: f64, n_cells: usize) -> Result<Mesh> {
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::InvalidInput(format!("mesh length must be positive, got {length}")));
    }
    if n_cells == 0 {
        return Err(Error::InvalidInput("mesh needs at least one cell".into()));
    }
    let h = length / n_cells as f64;
    let mut edges: Vec<f64> = (0..=n_cells).map(|k| k as f64 * h).collect();
    edges[n_cells] = length;
    Ok(Mesh {
        edges,
        sizes: vec![h; n_cells],
    })
}

impl Mesh {
    pub fn from_edges(edges: Vec<f64>) -> Result<Mesh> {
        if edges.len() < 2 {
            return Err(Error::InvalidInput("mesh needs at least two edges".into()));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("mesh edges must be strictly increasing".into()));
        }
        let sizes = edges.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Mesh { edges, sizes })
    }

    pub fn n_cells(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_faces(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn cell_sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn length(&self) -> f64 {
        self.edges[self.edges.len() - 1] - self.edges[0]
    }

    pub fn center(&self, cell: usize) -> f64 {
        0.5 * (self.edges[cell] + self.edges[cell + 1])
    }

    /// Outward normal convention: positive toward increasing x.
    pub fn face_normal(&self) -> f64 {
        1.0
    }

    #[inline]
    pub fn dof(&self, var: usize, cell: usize) -> usize {
        var * self.n_cells() + cell
    }

    #[inline]
    pub fn face_dof(&self, var: usize, face: usize) -> usize {
        var * self.n_faces() + face
    }

    /// Incidence operator `B` mapping face fluxes to the flux part of the velocity.
    pub fn incidence(&self, n_vars: usize) -> IncidenceOperator {
        let nc = self.n_cells();
        let mut trip = Vec::with_capacity(2 * n_vars * nc);
        for i in 0..n_vars {
            for j in 0..nc {
                let inv = 1.0 / self.sizes[j];
                trip.push((self.dof(i, j), self.face_dof(i, j), inv));
                trip.push((self.dof(i, j), self.face_dof(i, j + 1), -inv));
            }
        }
        IncidenceOperator {
            n_vars,
            matrix: SparseMatrix::from_triplets(n_vars * nc, n_vars * self.n_faces(), &trip),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceOperator {
    pub n_vars: usize,
    pub matrix: SparseMatrix,
}

impl IncidenceOperator {
    pub fn apply(&self, h: &DVector<f64>) -> DVector<f64> {
        self.matrix.mul_vec(h)
    }
}

/// Grouping of cells into subdomains together with the aggregation operators.
#[derive(Debug, Clone)]
pub struct DecomposedMesh {
    mesh: Mesh,
    n_vars: usize,
    n_subdomains: usize,
    subdomain_of_cell: Vec<usize>,
    subdomain_sizes: Vec<f64>,
    /// Ē: 0/1 aggregation, N̄ × N.
    pub ebar: SparseMatrix,
    /// C̄ = V̄⁻¹ Ē V, N̄ × N.
    pub cbar: SparseMatrix,
    /// B̄ = C̄ B, N̄ × n_vars·N_e.
    pub bbar: SparseMatrix,
    boundary_faces: Vec<usize>,
}

/// Contiguous equal-count grouping; the remainder goes to the last subdomain.
pub fn build_decomposition(mesh: &Mesh, n_subdomains: usize, n_vars: usize) -> Result<DecomposedMesh> {
    let nc = mesh.n_cells();
    if n_subdomains == 0 || n_subdomains > nc {
        return Err(Error::InvalidInput(format!(
            "number of subdomains must lie in 1..={nc}, got {n_subdomains}"
        )));
    }
    let per = nc / n_subdomains;
    let assignment = (0..nc).map(|j| (j / per).min(n_subdomains - 1)).collect();
    DecomposedMesh::from_assignment(mesh, assignment, n_vars)
}

impl DecomposedMesh {
    /// Builds a decomposition from an explicit cell → subdomain map. Every
    /// subdomain index in `0..max+1` must own at least one cell.
    pub fn from_assignment(mesh: &Mesh, subdomain_of_cell: Vec<usize>, n_vars: usize) -> Result<Self> {
        let nc = mesh.n_cells();
        if subdomain_of_cell.len() != nc {
            return Err(Error::dim("subdomain assignment", nc, subdomain_of_cell.len()));
        }
        if n_vars == 0 {
            return Err(Error::InvalidInput("need at least one conserved variable".into()));
        }
        let n_sub = subdomain_of_cell.iter().max().map_or(0, |m| m + 1);
        let mut sub_sizes = vec![0.0; n_sub];
        let mut counts = vec![0usize; n_sub];
        for (j, &s) in subdomain_of_cell.iter().enumerate() {
            sub_sizes[s] += mesh.sizes[j];
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidInput(format!("subdomain {empty} owns no cells")));
        }

        let nbar = n_vars * n_sub;
        let n = n_vars * nc;
        let mut e_trip = Vec::with_capacity(n);
        let mut c_trip = Vec::with_capacity(n);
        for i in 0..n_vars {
            for (j, &s) in subdomain_of_cell.iter().enumerate() {
                let row = i * n_sub + s;
                e_trip.push((row, mesh.dof(i, j), 1.0));
                c_trip.push((row, mesh.dof(i, j), mesh.sizes[j] / sub_sizes[s]));
            }
        }

        // Each cell contributes +1/|Ω̄| on its left face and −1/|Ω̄| on its right
        // face; counting signs first keeps interior cancellations exact.
        let nf = mesh.n_faces();
        let mut b_trip = Vec::new();
        let mut boundary = vec![false; nf];
        for (s, &size) in sub_sizes.iter().enumerate() {
            let mut net = std::collections::BTreeMap::<usize, i64>::new();
            for (j, &sj) in subdomain_of_cell.iter().enumerate() {
                if sj == s {
                    *net.entry(j).or_default() += 1;
                    *net.entry(j + 1).or_default() -= 1;
                }
            }
            for (&face, &count) in &net {
                if count != 0 {
                    boundary[face] = true;
                    for i in 0..n_vars {
                        b_trip.push((i * n_sub + s, mesh.face_dof(i, face), count as f64 / size));
                    }
                }
            }
        }

        Ok(DecomposedMesh {
            mesh: mesh.clone(),
            n_vars,
            n_subdomains: n_sub,
            subdomain_of_cell,
            subdomain_sizes: sub_sizes,
            ebar: SparseMatrix::from_triplets(nbar, n, &e_trip),
            cbar: SparseMatrix::from_triplets(nbar, n, &c_trip),
            bbar: SparseMatrix::from_triplets(nbar, n_vars * nf, &b_trip),
            boundary_faces: (0..nf).filter(|&k| boundary[k]).collect(),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_subdomains(&self) -> usize {
        self.n_subdomains
    }

    /// N̄ = n_vars · N̄_Ω.
    pub fn n_constraints(&self) -> usize {
        self.n_vars * self.n_subdomains
    }

    pub fn subdomain_of_cell(&self) -> &[usize] {
        &self.subdomain_of_cell
    }

    pub fn subdomain_sizes(&self) -> &[f64] {
        &self.subdomain_sizes
    }

    /// Faces on the boundary of at least one subdomain (ε̄).
    pub fn boundary_faces(&self) -> &[usize] {
        &self.boundary_faces
    }

    /// Diagonal of V (cell volumes per dof).
    pub fn cell_volumes(&self) -> DVector<f64> {
        let nc = self.mesh.n_cells();
        DVector::from_fn(self.n_vars * nc, |k, _| self.mesh.sizes[k % nc])
    }

    /// Diagonal of V̄ (subdomain volumes per constraint row).
    pub fn subdomain_volumes(&self) -> DVector<f64> {
        DVector::from_fn(self.n_constraints(), |k, _| self.subdomain_sizes[k % self.n_subdomains])
    }

    pub fn is_global(&self) -> bool {
        self.n_subdomains == 1
    }
}

/// ū = C̄u.
pub fn aggregate_state(decomp: &DecomposedMesh, u: &DVector<f64>) -> Result<DVector<f64>> {
    if u.len() != decomp.cbar.ncols() {
        return Err(Error::dim("aggregate_state", decomp.cbar.ncols(), u.len()));
    }
    Ok(decomp.cbar.mul_vec(u))
}

/// One fewer subdomain, regrouped contiguously (not necessarily nested).
pub fn coarsen(decomp: &DecomposedMesh) -> Result<DecomposedMesh> {
    if decomp.n_subdomains <= 1 {
        return Err(Error::CannotCoarsen);
    }
    build_decomposition(&decomp.mesh, decomp.n_subdomains - 1, decomp.n_vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn uniform_mesh_sizes() {
        let m = build_mesh(0.25, 100).unwrap();
        assert_eq!(m.n_cells(), 100);
        assert!(m.cell_sizes().iter().all(|&h| (h - 0.0025).abs() < 1e-15));
        let m = build_mesh(0.25, 500).unwrap();
        assert!(m.cell_sizes().iter().all(|&h| (h - 5e-4).abs() < 1e-15));
        let m = build_mesh(1.0, 1).unwrap();
        assert_eq!(m.edges(), &[0.0, 1.0]);
        assert!(build_mesh(0.0, 3).is_err());
        assert!(build_mesh(1.0, 0).is_err());
        assert!(Mesh::from_edges(vec![0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn incidence_columns() {
        let m = Mesh::from_edges(vec![0.0, 0.1, 0.3, 0.6]).unwrap();
        let b = m.incidence(2).matrix.to_dense();
        for col in 0..b.ncols() {
            let face = col % m.n_faces();
            let nnz = b.column(col).iter().filter(|v| **v != 0.0).count();
            let weighted: f64 = (0..b.nrows()).map(|r| b[(r, col)] * m.cell_sizes()[r % 3]).sum();
            if face == 0 || face == 3 {
                assert_eq!(nnz, 1);
            } else {
                assert_eq!(nnz, 2);
                assert!(weighted.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn global_decomposition_weights() {
        let m = build_mesh(0.25, 100).unwrap();
        let d = build_decomposition(&m, 1, 3).unwrap();
        let c = d.cbar.to_dense();
        assert_eq!(c.nrows(), 3);
        for i in 0..3 {
            for j in 0..300 {
                let expect = if j / 100 == i { 0.01 } else { 0.0 };
                assert!((c[(i, j)] - expect).abs() < 1e-15);
            }
        }
        assert_eq!(d.boundary_faces(), &[0, 100]);
    }

    #[test]
    fn identity_decomposition() {
        let m = build_mesh(0.25, 100).unwrap();
        let d = build_decomposition(&m, 100, 3).unwrap();
        assert_eq!(d.cbar.to_dense(), DMatrix::identity(300, 300));
        let u = DVector::from_fn(300, |k, _| (k as f64).sin());
        assert_eq!(aggregate_state(&d, &u).unwrap(), u);
    }

    #[test]
    fn remainder_goes_last_and_bbar_is_product() {
        let m = build_mesh(1.0, 10).unwrap();
        let d = build_decomposition(&m, 3, 1).unwrap();
        assert_eq!(d.subdomain_of_cell(), &[0, 0, 0, 1, 1, 1, 2, 2, 2, 2]);
        // assemble by definition
        let n = 10;
        let mut e = DMatrix::zeros(3, n);
        for (j, &s) in d.subdomain_of_cell().iter().enumerate() {
            e[(s, j)] = 1.0;
        }
        let v = DMatrix::from_diagonal(&d.cell_volumes());
        let vbar_inv = DMatrix::from_diagonal(&d.subdomain_volumes().map(|x| 1.0 / x));
        let cbar = &vbar_inv * &e * &v;
        assert_eq!(d.ebar.to_dense(), e);
        assert!(d.cbar.max_abs_diff(&cbar) == 0.0);
        let bbar = &cbar * m.incidence(1).matrix.to_dense();
        assert!(d.bbar.max_abs_diff(&bbar) <= 1e-14 * bbar.amax());
    }

    #[test]
    fn aggregate_matches_brute_force() {
        let m = Mesh::from_edges(vec![0.0, 0.1, 0.15, 0.4, 0.45, 0.6, 0.7, 0.8, 0.85, 0.95, 1.0]).unwrap();
        let d = build_decomposition(&m, 2, 1).unwrap();
        let u = DVector::from_fn(10, |k, _| (3.0 * k as f64).cos());
        let ubar = aggregate_state(&d, &u).unwrap();
        for s in 0..2 {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..10 {
                if d.subdomain_of_cell()[j] == s {
                    num += u[j] * m.cell_sizes()[j];
                    den += m.cell_sizes()[j];
                }
            }
            assert!((ubar[s] - num / den).abs() < 1e-14);
        }
        assert!(aggregate_state(&d, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn coarsening_chain() {
        let m = build_mesh(1.0, 12).unwrap();
        let mut d = build_decomposition(&m, 5, 2).unwrap();
        let mut calls = 0;
        while let Ok(next) = coarsen(&d) {
            d = next;
            calls += 1;
            let ones = DVector::from_element(24, 1.0);
            let agg = aggregate_state(&d, &ones).unwrap();
            assert!(agg.iter().all(|v| (v - 1.0).abs() < 1e-14));
        }
        assert_eq!(calls, 4);
        let global = build_decomposition(&m, 1, 2).unwrap();
        assert_eq!(d.cbar, global.cbar);
        assert!(matches!(coarsen(&d), Err(Error::CannotCoarsen)));
        assert!(build_decomposition(&m, 13, 2).is_err());
    }

    proptest! {
        #[test]
        fn telescoping_leaves_boundary_faces_only(h in prop::collection::vec(-10.0f64..10.0, 3 * 9)) {
            let m = build_mesh(0.25, 8).unwrap();
            let d = build_decomposition(&m, 1, 3).unwrap();
            let h = DVector::from_vec(h);
            let via_b = d.cbar.mul_vec(&m.incidence(3).apply(&h));
            for i in 0..3 {
                let expect = (h[m.face_dof(i, 0)] - h[m.face_dof(i, 8)]) / 0.25;
                prop_assert!((via_b[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn conservation_carries_to_unions(
            r in prop::collection::vec(-1.0f64..1.0, 12),
            edges in prop::collection::vec(0.1f64..1.0, 12),
        ) {
            let mut x = vec![0.0];
            for e in &edges { x.push(x.last().unwrap() + e); }
            let m = Mesh::from_edges(x).unwrap();
            let fine = build_decomposition(&m, 6, 1).unwrap();
            // project r onto the null space of the fine C̄
            let c = fine.cbar.to_dense();
            let r = DVector::from_vec(r);
            let r = &r - c.transpose() * crate::linalg::lstsq(&(&c * c.transpose()), &(&c * &r));
            prop_assert!(fine.cbar.mul_vec(&r).amax() < 1e-12);
            let pairs: Vec<usize> = fine.subdomain_of_cell().iter().map(|s| s / 2).collect();
            let coarse = DecomposedMesh::from_assignment(&m, pairs, 1).unwrap();
            prop_assert!(coarse.cbar.mul_vec(&r).amax() <= 1e-12 * (1.0 + r.amax()));
        }
    }
}
