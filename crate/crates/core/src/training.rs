//! Snapshot collection, POD bases, greedy sample meshes and gappy operators.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::Mesh;
use crate::linalg::SortedSvd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotKind {
    State,
    Residual,
    Velocity,
    FaceFlux,
    Source,
}

impl fmt::Display for SnapshotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SnapshotKind::State => "state",
            SnapshotKind::Residual => "residual",
            SnapshotKind::Velocity => "velocity",
            SnapshotKind::FaceFlux => "face_flux",
            SnapshotKind::Source => "source",
        };
        f.write_str(s)
    }
}

/// Snapshot columns of one kind, with the parameter each column came from.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub kind: SnapshotKind,
    pub columns: Vec<DVector<f64>>,
    pub params: Vec<f64>,
}

impl SnapshotSet {
    pub fn new(kind: SnapshotKind) -> Self {
        SnapshotSet {
            kind,
            columns: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn push(&mut self, column: DVector<f64>, mu: f64) -> Result<()> {
        if let Some(first) = self.columns.first() {
            if first.len() != column.len() {
                return Err(Error::dim("snapshot column", first.len(), column.len()));
            }
        }
        self.columns.push(column);
        self.params.push(mu);
        Ok(())
    }

    /// State snapshots are stored with the initial condition subtracted.
    pub fn push_states(&mut self, states: &[DVector<f64>], u0: &DVector<f64>, mu: f64) -> Result<()> {
        for s in states {
            self.push(s - u0, mu)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        if self.columns.is_empty() {
            return DMatrix::zeros(0, 0);
        }
        DMatrix::from_columns(&self.columns)
    }
}

/// Orthonormal basis `Φ` with the singular values of the data it came from.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub kind: SnapshotKind,
    pub phi: DMatrix<f64>,
    /// All singular values of the snapshot matrix, decreasing.
    pub singular_values: Vec<f64>,
}

impl ReducedBasis {
    pub fn from_matrix(kind: SnapshotKind, phi: DMatrix<f64>) -> Self {
        ReducedBasis {
            kind,
            phi,
            singular_values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    /// `Σ_{i≤p} σ_i² / Σ σ_i²`.
    pub fn retained_energy(&self) -> f64 {
        energy(&self.singular_values, self.dim())
    }
}

pub fn energy(singular_values: &[f64], p: usize) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1.0;
    }
    singular_values.iter().take(p).map(|s| s * s).sum::<f64>() / total
}

/// First `p` left singular vectors of the snapshot matrix.
pub fn pod(snapshots: &SnapshotSet, p: usize) -> Result<ReducedBasis> {
    if snapshots.is_empty() {
        return Err(Error::RankTooLow {
            requested: p,
            achievable: 0,
        });
    }
    let svd = SortedSvd::new(&snapshots.matrix());
    let rank = svd.rank();
    if p > rank {
        return Err(Error::RankTooLow {
            requested: p,
            achievable: rank,
        });
    }
    Ok(ReducedBasis {
        kind: snapshots.kind,
        phi: svd.u.columns(0, p).into_owned(),
        singular_values: svd.s.iter().copied().collect(),
    })
}

/// Like [`pod`], but caps the dimension at the numerical rank of the
/// snapshots (with a warning) instead of failing.
pub fn pod_capped(snapshots: &SnapshotSet, p: usize) -> Result<ReducedBasis> {
    match pod(snapshots, p) {
        Err(Error::RankTooLow { achievable, .. }) if achievable > 0 => {
            log::warn!("{} snapshots have rank {achievable}; using {achievable} instead of {p} basis vectors", snapshots.kind);
            pod(snapshots, achievable)
        }
        other => other,
    }
}

/// Index sets realizing the sampling matrices of a sample mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSelection {
    /// Sampled cells, increasing.
    pub cells: Vec<usize>,
    /// Residual rows (also used for the velocity and source).
    pub residual_rows: Vec<usize>,
    /// Face-flux rows: every face touching a sampled cell.
    pub face_rows: Vec<usize>,
}

impl SampleSelection {
    pub fn from_cells(mut cells: Vec<usize>, mesh: &Mesh, n_vars: usize) -> Result<Self> {
        cells.sort_unstable();
        cells.dedup();
        let nc = mesh.n_cells();
        if let Some(&bad) = cells.iter().find(|&&c| c >= nc) {
            return Err(Error::InvalidInput(format!("sampled cell {bad} outside mesh of {nc} cells")));
        }
        let residual_rows = (0..n_vars).flat_map(|i| cells.iter().map(move |&c| i * nc + c)).collect();
        let mut faces: Vec<usize> = cells.iter().flat_map(|&c| [c, c + 1]).collect();
        faces.sort_unstable();
        faces.dedup();
        let nf = mesh.n_faces();
        let face_rows = (0..n_vars).flat_map(|i| faces.iter().map(move |&k| i * nf + k)).collect();
        Ok(SampleSelection {
            cells,
            residual_rows,
            face_rows,
        })
    }

    pub fn velocity_rows(&self) -> &[usize] {
        &self.residual_rows
    }

    pub fn source_rows(&self) -> &[usize] {
        &self.residual_rows
    }

    /// Faces adjacent to the sampled cells.
    pub fn faces(&self, mesh: &Mesh) -> Vec<usize> {
        let nf = mesh.n_faces();
        let mut f: Vec<usize> = self.face_rows.iter().map(|r| r % nf).collect();
        f.dedup();
        f.sort_unstable();
        f.dedup();
        f
    }
}

/// Rows of `m` indexed by `rows`.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| v[rows[r]])
}

/// Cell-blocked greedy sample-mesh construction.
///
/// While fewer rows than basis vectors are sampled, each iteration reconstructs
/// the first `m` basis vectors from the vectors already covered and picks the
/// cell with the largest reconstruction error. Once the sampled rows determine
/// the basis, further (oversampling) cells maximize the leverage
/// `Σ φ_iᵀ (ΦᵀSᵀSΦ)⁻¹ φ_i` over the cell's rows. Ties go to the lowest index.
pub fn greedy_sample(basis: &DMatrix<f64>, n_cells_sampled: usize, mesh: &Mesh, n_vars: usize) -> Result<SampleSelection> {
    let nc = mesh.n_cells();
    if basis.nrows() != nc * n_vars {
        return Err(Error::dim("greedy basis rows", nc * n_vars, basis.nrows()));
    }
    if n_cells_sampled == 0 || n_cells_sampled > nc {
        return Err(Error::InvalidInput(format!(
            "number of sampled cells must lie in 1..={nc}, got {n_cells_sampled}"
        )));
    }
    let nb = basis.ncols();
    if n_cells_sampled * n_vars < nb {
        log::warn!(
            "{n_cells_sampled} sampled cells give {} rows for {nb} basis vectors; gappy fits will be underdetermined",
            n_cells_sampled * n_vars
        );
    }
    let mut chosen = vec![false; nc];
    let mut cells = Vec::with_capacity(n_cells_sampled);
    let mut rows: Vec<usize> = Vec::new();
    for _ in 0..n_cells_sampled {
        let scores = if nb == 0 {
            vec![0.0; nc]
        } else if rows.len() < nb {
            reconstruction_scores(basis, &rows, nc, n_vars)
        } else {
            leverage_scores(basis, &rows, nc, n_vars)
        };
        let mut best = None;
        for c in 0..nc {
            if chosen[c] {
                continue;
            }
            match best {
                None => best = Some(c),
                Some(b) if scores[c] > scores[b] => best = Some(c),
                _ => {}
            }
        }
        let c = best.expect("an unsampled cell remains");
        chosen[c] = true;
        cells.push(c);
        rows.extend((0..n_vars).map(|i| i * nc + c));
    }
    SampleSelection::from_cells(cells, mesh, n_vars)
}

fn cell_sums(r: &DMatrix<f64>, nc: usize, n_vars: usize) -> Vec<f64> {
    (0..nc)
        .map(|c| (0..n_vars).map(|i| r.row(i * nc + c).norm_squared()).sum())
        .collect()
}

fn reconstruction_scores(basis: &DMatrix<f64>, rows: &[usize], nc: usize, n_vars: usize) -> Vec<f64> {
    let nb = basis.ncols();
    let covered = rows.len().min(nb);
    let m = (covered + n_vars).min(nb);
    let target = basis.columns(0, m).into_owned();
    if covered == 0 {
        return cell_sums(&target, nc, n_vars);
    }
    let known = basis.columns(0, covered).into_owned();
    let coeff = SortedSvd::new(&select_rows(&known, rows)).pinv() * select_rows(&target, rows);
    let resid = target - known * coeff;
    cell_sums(&resid, nc, n_vars)
}

fn leverage_scores(basis: &DMatrix<f64>, rows: &[usize], nc: usize, n_vars: usize) -> Vec<f64> {
    let sphi = select_rows(basis, rows);
    let gram_inv = SortedSvd::new(&(sphi.transpose() * &sphi)).pinv();
    let lev = basis * gram_inv;
    (0..nc)
        .map(|c| {
            (0..n_vars)
                .map(|i| {
                    let row = i * nc + c;
                    lev.row(row).dot(&basis.row(row))
                })
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GappyKind {
    /// Least-squares fit in the span of a basis from sampled entries.
    Gappy,
    /// Keep the sampled entries, zero elsewhere (`SᵀS v`).
    Collocation,
}

/// Offline factors of a gappy-POD (or collocation) reconstruction.
#[derive(Debug, Clone)]
pub struct GappyOperator {
    pub kind: GappyKind,
    pub rows: Vec<usize>,
    pub n_full: usize,
    /// Φ (for gappy), N × n.
    pub basis: DMatrix<f64>,
    /// (SΦ)⁺, n × |rows|.
    pub sampled_pinv: DMatrix<f64>,
}

pub fn gappy_reconstructor(basis: &DMatrix<f64>, rows: &[usize]) -> Result<GappyOperator> {
    if rows.iter().any(|&r| r >= basis.nrows()) {
        return Err(Error::InvalidInput("sample row outside basis".into()));
    }
    let sphi = select_rows(basis, rows);
    let svd = SortedSvd::new(&sphi);
    if svd.rank() < basis.ncols() {
        log::warn!(
            "sampled basis has rank {} < {} columns; using a truncated pseudoinverse",
            svd.rank(),
            basis.ncols()
        );
    }
    Ok(GappyOperator {
        kind: GappyKind::Gappy,
        rows: rows.to_vec(),
        n_full: basis.nrows(),
        basis: basis.clone(),
        sampled_pinv: svd.pinv(),
    })
}

pub fn collocation(n_full: usize, rows: &[usize]) -> GappyOperator {
    GappyOperator {
        kind: GappyKind::Collocation,
        rows: rows.to_vec(),
        n_full,
        basis: DMatrix::zeros(n_full, 0),
        sampled_pinv: DMatrix::zeros(0, rows.len()),
    }
}

impl GappyOperator {
    /// Reconstruction from the sampled entries `S v`.
    pub fn apply_sampled(&self, sampled: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            GappyKind::Gappy => &self.basis * (&self.sampled_pinv * sampled),
            GappyKind::Collocation => {
                let mut out = DVector::zeros(self.n_full);
                for (k, &r) in self.rows.iter().enumerate() {
                    out[r] = sampled[k];
                }
                out
            }
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_sampled(&select_entries(v, &self.rows))
    }

    /// `L A` as a dense matrix acting on sampled entries, for a linear map `L`
    /// given as a closure on full vectors' basis image.
    pub fn compose_left(&self, left: &DMatrix<f64>) -> DMatrix<f64> {
        match self.kind {
            GappyKind::Gappy => left * &self.basis * &self.sampled_pinv,
            GappyKind::Collocation => select_columns(left, &self.rows),
        }
    }
}

pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fv::build_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthonormal(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        a.qr().q().columns(0, p).into_owned()
    }

    #[test]
    fn pod_single_snapshot() {
        let mut s = SnapshotSet::new(SnapshotKind::State);
        let v = DVector::from_vec(vec![3.0, 0.0, 4.0]);
        s.push(v.clone(), 1.0).unwrap();
        let b = pod(&s, 1).unwrap();
        let phi = b.phi.column(0);
        assert!((phi.dot(&v).abs() - 5.0).abs() < 1e-14);
        assert!(matches!(pod(&s, 2), Err(Error::RankTooLow { achievable: 1, .. })));
    }

    #[test]
    fn pod_orthogonal_columns() {
        let mut s = SnapshotSet::new(SnapshotKind::State);
        s.push(DVector::from_vec(vec![0.0, 2.0, 0.0, 0.0]), 1.0).unwrap();
        s.push(DVector::from_vec(vec![5.0, 0.0, 0.0, 0.0]), 1.0).unwrap();
        s.push(DVector::from_vec(vec![0.0, 0.0, 0.0, -1.0]), 1.0).unwrap();
        let b = pod(&s, 3).unwrap();
        assert!((b.singular_values[0] - 5.0).abs() < 1e-14);
        assert!((b.singular_values[1] - 2.0).abs() < 1e-14);
        assert!((b.singular_values[2] - 1.0).abs() < 1e-14);
        assert!((b.phi.transpose() * &b.phi - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((b.retained_energy() - 1.0).abs() < 1e-15);
        assert!((energy(&b.singular_values, 1) - 25.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn full_sampling_is_identity_permutation() {
        let mesh = build_mesh(1.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = orthonormal(12, 3, &mut rng);
        let sel = greedy_sample(&phi, 6, &mesh, 2).unwrap();
        assert_eq!(sel.residual_rows, (0..12).collect::<Vec<_>>());
        assert_eq!(sel.face_rows, (0..14).collect::<Vec<_>>());
    }

    #[test]
    fn canonical_basis_picks_its_cell() {
        let mesh = build_mesh(1.0, 10).unwrap();
        let mut phi = DMatrix::zeros(30, 1);
        phi[(5, 0)] = 1.0; // variable 0, cell 5
        let sel = greedy_sample(&phi, 1, &mesh, 3).unwrap();
        assert_eq!(sel.cells, vec![5]);
    }

    #[test]
    fn sample_counts_and_face_rule() {
        let mesh = build_mesh(0.25, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let phi = orthonormal(300, 20, &mut rng);
        let sel = greedy_sample(&phi, 20, &mesh, 3).unwrap();
        assert_eq!(sel.residual_rows.len(), 60);
        // S_r B (I − S_hᵀ S_h) = 0
        let b = mesh.incidence(3).matrix;
        let keep: std::collections::HashSet<usize> = sel.face_rows.iter().copied().collect();
        for &r in &sel.residual_rows {
            for &(col, _) in b.row(r) {
                assert!(keep.contains(&col));
            }
        }
        // maximality: every selected face touches a sampled cell
        let faces = sel.faces(&mesh);
        for k in faces {
            assert!(sel.cells.contains(&k) || (k > 0 && sel.cells.contains(&(k - 1))));
        }
    }

    #[test]
    fn gappy_interpolates_and_reproduces_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phi = orthonormal(40, 4, &mut rng);
        let rows = vec![1, 7, 22, 35];
        let g = gappy_reconstructor(&phi, &rows).unwrap();
        let v = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
        let a = g.apply(&v);
        for &r in &rows {
            assert!((a[r] - v[r]).abs() < 1e-10);
        }
        let inrange = &phi * DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        assert!((g.apply(&inrange) - &inrange).amax() < 1e-10);
        let twice = g.apply(&a);
        assert!((twice - a).amax() < 1e-10);
    }

    #[test]
    fn oversampled_gappy_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let phi = orthonormal(50, 3, &mut rng);
        let rows: Vec<usize> = (0..50).step_by(4).collect();
        let g = gappy_reconstructor(&phi, &rows).unwrap();
        let v = DVector::from_fn(50, |_, _| rng.random_range(-1.0..1.0));
        let sphi = select_rows(&phi, &rows);
        let sv = select_entries(&v, &rows);
        let coef = (sphi.transpose() * &sphi).lu().solve(&(sphi.transpose() * sv)).unwrap();
        assert!((g.apply(&v) - &phi * coef).amax() < 1e-12);
    }

    #[test]
    fn collocation_keeps_samples() {
        let c = collocation(5, &[0, 3]);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(c.apply(&v), DVector::from_vec(vec![1.0, 0.0, 0.0, 4.0, 0.0]));
        let all = collocation(5, &[0, 1, 2, 3, 4]);
        assert_eq!(all.apply(&v), v);
    }
}
