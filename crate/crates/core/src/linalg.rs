//! Dense and banded linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Truncation threshold for singular values: `max(m, n) * eps * sigma_max`.
pub fn svd_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Thin SVD with the singular triplets sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl SortedSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let k = m.min(n);
        if k == 0 {
            return SortedSvd {
                u: DMatrix::zeros(m, 0),
                s: DVector::zeros(0),
                v_t: DMatrix::zeros(0, n),
            };
        }
        let svd = a.clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        SortedSvd {
            u: DMatrix::from_fn(m, k, |r, c| u[(r, order[c])]),
            s: DVector::from_fn(k, |i, _| svd.singular_values[order[i]]),
            v_t: DMatrix::from_fn(k, n, |r, c| v_t[(order[r], c)]),
        }
    }

    /// Number of singular values above the truncation threshold.
    pub fn rank(&self) -> usize {
        if self.s.is_empty() {
            return 0;
        }
        let tol = svd_tolerance(self.u.nrows(), self.v_t.ncols(), self.s[0]);
        self.s.iter().take_while(|&&s| s > tol && s > 0.0).count()
    }

    pub fn pinv(&self) -> DMatrix<f64> {
        let r = self.rank();
        let (m, n) = (self.u.nrows(), self.v_t.ncols());
        let mut out = DMatrix::zeros(n, m);
        for k in 0..r {
            let inv = 1.0 / self.s[k];
            let v = self.v_t.row(k).transpose();
            let u = self.u.column(k);
            out.ger(inv, &v, &u, 1.0);
        }
        out
    }

    /// Minimum-norm least-squares solution of `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let r = self.rank();
        let n = self.v_t.ncols();
        let mut x = DVector::zeros(n);
        for k in 0..r {
            let coef = self.u.column(k).dot(b) / self.s[k];
            x.axpy(coef, &self.v_t.row(k).transpose(), 1.0);
        }
        x
    }

    /// Orthonormal basis of the null space of `A` (columns).
    pub fn null_space(&self) -> DMatrix<f64> {
        let n = self.v_t.ncols();
        let r = self.rank();
        // V from the thin SVD only spans the row space when m < n; complete it.
        let row_space = self.v_t.rows(0, r).transpose();
        complete_orthonormal(&row_space, n)
    }
}

/// Extend the orthonormal columns of `q` to a basis of R^n and return only the
/// added columns.
fn complete_orthonormal(q: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let r = q.ncols();
    let mut basis: Vec<DVector<f64>> = (0..r).map(|j| q.column(j).into_owned()).collect();
    let mut extra = Vec::with_capacity(n - r);
    for e in 0..n {
        if basis.len() == n {
            break;
        }
        let mut v = DVector::zeros(n);
        v[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let nrm = v.norm();
        if nrm > 1e-8 {
            v /= nrm;
            basis.push(v.clone());
            extra.push(v);
        }
    }
    if extra.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&extra)
    }
}

pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    SortedSvd::new(a).pinv()
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    SortedSvd::new(a).rank()
}

pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    SortedSvd::new(a).solve(b)
}

/// Dense LU solve; falls back to the SVD least-squares solution when the
/// factorization reports a singular matrix.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim(context, a.nrows(), a.ncols()));
    }
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if let Some(x) = a.clone().lu().solve(b) {
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let svd = SortedSvd::new(a);
    if svd.rank() == 0 {
        return Err(Error::Singular(context));
    }
    Ok(svd.solve(b))
}

/// Square banded matrix with `kl` sub- and `ku` super-diagonals, stored row by
/// row with room for LU fill-in.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    // row i holds columns i-kl ..= i+ku+kl (extra kl for pivoting fill-in)
    width: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        BandedMatrix {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        if j + self.kl < i || j > i + self.ku + self.kl || j >= self.n {
            return None;
        }
        Some(i * self.width + (j + self.kl - i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` at `(i, j)`. Panics if the entry lies outside the declared band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i},{j}) outside band"
        );
        let s = self.slot(i, j).expect("in band");
        self.data[s] += v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku + self.kl + 1).min(self.n);
            let mut acc = 0.0;
            for j in lo..hi {
                acc += self.get(i, j) * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// In-place LU with partial pivoting followed by a solve.
    pub fn solve(mut self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::dim("banded solve", n, b.len()));
        }
        let mut x = b.clone();
        let upper = self.ku + self.kl;
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 && n > 0 {
            return Err(Error::Singular("banded solve"));
        }
        for k in 0..n {
            let last = (k + self.kl).min(n - 1);
            let mut piv = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best <= scale * 1e-300 || best == 0.0 {
                return Err(Error::Singular("banded solve"));
            }
            let col_hi = (k + upper + 1).min(n);
            if piv != k {
                for j in k..col_hi {
                    let a = self.slot(k, j).expect("band");
                    let bslot = self.slot(piv, j).expect("band");
                    self.data.swap(a, bslot);
                }
                x.swap_rows(k, piv);
            }
            let d = self.get(k, k);
            for i in k + 1..=last {
                let si = self.slot(i, k).expect("band");
                let l = self.data[si] / d;
                if l == 0.0 {
                    continue;
                }
                self.data[si] = 0.0;
                for j in k + 1..col_hi {
                    let sk = self.slot(k, j).expect("band");
                    let sij = self.slot(i, j).expect("band");
                    self.data[sij] -= l * self.data[sk];
                }
                x[i] -= l * x[k];
            }
        }
        for k in (0..n).rev() {
            let col_hi = (k + upper + 1).min(n);
            let mut acc = x[k];
            for j in k + 1..col_hi {
                acc -= self.get(k, j) * x[j];
            }
            x[k] = acc / self.get(k, k);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("banded solve"));
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pinv_of_full_rank_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(5, 5, &mut rng);
        let p = pinv(&a);
        let id = &a * &p;
        assert!((id - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn lstsq_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(9, 4, &mut rng);
        let b = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
        let x = lstsq(&a, &b);
        let ata = a.transpose() * &a;
        let x2 = ata.lu().solve(&(a.transpose() * &b)).unwrap();
        assert!((x - x2).amax() < 1e-12);
    }

    #[test]
    fn rank_detects_dependent_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(6, 3, &mut rng);
        let mut b = DMatrix::zeros(6, 4);
        b.columns_mut(0, 3).copy_from(&a);
        let c = a.column(0) + a.column(1) * 2.0;
        b.set_column(3, &c);
        assert_eq!(rank(&b), 3);
        assert_eq!(rank(&DMatrix::zeros(3, 3)), 0);
    }

    #[test]
    fn null_space_is_orthogonal_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(2, 5, &mut rng);
        let z = SortedSvd::new(&a).null_space();
        assert_eq!(z.ncols(), 3);
        assert!((&a * &z).amax() < 1e-12);
        assert!((z.transpose() * &z - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn banded_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let (kl, ku) = (3, 2);
        let mut band = BandedMatrix::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..(i + ku + 1).min(n) {
                // weak diagonal so pivoting actually happens
                band.add(i, j, rng.random_range(-1.0..1.0));
            }
        }
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let dense = band.to_dense();
        let x_ref = dense.clone().lu().solve(&b).unwrap();
        let x = band.clone().solve(&b).unwrap();
        assert!((&x - &x_ref).amax() < 1e-9 * x_ref.amax().max(1.0));
        assert!((band.mul_vec(&x) - b).amax() < 1e-9);
    }

    #[test]
    fn banded_rejects_singular() {
        let band = BandedMatrix::zeros(4, 1, 1);
        assert!(band.solve(&DVector::zeros(4)).is_err());
    }
}
