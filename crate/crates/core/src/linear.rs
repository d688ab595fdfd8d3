//! Linear upwind advection with decay: a model whose velocity is affine in the
//! state, so Jacobians and reduced solves have exact closed forms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fv::{build_mesh, Mesh};
use crate::model::{Block, FiniteVolumeModel, MAX_VARS};

/// `∂u_i/∂t + a_i ∂u_i/∂x = −κ u_i` with first-order upwinding and constant
/// inflow values at x = 0. No periodic wrap: the outlet simply convects out.
#[derive(Debug, Clone)]
pub struct LinearAdvection {
    mesh: Mesh,
    speeds: Vec<f64>,
    decay: f64,
    inflow: Vec<f64>,
}

impl LinearAdvection {
    pub fn new(length: f64, n_cells: usize, speeds: Vec<f64>, decay: f64, inflow: Vec<f64>) -> Result<Self> {
        Self::on_mesh(build_mesh(length, n_cells)?, speeds, decay, inflow)
    }

    pub fn on_mesh(mesh: Mesh, speeds: Vec<f64>, decay: f64, inflow: Vec<f64>) -> Result<Self> {
        if speeds.is_empty() || speeds.len() > MAX_VARS {
            return Err(Error::InvalidInput(format!("need 1..={MAX_VARS} advection speeds")));
        }
        if speeds.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidInput("advection speeds must be positive".into()));
        }
        if inflow.len() != speeds.len() {
            return Err(Error::dim("inflow values", speeds.len(), inflow.len()));
        }
        Ok(LinearAdvection {
            mesh,
            speeds,
            decay,
            inflow,
        })
    }

    /// `(L, g)` with `f(u) = L u + g`.
    pub fn affine_operator(&self) -> (DMatrix<f64>, DVector<f64>) {
        let nc = self.mesh.n_cells();
        let nv = self.speeds.len();
        let n = nc * nv;
        let mut l = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (i, &a) in self.speeds.iter().enumerate() {
            for j in 0..nc {
                let row = i * nc + j;
                let inv = 1.0 / self.mesh.cell_sizes()[j];
                l[(row, row)] = -a * inv - self.decay;
                if j > 0 {
                    l[(row, row - 1)] = a * inv;
                } else {
                    g[row] = a * self.inflow[i] * inv;
                }
            }
        }
        (l, g)
    }
}

impl FiniteVolumeModel for LinearAdvection {
    fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    fn n_vars(&self) -> usize {
        self.speeds.len()
    }

    fn face_flux(&self, _face: usize, left: Option<&[f64]>, _right: Option<&[f64]>, _t: f64, out: &mut [f64]) -> Result<()> {
        for (i, &a) in self.speeds.iter().enumerate() {
            out[i] = a * left.map_or(self.inflow[i], |l| l[i]);
        }
        Ok(())
    }

    fn source(&self, _cell: usize, state: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        for (o, &s) in out.iter_mut().zip(state) {
            *o = -self.decay * s;
        }
        Ok(())
    }

    fn face_flux_jacobian(
        &self,
        _face: usize,
        left: Option<&[f64]>,
        right: Option<&[f64]>,
        _t: f64,
        d_left: &mut Block,
        d_right: &mut Block,
    ) -> Result<()> {
        let n = self.speeds.len();
        if left.is_some() {
            d_left.fill(0.0);
            for (i, &a) in self.speeds.iter().enumerate() {
                d_left[i * n + i] = a;
            }
        }
        if right.is_some() {
            d_right.fill(0.0);
        }
        Ok(())
    }

    fn source_jacobian(&self, _cell: usize, _state: &[f64], _t: f64, out: &mut Block) -> Result<()> {
        let n = self.speeds.len();
        out.fill(0.0);
        for i in 0..n {
            out[i * n + i] = -self.decay;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{velocity, velocity_jacobian, velocity_jacobian_fd};

    fn toy() -> LinearAdvection {
        LinearAdvection::new(2.0, 10, vec![1.0, 0.25], 0.4, vec![1.5, -0.5]).unwrap()
    }

    #[test]
    fn velocity_is_the_affine_operator() {
        let m = toy();
        let (l, g) = m.affine_operator();
        let u = DVector::from_fn(20, |k, _| (k as f64 * 0.3).sin());
        let f = velocity(&m, &u, 0.0).unwrap();
        assert!((f - (&l * &u + g)).amax() < 1e-12);
    }

    #[test]
    fn jacobian_is_constant_operator() {
        let m = toy();
        let (l, _) = m.affine_operator();
        for seed in 0..3 {
            let u = DVector::from_fn(20, |k, _| (k as f64 + seed as f64).cos());
            assert_eq!(velocity_jacobian(&m, &u, 0.0).unwrap().to_dense(), l);
        }
        let fd = velocity_jacobian_fd(&m, &DVector::zeros(20), 0.0).unwrap();
        assert!((fd - l).amax() < 1e-5);
    }

    #[test]
    fn rejects_bad_speeds() {
        assert!(LinearAdvection::new(1.0, 4, vec![0.0], 0.0, vec![0.0]).is_err());
        assert!(LinearAdvection::new(1.0, 4, vec![1.0], 0.0, vec![]).is_err());
    }
}
