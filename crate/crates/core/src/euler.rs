//! Quasi-1D Euler flow through a converging-diverging nozzle.
//!
//! Conserved variables per cell are `(Aρ, Aρu, Ae)`. Interior fluxes use a Roe
//! scheme with a Harten entropy fix on the acoustic waves; the inlet flux is a
//! Roe flux against the frozen initial inlet state and the outlet extrapolates
//! the last cell (supersonic outflow).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::{build_mesh, Mesh};
use crate::model::{Block, FiniteVolumeModel};
use crate::spline::CubicSpline;

pub const DEFAULT_KNOTS: [(f64, f64); 13] = [
    (0.0, 0.035),
    (0.0208, 0.0275),
    (0.0417, 0.0206),
    (0.0625, 0.0145),
    (0.0833, 0.0097),
    (0.104, 0.0066),
    (0.125, 0.0055),
    (0.146, 0.0067),
    (0.1667, 0.0107),
    (0.188, 0.0178),
    (0.208, 0.0283),
    (0.229, 0.0427),
    (0.25, 0.0612),
];

/// Fraction of the Roe sound speed below which acoustic eigenvalues are smoothed.
const ENTROPY_FIX: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct NozzleGeometry {
    spline: CubicSpline,
    length: f64,
    throat: f64,
}

impl Default for NozzleGeometry {
    fn default() -> Self {
        NozzleGeometry::from_knots(&DEFAULT_KNOTS, 0.125).expect("default knots are valid")
    }
}

impl NozzleGeometry {
    /// Area spline through `knots`; the domain is `[0, last knot]` and `throat`
    /// is where the Mach parameter is imposed by the initial condition.
    pub fn from_knots(knots: &[(f64, f64)], throat: f64) -> Result<Self> {
        if knots.first().map(|k| k.0) != Some(0.0) {
            return Err(Error::InvalidInput("first area knot must sit at x = 0".into()));
        }
        let spline = CubicSpline::natural(knots)?;
        let (_, length) = spline.domain();
        if !(throat > 0.0 && throat < length) {
            return Err(Error::InvalidInput(format!("throat position {throat} outside (0, {length})")));
        }
        let geom = NozzleGeometry { spline, length, throat };
        // positivity on a fine sampling
        for k in 0..=1000 {
            let x = length * k as f64 / 1000.0;
            if geom.spline.value(x) <= 0.0 {
                return Err(Error::InvalidInput(format!("area spline is not positive at x = {x}")));
            }
        }
        Ok(geom)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn throat(&self) -> f64 {
        self.throat
    }

    /// `(A, dA/dx)` at `x`.
    pub fn area(&self, x: f64) -> Result<(f64, f64)> {
        let tol = 1e-12 * self.length;
        if !(x >= -tol && x <= self.length + tol) {
            return Err(Error::InvalidInput(format!("x = {x} outside [0, {}]", self.length)));
        }
        Ok(self.spline.eval(x.clamp(0.0, self.length)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasModel {
    pub gamma: f64,
    pub gas_constant: f64,
    pub total_temperature: f64,
    pub total_pressure: f64,
}

impl Default for GasModel {
    fn default() -> Self {
        GasModel {
            gamma: 1.3,
            gas_constant: 355.4,
            total_temperature: 2800.0,
            total_pressure: 2.068e6,
        }
    }
}

/// Primitive variables of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub rho: f64,
    pub u: f64,
    pub p: f64,
}

impl GasModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0) || !(self.gas_constant > 0.0) || !(self.total_temperature > 0.0) || !(self.total_pressure > 0.0) {
            return Err(Error::InvalidInput(format!("invalid gas model {self:?}")));
        }
        Ok(())
    }

    fn half_gm1(&self) -> f64 {
        0.5 * (self.gamma - 1.0)
    }

    /// Isentropic state at Mach number `m`.
    pub fn isentropic(&self, m: f64) -> Primitive {
        let g = self.gamma;
        let fac = 1.0 + self.half_gm1() * m * m;
        let p = self.total_pressure * fac.powf(-g / (g - 1.0));
        let temp = self.total_temperature / fac;
        let rho = p / (self.gas_constant * temp);
        let c = (g * p / rho).sqrt();
        Primitive { rho, u: m * c, p }
    }

    /// Conserved per-unit-area variables `(ρ, ρu, e)`.
    pub fn conserved(&self, w: Primitive) -> [f64; 3] {
        let e = w.p / (self.gamma - 1.0) + 0.5 * w.rho * w.u * w.u;
        [w.rho, w.rho * w.u, e]
    }

    pub fn primitive(&self, q: &[f64]) -> Option<Primitive> {
        let rho = q[0];
        if !(rho > 0.0) || !rho.is_finite() {
            return None;
        }
        let u = q[1] / rho;
        let p = (self.gamma - 1.0) * (q[2] - 0.5 * rho * u * u);
        if !(p > 0.0) || !p.is_finite() || !u.is_finite() {
            return None;
        }
        Some(Primitive { rho, u, p })
    }

    /// Analytic Euler flux of a per-area state.
    pub fn analytic_flux(&self, w: Primitive) -> [f64; 3] {
        let e = w.p / (self.gamma - 1.0) + 0.5 * w.rho * w.u * w.u;
        [w.rho * w.u, w.rho * w.u * w.u + w.p, (e + w.p) * w.u]
    }

    /// Roe flux between two per-area states.
    pub fn roe_flux(&self, l: Primitive, r: Primitive) -> [f64; 3] {
        let g = self.gamma;
        let fl = self.analytic_flux(l);
        let fr = self.analytic_flux(r);
        let (sl, sr) = (l.rho.sqrt(), r.rho.sqrt());
        let hl = (self.conserved(l)[2] + l.p) / l.rho;
        let hr = (self.conserved(r)[2] + r.p) / r.rho;
        let u = (sl * l.u + sr * r.u) / (sl + sr);
        let h = (sl * hl + sr * hr) / (sl + sr);
        let c2 = ((g - 1.0) * (h - 0.5 * u * u)).max(1e-300);
        let c = c2.sqrt();
        let rho = sl * sr;
        let (dp, du, drho) = (r.p - l.p, r.u - l.u, r.rho - l.rho);
        let a1 = (dp - rho * c * du) / (2.0 * c2);
        let a2 = drho - dp / c2;
        let a3 = (dp + rho * c * du) / (2.0 * c2);
        let delta = ENTROPY_FIX * c;
        let fix = |lam: f64| {
            let a = lam.abs();
            if a < delta {
                (lam * lam + delta * delta) / (2.0 * delta)
            } else {
                a
            }
        };
        let (l1, l2, l3) = (fix(u - c), (u).abs(), fix(u + c));
        let r1 = [1.0, u - c, h - u * c];
        let r2 = [1.0, u, 0.5 * u * u];
        let r3 = [1.0, u + c, h + u * c];
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = 0.5 * (fl[k] + fr[k]) - 0.5 * (l1 * a1 * r1[k] + l2 * a2 * r2[k] + l3 * a3 * r3[k]);
        }
        out
    }

    /// Solves the Mach–area relation for `M` with `a_ratio = A(x)/A_m` on the
    /// bracket `(lo, hi)` by bisection.
    pub fn mach_from_area(&self, mu: f64, a_ratio: f64, lo: f64, hi: f64) -> Result<f64> {
        let res = |m: f64| mach_area_residual(self.gamma, mu, a_ratio, m);
        let (mut a, mut b) = (lo, hi);
        let (fa, fb) = (res(a), res(b));
        if fa == 0.0 {
            return Ok(a);
        }
        if fb == 0.0 {
            return Ok(b);
        }
        if fa.signum() == fb.signum() {
            return Err(Error::Bracket(format!(
                "Mach-area relation has no sign change on ({lo}, {hi}) for area ratio {a_ratio}"
            )));
        }
        let mut sa = fa.signum();
        while b - a > 1e-12 {
            let m = 0.5 * (a + b);
            let fm = res(m);
            if fm == 0.0 {
                return Ok(m);
            }
            if fm.signum() == sa {
                a = m;
                sa = fm.signum();
            } else {
                b = m;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// `M − (M_m A_m / A)·((1 + (γ−1)/2 M²)/(1 + (γ−1)/2 M_m²))^((γ+1)/(2(γ−1)))`.
pub fn mach_area_residual(gamma: f64, mu: f64, a_ratio: f64, m: f64) -> f64 {
    let k = 0.5 * (gamma - 1.0);
    let expo = (gamma + 1.0) / (2.0 * (gamma - 1.0));
    m - (mu / a_ratio) * ((1.0 + k * m * m) / (1.0 + k * mu * mu)).powf(expo)
}

/// Mach numbers at the inlet and outlet implied by the throat parameter.
pub fn boundary_mach(geom: &NozzleGeometry, gas: &GasModel, mu: f64) -> Result<(f64, f64)> {
    let (a_m, _) = geom.area(geom.throat)?;
    let (a0, _) = geom.area(0.0)?;
    let (al, _) = geom.area(geom.length)?;
    let m0 = gas.mach_from_area(mu, a0 / a_m, 1e-6, 1.0)?;
    let ml = if mu > 1.0 {
        gas.mach_from_area(mu, al / a_m, 1.0, 20.0)?
    } else {
        gas.mach_from_area(mu, al / a_m, 1e-6, 1.0)?
    };
    Ok((m0, ml))
}

/// Mach distribution used to seed the flow: a natural spline through the
/// inlet, throat and outlet values.
pub fn mach_profile(geom: &NozzleGeometry, gas: &GasModel, mu: f64) -> Result<CubicSpline> {
    if !(mu > 0.0) {
        return Err(Error::InvalidInput(format!("throat Mach parameter must be positive, got {mu}")));
    }
    let (m0, ml) = boundary_mach(geom, gas, mu)?;
    CubicSpline::natural(&[(0.0, m0), (geom.throat, mu), (geom.length, ml)])
}

/// Isentropic initial state, midpoint-averaged onto the mesh.
pub fn initial_condition(geom: &NozzleGeometry, gas: &GasModel, mesh: &Mesh, mu: f64) -> Result<DVector<f64>> {
    gas.validate()?;
    let mach = mach_profile(geom, gas, mu)?;
    let nc = mesh.n_cells();
    let mut u = DVector::zeros(3 * nc);
    for j in 0..nc {
        let x = mesh.center(j);
        let (a, _) = geom.area(x)?;
        let q = gas.conserved(gas.isentropic(mach.value(x)));
        for i in 0..3 {
            u[i * nc + j] = a * q[i];
        }
    }
    Ok(u)
}

#[derive(Debug, Clone)]
pub struct EulerNozzle {
    geom: NozzleGeometry,
    gas: GasModel,
    mesh: Mesh,
    mu: f64,
    face_area: Vec<f64>,
    centre_area: Vec<f64>,
    centre_slope: Vec<f64>,
    inlet: Primitive,
}

impl EulerNozzle {
    pub fn new(geom: NozzleGeometry, gas: GasModel, n_cells: usize, mu: f64) -> Result<Self> {
        gas.validate()?;
        let mesh = build_mesh(geom.length, n_cells)?;
        let mach = mach_profile(&geom, &gas, mu)?;
        let inlet = gas.isentropic(mach.value(0.0));
        let face_area = mesh.edges().iter().map(|&x| geom.area(x).map(|a| a.0)).collect::<Result<_>>()?;
        let (centre_area, centre_slope) = (0..n_cells)
            .map(|j| geom.area(mesh.center(j)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(EulerNozzle {
            geom,
            gas,
            mesh,
            mu,
            face_area,
            centre_area,
            centre_slope,
            inlet,
        })
    }

    pub fn with_defaults(n_cells: usize, mu: f64) -> Result<Self> {
        Self::new(NozzleGeometry::default(), GasModel::default(), n_cells, mu)
    }

    pub fn geometry(&self) -> &NozzleGeometry {
        &self.geom
    }

    pub fn gas(&self) -> &GasModel {
        &self.gas
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn initial_condition(&self) -> Result<DVector<f64>> {
        initial_condition(&self.geom, &self.gas, &self.mesh, self.mu)
    }

    /// Primitive variables of `cell` for a given state vector.
    pub fn cell_primitive(&self, u: &DVector<f64>, cell: usize) -> Result<Primitive> {
        let nc = self.mesh.n_cells();
        let s = [u[cell], u[nc + cell], u[2 * nc + cell]];
        self.per_area(cell, &s)
    }

    fn per_area(&self, cell: usize, s: &[f64]) -> Result<Primitive> {
        let a = self.centre_area[cell];
        let q = [s[0] / a, s[1] / a, s[2] / a];
        self.gas.primitive(&q).ok_or_else(|| Error::ModelFailure {
            cell,
            reason: format!("nonphysical state (Aρ, Aρu, Ae) = ({:.6e}, {:.6e}, {:.6e})", s[0], s[1], s[2]),
        })
    }
}

impl FiniteVolumeModel for EulerNozzle {
    fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    fn n_vars(&self) -> usize {
        3
    }

    fn face_flux(&self, face: usize, left: Option<&[f64]>, right: Option<&[f64]>, _t: f64, out: &mut [f64]) -> Result<()> {
        let area = self.face_area[face];
        let flux = match (left, right) {
            (Some(l), Some(r)) => {
                let wl = self.per_area(face - 1, l)?;
                let wr = self.per_area(face, r)?;
                self.gas.roe_flux(wl, wr)
            }
            (None, Some(r)) => self.gas.roe_flux(self.inlet, self.per_area(face, r)?),
            (Some(l), None) => self.gas.analytic_flux(self.per_area(face - 1, l)?),
            (None, None) => return Err(Error::InvalidInput("face without adjacent cells".into())),
        };
        for k in 0..3 {
            out[k] = area * flux[k];
        }
        Ok(())
    }

    fn source(&self, cell: usize, state: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        let w = self.per_area(cell, state)?;
        out[0] = 0.0;
        out[1] = w.p * self.centre_slope[cell];
        out[2] = 0.0;
        Ok(())
    }

    fn source_jacobian(&self, cell: usize, state: &[f64], _t: f64, out: &mut Block) -> Result<()> {
        self.per_area(cell, state)?;
        let fac = (self.gas.gamma - 1.0) / self.centre_area[cell] * self.centre_slope[cell];
        let (r, m) = (state[0], state[1]);
        out[..9].fill(0.0);
        out[3] = fac * 0.5 * m * m / (r * r);
        out[4] = -fac * m / r;
        out[5] = fac;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{face_fluxes, sources, velocity, velocity_jacobian, velocity_jacobian_fd};

    #[test]
    fn area_hits_knots() {
        let g = NozzleGeometry::default();
        for (x, a) in DEFAULT_KNOTS {
            assert!((g.area(x).unwrap().0 - a).abs() < 1e-12);
        }
        assert_eq!(g.area(0.0).unwrap().0, 0.035);
        assert!((g.area(0.125).unwrap().0 - 0.0055).abs() < 1e-15);
        assert!(g.area(-0.01).is_err());
        assert!(g.area(0.3).is_err());
        let mut prev = f64::INFINITY;
        for k in 0..=50 {
            let a = g.area(0.0208 * k as f64 / 50.0).unwrap().0;
            assert!(a <= prev && (0.0275 - 1e-12..=0.035 + 1e-12).contains(&a));
            prev = a;
        }
    }

    #[test]
    fn throat_pressure_is_isentropic() {
        let gas = GasModel::default();
        let w = gas.isentropic(1.75);
        let expect = 2.068e6 * (1.0f64 + 0.15 * 1.75 * 1.75).powf(-1.3 / 0.3);
        assert!((w.p - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn stagnation_limit() {
        let gas = GasModel::default();
        let w = gas.isentropic(0.0);
        assert_eq!(w.u, 0.0);
        let q = gas.conserved(w);
        assert!((q[2] - w.p / 0.3).abs() < 1e-9 * q[2]);
    }

    #[test]
    fn boundary_mach_roots_satisfy_relation() {
        let g = NozzleGeometry::default();
        let gas = GasModel::default();
        let (m0, ml) = boundary_mach(&g, &gas, 1.75).unwrap();
        assert!(m0 > 0.0 && m0 < 1.0 && ml > 1.0);
        let am = g.area(0.125).unwrap().0;
        for (m, x) in [(m0, 0.0), (ml, 0.25)] {
            let ratio = g.area(x).unwrap().0 / am;
            assert!(mach_area_residual(1.3, 1.75, ratio, m).abs() < 1e-10);
        }
    }

    #[test]
    fn initial_condition_obeys_gas_laws() {
        let g = NozzleGeometry::default();
        let gas = GasModel::default();
        let mesh = build_mesh(0.25, 100).unwrap();
        let u = initial_condition(&g, &gas, &mesh, 1.75).unwrap();
        let mach = mach_profile(&g, &gas, 1.75).unwrap();
        for j in 0..100 {
            let x = mesh.center(j);
            let a = g.area(x).unwrap().0;
            let m = mach.value(x);
            let fac = 1.0 + 0.15 * m * m;
            let temp = 2800.0 / fac;
            let (rho, mom, e) = (u[j] / a, u[100 + j] / a, u[200 + j] / a);
            let vel = mom / rho;
            let p = 2.068e6 * fac.powf(-1.3 / 0.3);
            assert!((p - rho * 355.4 * temp).abs() < 1e-10 * p);
            let eps = p / (0.3 * rho);
            assert!((e - (rho * eps + 0.5 * rho * vel * vel)).abs() < 1e-10 * e);
        }
    }

    #[test]
    fn roe_flux_consistency_and_upwinding() {
        let gas = GasModel::default();
        let w = gas.isentropic(0.4);
        let f = gas.roe_flux(w, w);
        let fa = gas.analytic_flux(w);
        for k in 0..3 {
            assert!((f[k] - fa[k]).abs() <= 1e-12 * fa[k].abs().max(1.0));
        }
        // supersonic pair: full upwinding
        let l = gas.isentropic(2.2);
        let mut r = gas.isentropic(2.0);
        r.rho *= 1.05;
        let f = gas.roe_flux(l, r);
        let fl = gas.analytic_flux(l);
        for k in 0..3 {
            assert!((f[k] - fl[k]).abs() <= 1e-9 * fl[k].abs());
        }
        // stationary contact: equal p, u, different density
        let l = Primitive { rho: 1.0, u: 0.0, p: 1e5 };
        let r = Primitive { rho: 3.0, u: 0.0, p: 1e5 };
        let f = gas.roe_flux(l, r);
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 1e5).abs() < 1e-9);
        // moving contact carries the upwind density
        let l = Primitive { rho: 1.0, u: 50.0, p: 1e5 };
        let r = Primitive { rho: 3.0, u: 50.0, p: 1e5 };
        let f = gas.roe_flux(l, r);
        assert!((f[0] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn constant_area_uniform_state_is_steady() {
        let knots: Vec<(f64, f64)> = (0..5).map(|k| (0.0625 * k as f64, 0.01)).collect();
        let g = NozzleGeometry::from_knots(&knots, 0.125).unwrap();
        let gas = GasModel::default();
        let model = EulerNozzle::new(g, gas, 20, 0.3).unwrap();
        // uniform state equal to the inlet state
        let q = gas.conserved(model.inlet);
        let u = DVector::from_fn(60, |k, _| 0.01 * q[k / 20]);
        let s = sources(&model, &u, 0.0).unwrap();
        assert_eq!(s.amax(), 0.0);
        let f = velocity(&model, &u, 0.0).unwrap();
        let scale = face_fluxes(&model, &u, 0.0).unwrap().amax() / 0.0125;
        assert!(f.amax() <= 1e-11 * scale);
    }

    #[test]
    fn source_matches_area_derivative() {
        let model = EulerNozzle::with_defaults(100, 1.75).unwrap();
        let u = model.initial_condition().unwrap();
        let s = sources(&model, &u, 0.0).unwrap();
        let g = model.geometry();
        for j in 0..100 {
            let x = model.mesh().center(j);
            let eps = 1e-7;
            let lo = (x - eps).max(0.0);
            let hi = (x + eps).min(0.25);
            let fd = (g.area(hi).unwrap().0 - g.area(lo).unwrap().0) / (hi - lo);
            let p = model.cell_primitive(&u, j).unwrap().p;
            assert_eq!(s[j], 0.0);
            assert_eq!(s[200 + j], 0.0);
            assert!((s[100 + j] - p * fd).abs() <= 1e-6 * (p * fd).abs().max(1e-6 * p));
        }
    }

    #[test]
    fn global_balance_only_sees_boundary_faces() {
        let model = EulerNozzle::with_defaults(50, 1.75).unwrap();
        let u = model.initial_condition().unwrap();
        let h = face_fluxes(&model, &u, 0.0).unwrap();
        let inc = model.mesh().incidence(3);
        let d = crate::fv::build_decomposition(model.mesh(), 1, 3).unwrap();
        let agg = d.cbar.mul_vec(&inc.apply(&h));
        for i in 0..3 {
            let expect = (h[i * 51] - h[i * 51 + 50]) / 0.25;
            assert!((agg[i] - expect).abs() <= 1e-10 * expect.abs().max(h.amax()));
        }
    }

    #[test]
    fn local_jacobian_matches_column_fd() {
        let model = EulerNozzle::with_defaults(20, 1.75).unwrap();
        let u = model.initial_condition().unwrap();
        let jl = velocity_jacobian(&model, &u, 0.0).unwrap().to_dense();
        let jc = velocity_jacobian_fd(&model, &u, 0.0).unwrap();
        assert!(jl.iter().all(|v| v.is_finite()));
        assert!((&jl - &jc).amax() <= 1e-5 * jc.amax());
        // central difference along a random direction
        let v = DVector::from_fn(60, |k, _| ((k * 7919) % 13) as f64 / 13.0 - 0.5);
        let v = v.component_mul(&u.map(|x| x.abs().max(1e-3))) * 1e-6;
        let fp = velocity(&model, &(&u + &v), 0.0).unwrap();
        let fm = velocity(&model, &(&u - &v), 0.0).unwrap();
        let central = (fp - fm) / 2.0;
        let lin = &jl * &v;
        assert!((&central - &lin).norm() <= 1e-5 * central.norm());
    }

    #[test]
    fn nonphysical_state_is_reported() {
        let model = EulerNozzle::with_defaults(10, 1.75).unwrap();
        let mut u = model.initial_condition().unwrap();
        u[20 + 4] = 0.0; // zero energy in cell 4 -> negative pressure
        match velocity(&model, &u, 0.0) {
            Err(Error::ModelFailure { cell, .. }) => assert_eq!(cell, 4),
            other => panic!("expected model failure, got {other:?}"),
        }
    }
}
