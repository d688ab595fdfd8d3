//! Experiment configuration: a TOML tree whose every key has a default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conservative::{ConstraintSpec, Enforcement, InfeasibilityPolicy, RomOptions, RomSpec};
use crate::error::{Error, Result};
use crate::euler::{EulerNozzle, GasModel, NozzleGeometry, DEFAULT_KNOTS};
use crate::fv::build_decomposition;
use crate::model::FiniteVolumeModel;
use crate::rom::{HyperKind, ObjectiveSpec, Projection};
use crate::time::{MultistepScheme, SchemeKind, TimeGrid};

/// Named reduced models, each a projection and tier pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Galerkin,
    GalerkinFv,
    Lspg,
    LspgFv,
    Gnat,
    GnatFv,
    GnatFvX,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Galerkin,
        Method::GalerkinFv,
        Method::Lspg,
        Method::LspgFv,
        Method::Gnat,
        Method::GnatFv,
        Method::GnatFvX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Galerkin => "galerkin",
            Method::GalerkinFv => "galerkin-fv",
            Method::Lspg => "lspg",
            Method::LspgFv => "lspg-fv",
            Method::Gnat => "gnat",
            Method::GnatFv => "gnat-fv",
            Method::GnatFvX => "gnat-fv-x",
        }
    }

    pub fn projection(self) -> Projection {
        match self {
            Method::Galerkin | Method::GalerkinFv => Projection::Galerkin,
            _ => Projection::Lspg,
        }
    }

    /// Objective tier (1 exact, 2 hyper-reduced).
    pub fn objective_tier(self) -> u8 {
        match self {
            Method::Gnat | Method::GnatFv | Method::GnatFvX => 2,
            _ => 1,
        }
    }

    /// Constraint tier (0 none, 1 exact, 2 hyper-reduced).
    pub fn constraint_tier(self) -> u8 {
        match self {
            Method::Galerkin | Method::Lspg | Method::Gnat => 0,
            Method::GnatFvX => 2,
            _ => 1,
        }
    }

    pub fn is_hyper_reduced(self) -> bool {
        self.objective_tier() == 2 || self.constraint_tier() == 2
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Model whose states feed the face-flux and source snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotSource {
    Fom,
    Lspg,
    Gnat,
    LspgFv,
    GnatFv,
}

impl SnapshotSource {
    pub fn method(self) -> Option<Method> {
        match self {
            SnapshotSource::Fom => None,
            SnapshotSource::Lspg => Some(Method::Lspg),
            SnapshotSource::Gnat => Some(Method::Gnat),
            SnapshotSource::LspgFv => Some(Method::LspgFv),
            SnapshotSource::GnatFv => Some(Method::GnatFv),
        }
    }
}

impl FromStr for SnapshotSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fom" => Ok(SnapshotSource::Fom),
            "lspg" => Ok(SnapshotSource::Lspg),
            "gnat" => Ok(SnapshotSource::Gnat),
            "lspg-fv" => Ok(SnapshotSource::LspgFv),
            "gnat-fv" => Ok(SnapshotSource::GnatFv),
            _ => Err(Error::Config(format!("unknown snapshot source '{s}'"))),
        }
    }
}

/// What a hard-constrained model does when its constraints are infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibilityMode {
    /// Coarsen while the `N̄·n_vars` constraints fit in `p` coordinates, otherwise fall back to the penalty.
    Auto,
    CoarsenResume,
    CoarsenRestart,
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gamma: f64,
    pub gas_constant: f64,
    pub total_temperature: f64,
    pub total_pressure: f64,
    /// Domain length; must equal the last area knot.
    pub length: f64,
    /// Position of the Mach parameter in the initial condition.
    pub throat: f64,
    pub knots: Vec<[f64; 2]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let gas = GasModel::default();
        ModelConfig {
            gamma: gas.gamma,
            gas_constant: gas.gas_constant,
            total_temperature: gas.total_temperature,
            total_pressure: gas.total_pressure,
            length: 0.25,
            throat: 0.125,
            knots: DEFAULT_KNOTS.iter().map(|&(x, a)| [x, a]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub n_cells: usize,
    pub dt: f64,
    pub final_time: f64,
    pub scheme: SchemeKind,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        DiscretizationConfig {
            n_cells: 100,
            dt: 0.01,
            final_time: 0.29,
            scheme: SchemeKind::BackwardEuler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub train_mu: Vec<f64>,
    pub snapshot_source: SnapshotSource,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            train_mu: vec![1.7, 1.8, 1.9, 2.0],
            snapshot_source: SnapshotSource::GnatFv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub p: usize,
    pub n_r: usize,
    pub n_h: usize,
    pub n_s: usize,
    pub n_sample_cells: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            p: 5,
            n_r: 20,
            n_h: 20,
            n_s: 20,
            n_sample_cells: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RomConfig {
    pub method: Method,
    /// Subdomains of the decomposed mesh (1 is global conservation).
    pub n_subdomains: usize,
    /// Penalty weight, used by `enforcement = "penalty"` and the penalty
    /// fallback; `inf` keeps only the constraints.
    pub rho: f64,
    /// `hard` or `penalty`.
    pub enforcement: String,
    pub infeasibility: InfeasibilityMode,
    /// Hyper-reduction of the tier-2 constraints.
    pub constraint_kind: HyperKind,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub constraint_tol: f64,
}

impl Default for RomConfig {
    fn default() -> Self {
        RomConfig {
            method: Method::LspgFv,
            n_subdomains: 1,
            rho: 1e3,
            enforcement: "hard".into(),
            infeasibility: InfeasibilityMode::Auto,
            constraint_kind: HyperKind::FluxSourceGappy,
            rel_tol: 1e-5,
            max_iter: 50,
            constraint_tol: 1e-8,
        }
    }
}

/// Parameter lists of a sweep; the run is the cross product. Parameters a
/// method does not use are collapsed to their first value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub p: Vec<usize>,
    pub n_r: Vec<usize>,
    pub n_h: Vec<usize>,
    pub n_sample_cells: Vec<usize>,
    pub n_subdomains: Vec<usize>,
    pub rho: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let b = BasisConfig::default();
        SweepConfig {
            methods: vec![Method::LspgFv],
            p: vec![b.p],
            n_r: vec![b.n_r],
            n_h: vec![b.n_h],
            n_sample_cells: vec![b.n_sample_cells],
            n_subdomains: vec![1],
            rho: vec![1e3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Online parameter (Mach number at the throat).
    pub mu: f64,
    /// Seed of the randomized checks.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub discretization: DiscretizationConfig,
    pub training: TrainingConfig,
    pub bases: BasisConfig,
    pub rom: RomConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mu: 1.75,
            seed: 0,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            discretization: DiscretizationConfig::default(),
            training: TrainingConfig::default(),
            bases: BasisConfig::default(),
            rom: RomConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks the keys a full-order run depends on.
    pub fn validate_model(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.discretization;
        if d.n_cells == 0 {
            return bad("discretization.n_cells must be positive".into());
        }
        if !(d.dt > 0.0) || !(d.final_time >= 0.0) {
            return bad("discretization.dt must be positive and final_time nonnegative".into());
        }
        if self.training.train_mu.is_empty() {
            return bad("training.train_mu must not be empty".into());
        }
        if let Some((l, _)) = self.model.knots.last().map(|k| (k[0], k[1])) {
            if (l - self.model.length).abs() > 1e-12 * self.model.length.max(1.0) {
                return bad(format!("model.length = {} differs from the last knot {l}", self.model.length));
            }
        } else {
            return bad("model.knots must not be empty".into());
        }
        Ok(())
    }

    /// Checks every key.
    pub fn validate(&self) -> Result<()> {
        self.validate_model()?;
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.discretization;
        let b = &self.bases;
        if b.p == 0 || b.n_r == 0 || b.n_h == 0 || b.n_s == 0 || b.n_sample_cells == 0 {
            return bad("basis dimensions and n_sample_cells must be positive".into());
        }
        if b.n_sample_cells > d.n_cells {
            return bad(format!("n_sample_cells = {} exceeds n_cells = {}", b.n_sample_cells, d.n_cells));
        }
        let r = &self.rom;
        if r.n_subdomains == 0 || r.n_subdomains > d.n_cells {
            return bad(format!("rom.n_subdomains must lie in 1..={}", d.n_cells));
        }
        if !(r.rho >= 0.0) {
            return bad(format!("rom.rho must be nonnegative, got {}", r.rho));
        }
        if r.enforcement != "hard" && r.enforcement != "penalty" {
            return bad(format!("rom.enforcement must be 'hard' or 'penalty', got '{}'", r.enforcement));
        }
        if r.constraint_kind == HyperKind::None {
            return bad("rom.constraint_kind must name a hyper-reduction".into());
        }
        if !(r.rel_tol > 0.0) || !(r.constraint_tol > 0.0) || r.max_iter == 0 {
            return bad("rom tolerances and max_iter must be positive".into());
        }
        let s = &self.sweep;
        if s.methods.is_empty() || s.p.is_empty() || s.n_r.is_empty() || s.n_h.is_empty() || s.n_sample_cells.is_empty() || s.n_subdomains.is_empty() || s.rho.is_empty() {
            return bad("sweep lists must not be empty".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<NozzleGeometry> {
        let knots: Vec<(f64, f64)> = self.model.knots.iter().map(|k| (k[0], k[1])).collect();
        NozzleGeometry::from_knots(&knots, self.model.throat)
    }

    pub fn gas(&self) -> GasModel {
        GasModel {
            gamma: self.model.gamma,
            gas_constant: self.model.gas_constant,
            total_temperature: self.model.total_temperature,
            total_pressure: self.model.total_pressure,
        }
    }

    pub fn model_at(&self, mu: f64) -> Result<EulerNozzle> {
        EulerNozzle::new(self.geometry()?, self.gas(), self.discretization.n_cells, mu)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::from_final_time(self.discretization.dt, self.discretization.final_time)
    }

    pub fn scheme(&self) -> MultistepScheme {
        MultistepScheme::from_kind(self.discretization.scheme)
    }

    pub fn rom_options(&self) -> RomOptions {
        RomOptions {
            rel_tol: self.rom.rel_tol,
            max_iter: self.rom.max_iter,
            constraint_tol: self.rom.constraint_tol,
            ..RomOptions::default()
        }
    }

    /// Reduced model specification of `method` under this configuration.
    pub fn rom_spec<M: FiniteVolumeModel + ?Sized>(&self, model: &M, method: Method) -> Result<RomSpec> {
        let objective = if method.objective_tier() == 2 {
            ObjectiveSpec::hyper(HyperKind::ResidualGappy)
        } else {
            ObjectiveSpec::exact()
        };
        let constraint = match method.constraint_tier() {
            0 => ConstraintSpec::none(),
            tier => {
                let decomp = build_decomposition(model.mesh(), self.rom.n_subdomains, model.n_vars())?;
                let n_constraints = decomp.n_constraints();
                let enforcement = if self.rom.enforcement == "penalty" {
                    Enforcement::Penalty(self.rom.rho)
                } else {
                    Enforcement::Hard(match self.rom.infeasibility {
                        InfeasibilityMode::Auto if n_constraints > self.bases.p => InfeasibilityPolicy::Penalty(self.rom.rho),
                        InfeasibilityMode::Auto | InfeasibilityMode::CoarsenResume => InfeasibilityPolicy::CoarsenResume,
                        InfeasibilityMode::CoarsenRestart => InfeasibilityPolicy::CoarsenRestart,
                        InfeasibilityMode::Penalty => InfeasibilityPolicy::Penalty(self.rom.rho),
                    })
                };
                if tier == 1 {
                    ConstraintSpec::exact(decomp, enforcement)
                } else {
                    ConstraintSpec::hyper(decomp, self.rom.constraint_kind, enforcement)
                }
            }
        };
        Ok(RomSpec {
            projection: method.projection(),
            objective,
            constraint,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_the_benchmark_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.gamma, 1.3);
        assert_eq!(cfg.model.gas_constant, 355.4);
        assert_eq!(cfg.model.total_temperature, 2800.0);
        assert_eq!(cfg.model.total_pressure, 2.068e6);
        assert_eq!(cfg.model.length, 0.25);
        assert_eq!(cfg.discretization.dt, 0.01);
        assert_eq!(cfg.grid().unwrap().n_steps, 29);
        assert_eq!(cfg.training.train_mu, vec![1.7, 1.8, 1.9, 2.0]);
        assert_eq!(cfg.mu, 1.75);
        assert_eq!(cfg.rom.rho, 1e3);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = RunConfig::from_toml("mu = 1.8\n[rom]\nmethod = \"gnat-fv-x\"\nrho = inf\n[bases]\np = 7\n").unwrap();
        assert_eq!(cfg.mu, 1.8);
        assert_eq!(cfg.rom.method, Method::GnatFvX);
        assert!(cfg.rom.rho.is_infinite());
        assert_eq!(cfg.bases.p, 7);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "unknown = 1",
            "[bases]\np = 0",
            "[rom]\nmethod = \"nope\"",
            "[rom]\nrho = -1.0",
            "[discretization]\nn_cells = 10\n[bases]\nn_sample_cells = 11",
            "[model]\nlength = 0.3",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn method_tiers() {
        let tiers: Vec<(Projection, u8, u8)> = Method::ALL
            .iter()
            .map(|m| (m.projection(), m.objective_tier(), m.constraint_tier()))
            .collect();
        assert_eq!(
            tiers,
            vec![
                (Projection::Galerkin, 1, 0),
                (Projection::Galerkin, 1, 1),
                (Projection::Lspg, 1, 0),
                (Projection::Lspg, 1, 1),
                (Projection::Lspg, 2, 0),
                (Projection::Lspg, 2, 1),
                (Projection::Lspg, 2, 2),
            ]
        );
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
