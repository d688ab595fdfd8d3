//! Conservative projection-based model reduction for finite-volume models.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conservative;
pub mod error;
pub mod euler;
pub mod fv;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod linear;
pub mod metrics;
pub mod model;
pub mod rom;
pub mod sparse;
pub mod spline;
pub mod time;
pub mod training;

pub use error::{Error, Result};
pub use euler::{EulerNozzle, GasModel, NozzleGeometry};
pub use fv::{aggregate_state, build_decomposition, build_mesh, coarsen, DecomposedMesh, IncidenceOperator, Mesh};
pub use linear::LinearAdvection;
pub use model::FiniteVolumeModel;
pub use time::{integrate_fom, MultistepScheme, TimeGrid, TrajectoryRecord};
pub use conservative::{
    cons_galerkin_rhs, cons_lspg_step, integrate_conservative_rom, integrate_rom, lspg_step, ConstraintSpec, Enforcement, InfeasibilityPolicy,
    RomOptions, RomRun, RomSpec,
};
pub use rom::{HyperKind, HyperOperators, ObjectiveSpec, Projection};
pub use training::{greedy_sample, pod, ReducedBasis, SampleSelection, SnapshotKind, SnapshotSet};
pub use metrics::{compare, equivalence_diagnostic, feasibility_rank_diagnostic, EquivalenceReport, MetricReport};
