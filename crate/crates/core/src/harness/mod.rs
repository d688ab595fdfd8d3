//! Experiment driver for the nozzle benchmark: configuration, training,
//! method runs, sweeps and the invariant checks.

pub mod check;
pub mod config;
pub mod pipeline;
pub mod sweep;

pub use check::{run_checks, CheckResult};
pub use config::{BasisConfig, InfeasibilityMode, Method, RunConfig, SnapshotSource};
pub use pipeline::{evaluate, fom_trajectory_path, load_fom, run_fom, run_method, run_training_foms, save_fom, save_rom, train, train_dir, FomRun, Trained};
pub use sweep::{pareto_front, run_sweep, write_sweep, SweepRow};
