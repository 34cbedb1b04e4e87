//! Experiment runner: PCG iteration sweeps over kernel parameters and
//! preconditioners, SPD HSS approximation error curves and scaling tables.

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, PointKind, PrecondKind, PrecondSpec};
pub use runner::{
    emit_error_curve, emit_scaling_table, run_sweep, run_sweep_in_memory, CellStatus, ErrorCurve, RunRecord,
    ScalingRow, ScalingTable, SweepOutput, System,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] spdhss::Error),
}
