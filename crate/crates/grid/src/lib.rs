//! Desk-scale power-system models around a neural stability surrogate:
//! AC power flow, classical transient simulation, dataset generation,
//! interior-point TSC-OPF and the certified preventive-control loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod case;
pub mod control;
pub mod dataset;
pub mod opf;
pub mod powerflow;
pub mod tds;

pub use case::{FaultScenario, FeatureClass, Injections, PowerSystemCase};
pub use powerflow::{solve_power_flow, PowerFlowSolution};
pub use tds::{compute_tsi, run_tds, simulate, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("invalid fault scenario: {0}")]
    InvalidFault(String),
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e} p.u.)")]
    PowerFlowDiverged { iterations: usize, mismatch: f64 },
    #[error("topology error: {0}")]
    Topology(String),
    #[error("TSI needs at least two synchronous generators")]
    SingleGenerator,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("every sampled scenario was infeasible ({0} dropped)")]
    AllInfeasible(usize),
    #[error("OPF: {0}")]
    Opf(String),
    #[error(transparent)]
    Network(#[from] certopf_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;
