//! Markov chain Monte Carlo search for smaller or faster equivalent BPF
//! programs.

pub mod chain;
pub mod cost;
pub mod latency;
pub mod parallel;
pub mod params;
pub mod proposal;
pub mod suite;

use thiserror::Error;

use bpfsynth_core::analysis::AnalysisError;
use bpfsynth_core::interpreter::TestGenError;
use bpfsynth_verify::solver::SolverError;

pub use chain::{run_chain, Chain, ChainConfig, ChainResult, ChainStats, Record};
pub use cost::PerfGoal;
pub use latency::LatencyTable;
pub use parallel::{run_parallel, Candidate, SearchOutcome};
pub use params::{shipped_sets, ParamSet};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid latency table: {0}")]
    Latency(String),
    #[error(transparent)]
    Tests(#[from] TestGenError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("source program is unsafe: {0}")]
    UnsafeSource(String),
}
