//! Library side of the `bpfsynth` command: loading inputs, running searches,
//! emitting programs and reports.

pub mod bench;
pub mod compile;
pub mod inspect;
pub mod state;

use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};

use bpfsynth_core::isa::parse_asm;
use bpfsynth_core::{Program, ProgramSpec};
use bpfsynth_search::chain::ChainConfig;
use bpfsynth_search::params::{load_params, shipped_sets, ParamSet};
use bpfsynth_search::{PerfGoal, SearchError};
use bpfsynth_verify::solver::{Solver, SolverConfig, SolverError};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const NOTHING_BETTER: u8 = 1;
    pub const INPUT: u8 = 2;
    pub const ENVIRONMENT: u8 = 3;
}

/// Exit code for an error: solver failures are environment errors, the rest
/// are input errors.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<SolverError>() || matches!(cause.downcast_ref::<SearchError>(), Some(SearchError::Solver(_))) {
            return exit::ENVIRONMENT;
        }
    }
    exit::INPUT
}

pub fn load_program(path: &Path) -> Result<Program> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_asm(&text).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn load_spec(path: &Path) -> Result<ProgramSpec> {
    ProgramSpec::load(path).with_context(|| format!("cannot load program description {}", path.display()))
}

pub fn solver_config(path: &Path, timeout_ms: u64) -> SolverConfig {
    SolverConfig { path: path.to_path_buf(), timeout: Duration::from_millis(timeout_ms) }
}

/// Fails with an environment error when the solver cannot be started.
pub fn probe_solver(cfg: &SolverConfig) -> Result<()> {
    Solver::new(cfg.clone()).probe().with_context(|| format!("solver `{}` is not usable", cfg.path.display()))
}

/// Search settings shared by `compile` and `bench`.
#[derive(Clone, Debug)]
pub struct SearchSettings {
    pub goal: PerfGoal,
    pub chains: usize,
    pub params: Vec<ParamSet>,
    pub budget_iters: u64,
    pub budget_secs: Option<f64>,
    pub seed: u64,
    pub top_k: Option<usize>,
    pub window: bool,
    pub solver: SolverConfig,
}

impl SearchSettings {
    pub fn new(goal: PerfGoal, solver: SolverConfig) -> SearchSettings {
        SearchSettings {
            goal,
            chains: shipped_sets().len(),
            params: shipped_sets(),
            budget_iters: 20_000,
            budget_secs: None,
            seed: 1,
            top_k: None,
            window: false,
            solver,
        }
    }

    pub fn with_params_file(mut self, path: Option<&Path>) -> Result<SearchSettings> {
        if let Some(p) = path {
            self.params = load_params(p).with_context(|| format!("cannot load parameter sets from {}", p.display()))?;
            anyhow::ensure!(!self.params.is_empty(), "{} defines no parameter sets", p.display());
        }
        Ok(self)
    }

    /// One configuration per chain, cycling through the parameter sets.
    pub fn chain_configs(&self, target_insns: Option<usize>) -> Vec<ChainConfig> {
        (0..self.chains.max(1))
            .map(|i| {
                let params = self.params[i % self.params.len()].clone();
                let mut c = ChainConfig::new(i, params, self.goal, self.seed.wrapping_add(i as u64));
                c.max_iters = self.budget_iters;
                c.max_secs = self.budget_secs;
                c.window = self.window;
                c.target_insns = target_insns;
                c.solver = self.solver.clone();
                c
            })
            .collect()
    }
}
