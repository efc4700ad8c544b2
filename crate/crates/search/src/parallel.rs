//! Independent chains, merged and re-verified after they all stop.

use std::collections::HashSet;
use std::thread;
use std::time::Duration;

use log::warn;

use bpfsynth_core::analysis::strip_nops;
use bpfsynth_core::isa::encode;
use bpfsynth_core::{Program, ProgramSpec};
use bpfsynth_verify::safety::check_safety;
use bpfsynth_verify::solver::{Equivalence, EquivalenceChecker, Solver, SolverConfig};

use crate::chain::{run_chain, ChainConfig, ChainResult, Record};
use crate::cost::{perf_cost, PerfGoal};
use crate::latency::LatencyTable;
use crate::SearchError;

/// A program that survived the final re-check.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub program: Program,
    pub insns: usize,
    pub perf: f64,
    pub latency: f64,
    /// `None` for the source program.
    pub chain: Option<usize>,
    pub iteration: u64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Best first; always non-empty since the source is included.
    pub ranked: Vec<Candidate>,
    pub chains: Vec<ChainResult>,
    /// Distinct chain records that failed the final re-check.
    pub rejected: usize,
}

impl SearchOutcome {
    pub fn best(&self) -> &Candidate {
        &self.ranked[0]
    }

    pub fn improved(&self) -> bool {
        self.best().chain.is_some()
    }
}

/// Default number of programs to emit per goal.
pub fn default_top_k(goal: PerfGoal) -> usize {
    match goal {
        PerfGoal::Inst => 1,
        PerfGoal::Lat => 5,
    }
}

/// Rejects unsafe sources before any chain starts.
pub fn check_source(src: &Program, spec: &ProgramSpec, solver: &SolverConfig) -> Result<(), SearchError> {
    let mut s = Solver::new(solver.clone());
    let report = check_safety(src, spec, Some(&mut s))?;
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(SearchError::UnsafeSource(format!("{} at {}: {}", v.kind, v.at, v.detail))),
    }
}

/// Programs that differ only in NOP placement are duplicates.
fn dedup_key(p: &Program) -> Vec<u8> {
    encode(&strip_nops(p))
}

/// Full safety and full-program equivalence with no cached verdicts.
fn recheck(p: &Program, spec: &ProgramSpec, checker: &mut EquivalenceChecker) -> Result<bool, SearchError> {
    let safety = check_safety(p, spec, Some(&mut checker.solver))?;
    if !safety.is_safe() {
        return Ok(false);
    }
    Ok(matches!(checker.check(p)?, Equivalence::Equivalent))
}

/// Runs every configuration as its own chain from `src`, then merges,
/// deduplicates, re-verifies and ranks the chains' records.
pub fn run_parallel(
    cfgs: Vec<ChainConfig>,
    src: &Program,
    spec: &ProgramSpec,
    lat: &LatencyTable,
    goal: PerfGoal,
    top_k: usize,
) -> Result<SearchOutcome, SearchError> {
    let solver = cfgs.first().map(|c| c.solver.clone()).unwrap_or_default();
    check_source(src, spec, &solver)?;
    let results: Vec<Result<ChainResult, SearchError>> = thread::scope(|s| {
        let handles: Vec<_> = cfgs.into_iter().map(|cfg| s.spawn(move || run_chain(cfg, src, spec, lat))).collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let chains = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut seen: HashSet<Vec<u8>> = HashSet::from([dedup_key(src)]);
    let fresh: Vec<&Record> = chains
        .iter()
        .flat_map(|c| c.records.iter())
        .filter(|r| seen.insert(dedup_key(&r.program)))
        .collect();

    let mut checker = EquivalenceChecker::new(src, spec, solver);
    checker.use_cache = false;
    let mut ranked = vec![candidate(src, src, None, 0, Duration::ZERO, goal, lat)];
    let mut rejected = 0;
    for r in fresh {
        if recheck(&r.program, spec, &mut checker)? {
            ranked.push(candidate(&r.program, src, Some(r.chain), r.iteration, r.elapsed, goal, lat));
        } else {
            warn!("chain {} record at iteration {} failed the final re-check", r.chain, r.iteration);
            rejected += 1;
        }
    }
    ranked.sort_by(|a, b| {
        a.perf
            .total_cmp(&b.perf)
            .then(a.insns.cmp(&b.insns))
            .then(a.chain.is_some().cmp(&b.chain.is_some()))
            .then(a.chain.cmp(&b.chain))
            .then(a.iteration.cmp(&b.iteration))
    });
    ranked.truncate(top_k.max(1));
    Ok(SearchOutcome { ranked, chains, rejected })
}

fn candidate(
    p: &Program,
    src: &Program,
    chain: Option<usize>,
    iteration: u64,
    elapsed: Duration,
    goal: PerfGoal,
    lat: &LatencyTable,
) -> Candidate {
    Candidate {
        program: p.clone(),
        insns: p.instruction_count(),
        perf: perf_cost(p, src, goal, lat),
        latency: lat.program(p),
        chain,
        iteration,
        elapsed,
    }
}
