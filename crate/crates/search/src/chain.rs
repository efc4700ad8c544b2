//! One Markov chain: proposal, cost evaluation with test-suite pruning and
//! solver checks, and Metropolis-Hastings acceptance.

use std::collections::HashMap;
use std::ops::Range;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bpfsynth_core::analysis::{select_windows, WindowSpec, DEFAULT_WINDOW_LEN};
use bpfsynth_core::interpreter::{default_fuel, execute, gen_tests, MachineState, TestCase};
use bpfsynth_core::isa::encode;
use bpfsynth_core::{Instruction, Program, ProgramSpec};
use bpfsynth_verify::safety::{check_safety, ViolationKind};
use bpfsynth_verify::solver::{Equivalence, EquivalenceChecker, SolverConfig};

use crate::cost::{error_cost, mh_accept, perf_cost, run_tests, total_cost, Cost, PerfGoal, TestOutcome};
use crate::latency::LatencyTable;
use crate::params::ParamSet;
use crate::proposal::{Proposer, Rule};
use crate::suite::{TestSuite, INITIAL_TESTS, SUITE_CAP};
use crate::SearchError;

#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub id: usize,
    pub params: ParamSet,
    pub goal: PerfGoal,
    pub seed: u64,
    pub max_iters: u64,
    pub max_secs: Option<f64>,
    /// Verify modified windows instead of whole programs.
    pub window: bool,
    pub window_len: usize,
    /// Stop once a verified program has at most this many instructions.
    pub target_insns: Option<usize>,
    pub initial_tests: usize,
    pub suite_cap: usize,
    pub use_cache: bool,
    pub solver: SolverConfig,
    /// Iterations between progress log lines; 0 disables them.
    pub log_every: u64,
    /// Keep every candidate the solver refuted, for inspection.
    pub track_sat: bool,
}

impl ChainConfig {
    pub fn new(id: usize, params: ParamSet, goal: PerfGoal, seed: u64) -> ChainConfig {
        ChainConfig {
            id,
            params,
            goal,
            seed,
            max_iters: 10_000,
            max_secs: None,
            window: false,
            window_len: DEFAULT_WINDOW_LEN,
            target_insns: None,
            initial_tests: INITIAL_TESTS,
            suite_cap: SUITE_CAP,
            use_cache: true,
            solver: SolverConfig::default(),
            log_every: 10_000,
            track_sat: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ChainStats {
    pub iterations: u64,
    pub accepted: u64,
    /// Candidates that passed every test.
    pub passed_tests: u64,
    pub equivalence_queries: usize,
    pub safety_queries: usize,
    pub cache_lookups: usize,
    pub cache_hits: usize,
    pub counterexamples: usize,
    pub elapsed: Duration,
    /// Candidates refuted by a solver model, when tracking is on.
    pub sat_candidates: Vec<Program>,
    pub rule_counts: HashMap<Rule, u64>,
}

impl ChainStats {
    pub fn solver_calls(&self) -> usize {
        self.equivalence_queries + self.safety_queries
    }

    pub fn cache_hit_rate(&self) -> f64 {
        if self.cache_lookups == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.cache_lookups as f64
        }
    }
}

/// A verified program that improved on the chain's best cost.
#[derive(Clone, Debug)]
pub struct Record {
    pub program: Program,
    pub cost: f64,
    pub perf: f64,
    pub insns: usize,
    pub chain: usize,
    pub iteration: u64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cost: Cost,
    pub tests: TestOutcome,
    /// Passed every test, proven equivalent (or every modified window was)
    /// and safe.
    pub verified: bool,
    /// The solver produced a model refuting the candidate.
    pub refuted: bool,
}

#[derive(Clone, Debug)]
pub struct ChainResult {
    pub id: usize,
    pub records: Vec<Record>,
    pub stats: ChainStats,
    pub suite_len: usize,
}

pub struct Chain {
    cfg: ChainConfig,
    spec: ProgramSpec,
    src: Program,
    lat: LatencyTable,
    proposer: Proposer,
    checker: EquivalenceChecker,
    suite: TestSuite,
    windows: Vec<WindowSpec>,
    safety_cache: HashMap<Vec<u8>, bool>,
    window_cache: HashMap<(usize, Vec<Instruction>), bool>,
    stats: ChainStats,
    rng: ChaCha8Rng,
    curr: Program,
    f_curr: f64,
    best: f64,
    records: Vec<Record>,
    start: Instant,
}

impl Chain {
    /// Sets up a chain starting at `src`, which the caller has checked to be
    /// safe.
    pub fn new(cfg: ChainConfig, src: &Program, spec: &ProgramSpec, lat: LatencyTable) -> Result<Chain, SearchError> {
        cfg.params.validate()?;
        let tests = gen_tests(src, spec, cfg.initial_tests, cfg.seed)?;
        let windows = if cfg.window { select_windows(src, spec, cfg.window_len)? } else { Vec::new() };
        let mut proposer = Proposer::for_source(src);
        if cfg.window {
            proposer = proposer.with_windows(windows.iter().map(|w| w.start..w.end).collect::<Vec<Range<usize>>>());
        }
        let mut checker = EquivalenceChecker::new(src, spec, cfg.solver.clone());
        checker.use_cache = cfg.use_cache;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_0000_0000);
        let start = Instant::now();
        let record = Record {
            program: src.clone(),
            cost: 0.0,
            perf: 0.0,
            insns: src.instruction_count(),
            chain: cfg.id,
            iteration: 0,
            elapsed: Duration::ZERO,
        };
        Ok(Chain {
            suite: TestSuite::new(tests, cfg.suite_cap),
            cfg,
            spec: spec.clone(),
            src: src.clone(),
            lat,
            proposer,
            checker,
            windows,
            safety_cache: HashMap::new(),
            window_cache: HashMap::new(),
            stats: ChainStats::default(),
            rng,
            curr: src.clone(),
            f_curr: 0.0,
            best: 0.0,
            records: vec![record],
            start,
        })
    }

    pub fn suite(&self) -> &TestSuite {
        &self.suite
    }

    pub fn stats(&self) -> &ChainStats {
        &self.stats
    }

    pub fn current(&self) -> &Program {
        &self.curr
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    /// Adds `input` as a counterexample test if the source runs on it.
    fn add_counterexample(&mut self, input: MachineState) -> bool {
        match execute(&self.src, &self.spec, &input, default_fuel(&self.src)) {
            Ok(expected) => {
                self.suite.add_counterexample(TestCase { input, expected });
                self.stats.counterexamples += 1;
                true
            }
            Err(_) => false,
        }
    }

    fn note_refuted(&mut self, cand: &Program) {
        if self.cfg.track_sat {
            self.stats.sat_candidates.push(cand.clone());
        }
    }

    /// Safety verdict, adding replayable counterexamples to the suite.
    fn safety(&mut self, cand: &Program, refuted: &mut bool) -> Result<bool, SearchError> {
        let key = encode(cand);
        if self.cfg.use_cache {
            if let Some(s) = self.safety_cache.get(&key) {
                return Ok(*s);
            }
        }
        let report = check_safety(cand, &self.spec, Some(&mut self.checker.solver))?;
        self.stats.safety_queries += report.solver_calls;
        let safe = report.is_safe();
        for c in report.counterexamples {
            if c.replayed && self.add_counterexample(c.input) {
                *refuted = true;
            }
        }
        if *refuted {
            self.note_refuted(cand);
        }
        let undecided = report.violations.iter().any(|v| v.kind == ViolationKind::Unverified);
        if self.cfg.use_cache && !undecided {
            self.safety_cache.insert(key, safe);
        }
        Ok(safe)
    }

    /// Full-program equivalence; `true` when proven.
    fn full_equivalence(&mut self, cand: &Program, refuted: &mut bool) -> Result<bool, SearchError> {
        let before = self.checker.queries;
        let (lookups, hits) = (self.checker.cache.lookups, self.checker.cache.hits);
        let verdict = self.checker.check(cand)?;
        self.stats.equivalence_queries += self.checker.queries - before;
        self.stats.cache_lookups += self.checker.cache.lookups - lookups;
        self.stats.cache_hits += self.checker.cache.hits - hits;
        Ok(match verdict {
            Equivalence::Equivalent => true,
            Equivalence::Counterexample(input) => {
                if self.add_counterexample(*input) {
                    *refuted = true;
                    self.note_refuted(cand);
                }
                false
            }
            Equivalence::Different => false,
            Equivalence::Unknown(reason) => {
                debug!("equivalence undecided: {reason}");
                false
            }
        })
    }

    /// Window equivalence against the source; `true` when every modified
    /// window is proven.
    fn window_equivalence(&mut self, cand: &Program) -> Result<bool, SearchError> {
        for wi in 0..self.windows.len() {
            let ws = &self.windows[wi];
            let w2 = &cand.insns[ws.start..ws.end];
            if w2 == &self.src.insns[ws.start..ws.end] {
                continue;
            }
            let key = (wi, w2.to_vec());
            self.stats.cache_lookups += 1;
            let ok = match self.window_cache.get(&key).filter(|_| self.cfg.use_cache) {
                Some(ok) => {
                    self.stats.cache_hits += 1;
                    *ok
                }
                None => {
                    let ws = ws.clone();
                    let before = self.checker.queries;
                    let ok = self.checker.check_window(&self.src, &key.1, &ws)?;
                    self.stats.equivalence_queries += self.checker.queries - before;
                    self.window_cache.insert(key, ok);
                    ok
                }
            };
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Cost of `cand`. Tests run first; safety and equivalence queries are
    /// only issued for candidates that pass every test. Solver
    /// counterexamples are appended to the suite.
    pub fn evaluate(&mut self, cand: &Program) -> Result<Evaluation, SearchError> {
        let p = &self.cfg.params;
        let (kind, ecfg, weights) = (p.error.diff, p.error, p.weights);
        let perf = perf_cost(cand, &self.src, self.cfg.goal, &self.lat);
        let tests = run_tests(cand, &self.spec, self.suite.tests(), kind);
        if !tests.all_pass() {
            let err = error_cost(&tests, true, &ecfg);
            let cost = total_cost(err, perf, tests.faulted, &weights);
            return Ok(Evaluation { cost, tests, verified: false, refuted: false });
        }
        self.stats.passed_tests += 1;
        let mut refuted = false;
        let safe = self.safety(cand, &mut refuted)?;
        let equal = safe
            && if self.cfg.window {
                self.window_equivalence(cand)?
            } else {
                self.full_equivalence(cand, &mut refuted)?
            };
        let tests = if refuted { run_tests(cand, &self.spec, self.suite.tests(), kind) } else { tests };
        let err = error_cost(&tests, !equal, &ecfg);
        let cost = total_cost(err, perf, !safe || tests.faulted, &weights);
        Ok(Evaluation { cost, tests, verified: equal && safe, refuted })
    }

    /// One proposal, evaluation and acceptance decision.
    pub fn step(&mut self) -> Result<(), SearchError> {
        let params = &self.cfg.params;
        let prop = self.proposer.propose(&self.curr, &params.probs, &mut self.rng);
        *self.stats.rule_counts.entry(prop.rule).or_default() += 1;
        let ev = self.evaluate(&prop.program)?;
        self.stats.iterations += 1;
        if ev.refuted && prop.program != self.curr {
            let curr = self.curr.clone();
            self.f_curr = self.evaluate(&curr)?.cost.total;
        }
        let mh_beta = self.cfg.params.weights.mh_beta;
        let accepted = mh_accept(self.f_curr, ev.cost.total, 1.0, mh_beta, &mut self.rng);
        if ev.verified && ev.cost.total < self.best - 1e-9 {
            let mut refuted = false;
            let confirmed = !self.cfg.window || self.full_equivalence(&prop.program, &mut refuted)?;
            if confirmed {
                self.best = ev.cost.total;
                self.records.push(Record {
                    program: prop.program.clone(),
                    cost: ev.cost.total,
                    perf: ev.cost.perf,
                    insns: prop.program.instruction_count(),
                    chain: self.cfg.id,
                    iteration: self.stats.iterations,
                    elapsed: self.start.elapsed(),
                });
                debug!("chain {} new best {:.3} at iteration {}", self.cfg.id, self.best, self.stats.iterations);
            }
        }
        if accepted {
            self.stats.accepted += 1;
            self.curr = prop.program;
            self.f_curr = ev.cost.total;
        }
        Ok(())
    }

    fn done(&self) -> bool {
        if self.stats.iterations >= self.cfg.max_iters {
            return true;
        }
        if let Some(s) = self.cfg.max_secs {
            if self.start.elapsed().as_secs_f64() >= s {
                return true;
            }
        }
        match (self.cfg.target_insns, self.records.last()) {
            (Some(t), Some(r)) => r.insns <= t,
            _ => false,
        }
    }

    /// Runs until the iteration or time budget is spent.
    pub fn run(mut self) -> Result<ChainResult, SearchError> {
        while !self.done() {
            self.step()?;
            let it = self.stats.iterations;
            if self.cfg.log_every > 0 && it % self.cfg.log_every == 0 {
                info!(
                    "chain {} iter {} cost {:.3} best {:.3} cache_hits {}/{} solver_calls {}",
                    self.cfg.id,
                    it,
                    self.f_curr,
                    self.best,
                    self.stats.cache_hits,
                    self.stats.cache_lookups,
                    self.stats.solver_calls()
                );
            }
        }
        self.stats.elapsed = self.start.elapsed();
        Ok(ChainResult { id: self.cfg.id, records: self.records, stats: self.stats, suite_len: self.suite.len() })
    }
}

/// Runs one chain from `src` to completion.
pub fn run_chain(cfg: ChainConfig, src: &Program, spec: &ProgramSpec, lat: &LatencyTable) -> Result<ChainResult, SearchError> {
    Chain::new(cfg, src, spec, lat.clone())?.run()
}
