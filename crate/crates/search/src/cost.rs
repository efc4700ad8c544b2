//! Error, performance and safety cost, and the acceptance rule.

use rand::Rng;

use bpfsynth_core::interpreter::{execute, default_fuel, OutputState, TestCase};
use bpfsynth_core::{Program, ProgramSpec};

use crate::latency::LatencyTable;
use crate::params::{CostWeights, DiffKind, ErrorCostConfig, NumTestsKind};

/// Per-test error charged when the candidate faults.
pub fn fault_penalty(kind: DiffKind) -> f64 {
    match kind {
        DiffKind::Pop => 64.0,
        DiffKind::Abs => 4294967296.0,
    }
}

/// Distance between two values under `kind`.
pub fn diff(kind: DiffKind, x: u64, y: u64) -> f64 {
    match kind {
        DiffKind::Pop => (x ^ y).count_ones() as f64,
        DiffKind::Abs => x.abs_diff(y) as f64,
    }
}

fn diff_bytes(kind: DiffKind, a: &[u8], b: &[u8]) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|k| diff(kind, *a.get(k).unwrap_or(&0) as u64, *b.get(k).unwrap_or(&0) as u64))
        .sum()
}

/// Summed distance over the output components `spec` exposes: r0, packet
/// bytes for XDP, and every map entry (a missing entry adds 1 and compares
/// its value against zeros).
pub fn output_diff(kind: DiffKind, a: &OutputState, b: &OutputState, spec: &ProgramSpec) -> f64 {
    let mut d = diff(kind, a.r0, b.r0);
    if spec.packet_is_output() {
        d += diff_bytes(kind, &a.packet, &b.packet);
    }
    let empty = Default::default();
    for def in &spec.maps {
        let ma = a.maps.get(&def.map_id).unwrap_or(&empty);
        let mb = b.maps.get(&def.map_id).unwrap_or(&empty);
        for (k, va) in ma {
            match mb.get(k) {
                Some(vb) => d += diff_bytes(kind, va, vb),
                None => d += 1.0 + diff_bytes(kind, va, &[]),
            }
        }
        for (k, vb) in mb {
            if !ma.contains_key(k) {
                d += 1.0 + diff_bytes(kind, &[], vb);
            }
        }
    }
    d
}

/// Test-suite part of the error cost.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TestOutcome {
    /// Summed per-test distance.
    pub total_diff: f64,
    pub incorrect: usize,
    pub tests: usize,
    /// The candidate faulted on at least one test.
    pub faulted: bool,
}

impl TestOutcome {
    pub fn all_pass(&self) -> bool {
        self.incorrect == 0
    }
}

pub fn run_tests(p: &Program, spec: &ProgramSpec, suite: &[TestCase], kind: DiffKind) -> TestOutcome {
    let fuel = default_fuel(p);
    let mut o = TestOutcome { tests: suite.len(), ..TestOutcome::default() };
    for t in suite {
        match execute(p, spec, &t.input, fuel) {
            Ok(out) => {
                if !out.same_as(&t.expected, spec) {
                    o.incorrect += 1;
                    o.total_diff += output_diff(kind, &out, &t.expected, spec);
                }
            }
            Err(_) => {
                o.incorrect += 1;
                o.faulted = true;
                o.total_diff += fault_penalty(kind);
            }
        }
    }
    o
}

/// `c * sum(diff) + unequal * num_tests`. With `num_tests = incorrect`, an
/// unproven candidate that passes every test still counts one test.
pub fn error_cost(t: &TestOutcome, unequal: bool, cfg: &ErrorCostConfig) -> f64 {
    let c = if cfg.average && t.tests > 0 { 1.0 / t.tests as f64 } else { 1.0 };
    let num = match cfg.num_tests {
        NumTestsKind::Incorrect => t.incorrect.max(1),
        NumTestsKind::Correct => t.tests - t.incorrect,
    };
    c * t.total_diff + if unequal { num as f64 } else { 0.0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerfGoal {
    Inst,
    Lat,
}

/// Extra instructions (or latency) of `cand` relative to `src`.
pub fn perf_cost(cand: &Program, src: &Program, goal: PerfGoal, lat: &LatencyTable) -> f64 {
    match goal {
        PerfGoal::Inst => cand.instruction_count() as f64 - src.instruction_count() as f64,
        PerfGoal::Lat => lat.program(cand) - lat.program(src),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Cost {
    pub err: f64,
    pub perf: f64,
    pub unsafe_: bool,
    pub total: f64,
}

/// `alpha * err + beta * perf + gamma * safe`, where `safe` is `err_max` for
/// unsafe candidates. The error term saturates so that it stays below
/// `err_max`.
pub fn total_cost(err: f64, perf: f64, unsafe_: bool, w: &CostWeights) -> Cost {
    let err_cap = if w.alpha > 0.0 { 0.25 * w.err_max / w.alpha } else { f64::INFINITY };
    let err = err.min(err_cap);
    let safe = if unsafe_ { w.err_max } else { 0.0 };
    Cost { err, perf, unsafe_, total: w.alpha * err + w.beta * perf + w.gamma * safe }
}

/// Metropolis-Hastings acceptance probability for a move with transition
/// ratio `tr_ratio = tr(synth -> curr) / tr(curr -> synth)`.
pub fn acceptance_probability(f_curr: f64, f_synth: f64, tr_ratio: f64, mh_beta: f64) -> f64 {
    (tr_ratio * (-mh_beta * (f_synth - f_curr)).exp()).min(1.0)
}

pub fn mh_accept(f_curr: f64, f_synth: f64, tr_ratio: f64, mh_beta: f64, rng: &mut impl Rng) -> bool {
    let a = acceptance_probability(f_curr, f_synth, tr_ratio, mh_beta);
    a >= 1.0 || rng.gen::<f64>() < a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_examples() {
        assert_eq!(diff(DiffKind::Pop, 0b0110, 0b0101), 2.0);
        assert_eq!(diff(DiffKind::Abs, 5, 3), 2.0);
        assert_eq!(diff(DiffKind::Abs, 3, 5), 2.0);
        assert_eq!(diff(DiffKind::Abs, 0, u64::MAX), u64::MAX as f64);
    }

    #[test]
    fn error_cost_example() {
        let t = TestOutcome { total_diff: 2.0, incorrect: 1, tests: 1, faulted: false };
        let cfg = ErrorCostConfig { diff: DiffKind::Abs, average: false, num_tests: NumTestsKind::Incorrect };
        assert_eq!(error_cost(&t, true, &cfg), 3.0);
        let pass = TestOutcome { tests: 4, ..TestOutcome::default() };
        assert_eq!(error_cost(&pass, false, &cfg), 0.0);
        assert_eq!(error_cost(&pass, true, &cfg), 1.0);
        let correct = ErrorCostConfig { num_tests: NumTestsKind::Correct, ..cfg };
        assert_eq!(error_cost(&pass, true, &correct), 4.0);
        let avg = ErrorCostConfig { average: true, ..cfg };
        let t4 = TestOutcome { total_diff: 8.0, incorrect: 2, tests: 4, faulted: false };
        assert_eq!(error_cost(&t4, true, &avg), 2.0 + 2.0);
    }

    #[test]
    fn total_cost_examples() {
        let w = CostWeights { alpha: 0.5, beta: 5.0, gamma: 1.0, err_max: 1e6, mh_beta: 1.0 };
        assert_eq!(total_cost(0.0, 0.0, false, &w).total, 0.0);
        assert_eq!(total_cost(0.0, -2.0, false, &w).total, -10.0);
        assert!(total_cost(0.0, 0.0, true, &w).total >= w.gamma * w.err_max);
        let huge = total_cost(1e30, 3.0, false, &w);
        assert!(huge.total < w.err_max);
    }

    #[test]
    fn acceptance_examples() {
        assert_eq!(acceptance_probability(5.0, 3.0, 1.0, 1.0), 1.0);
        let beta = 0.7;
        let p = acceptance_probability(1.0, 1.0 + 2f64.ln() / beta, 1.0, beta);
        assert!((p - 0.5).abs() < 1e-12);
    }
}
