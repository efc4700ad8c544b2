//! Bounded test suite: generated tests are evicted oldest first, solver
//! counterexamples are kept.

use std::collections::VecDeque;

use bpfsynth_core::interpreter::TestCase;

pub const INITIAL_TESTS: usize = 32;
pub const SUITE_CAP: usize = 512;

#[derive(Clone, Debug)]
pub struct TestSuite {
    tests: Vec<TestCase>,
    /// Indices of generated tests in insertion order.
    generated: VecDeque<usize>,
    counterexamples: usize,
    cap: usize,
}

impl TestSuite {
    pub fn new(initial: Vec<TestCase>, cap: usize) -> TestSuite {
        let generated = (0..initial.len()).collect();
        TestSuite { tests: initial, generated, counterexamples: 0, cap }
    }

    pub fn tests(&self) -> &[TestCase] {
        &self.tests
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }

    pub fn counterexamples(&self) -> usize {
        self.counterexamples
    }

    fn make_room(&mut self) {
        while self.tests.len() >= self.cap {
            let Some(old) = self.generated.pop_front() else { return };
            self.tests.remove(old);
            for g in self.generated.iter_mut() {
                if *g > old {
                    *g -= 1;
                }
            }
        }
    }

    /// Appends a solver counterexample; it is never evicted.
    pub fn add_counterexample(&mut self, t: TestCase) {
        self.make_room();
        self.tests.push(t);
        self.counterexamples += 1;
    }

    pub fn add_generated(&mut self, t: TestCase) {
        self.make_room();
        if self.tests.len() < self.cap {
            self.generated.push_back(self.tests.len());
            self.tests.push(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpfsynth_core::interpreter::{MachineState, OutputState};
    use bpfsynth_core::ProgramSpec;

    fn case(r0: u64) -> TestCase {
        let spec = ProgramSpec::ctx(0);
        let mut input = MachineState::new(&spec);
        input.regs[1] = r0;
        TestCase { input, expected: OutputState { r0, packet: Vec::new(), maps: Default::default() } }
    }

    #[test]
    fn evicts_generated_fifo_and_keeps_counterexamples() {
        let mut s = TestSuite::new((0..3).map(case).collect(), 4);
        s.add_counterexample(case(100));
        assert_eq!(s.len(), 4);
        s.add_counterexample(case(101));
        assert_eq!(s.len(), 4);
        assert!(s.tests().iter().all(|t| t.expected.r0 != 0));
        s.add_generated(case(7));
        let r0s: Vec<u64> = s.tests().iter().map(|t| t.expected.r0).collect();
        assert_eq!(r0s, vec![2, 100, 101, 7]);
        s.add_counterexample(case(102));
        s.add_counterexample(case(103));
        s.add_counterexample(case(104));
        let r0s: Vec<u64> = s.tests().iter().map(|t| t.expected.r0).collect();
        assert_eq!(r0s, vec![100, 101, 102, 103, 104]);
        assert_eq!(s.counterexamples(), 5);
    }
}
