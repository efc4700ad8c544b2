//! Per-opcode latency estimates for the latency performance goal.

use std::collections::BTreeMap;
use std::path::Path;

use bpfsynth_core::{AluOp, JmpCond, Opcode, Program, Size, Src};

use crate::SearchError;

const BUNDLED: &str = include_str!("../data/latency.toml");

/// Stable name of an opcode, used as the table key.
pub fn opcode_key(op: Opcode) -> String {
    let src = |s: Src| if s == Src::Imm { "imm" } else { "reg" };
    match op {
        Opcode::Alu64(AluOp::Neg, _) => "alu64.neg".into(),
        Opcode::Alu32(AluOp::Neg, _) => "alu32.neg".into(),
        Opcode::Alu64(a, s) => format!("alu64.{}.{}", a.mnemonic(), src(s)),
        Opcode::Alu32(a, s) => format!("alu32.{}.{}", a.mnemonic(), src(s)),
        Opcode::Jmp(JmpCond::Ja, _) => "jmp.ja".into(),
        Opcode::Jmp(c, s) => format!("jmp.{}.{}", c.mnemonic(), src(s)),
        Opcode::Ldx(sz) => format!("ldx.{}", sz.bits()),
        Opcode::Stx(sz) => format!("stx.{}", sz.bits()),
        Opcode::St(sz) => format!("st.{}", sz.bits()),
        Opcode::Xadd32 => "xadd.32".into(),
        Opcode::Xadd64 => "xadd.64".into(),
        Opcode::Lddw => "lddw".into(),
        Opcode::LdMapFd => "ld_map_fd".into(),
        Opcode::Call => "call".into(),
        Opcode::Exit => "exit".into(),
        Opcode::Nop => "nop".into(),
    }
}

/// Every opcode of the instruction set except NOP.
pub fn all_opcodes() -> Vec<Opcode> {
    let mut v = Vec::new();
    for a in AluOp::ALL {
        if a == AluOp::Neg {
            v.push(Opcode::Alu64(a, Src::Imm));
            v.push(Opcode::Alu32(a, Src::Imm));
            continue;
        }
        for s in [Src::Imm, Src::Reg] {
            v.push(Opcode::Alu64(a, s));
            v.push(Opcode::Alu32(a, s));
        }
    }
    for c in JmpCond::ALL {
        if c == JmpCond::Ja {
            v.push(Opcode::Jmp(c, Src::Imm));
            continue;
        }
        for s in [Src::Imm, Src::Reg] {
            v.push(Opcode::Jmp(c, s));
        }
    }
    for sz in Size::ALL {
        v.extend([Opcode::Ldx(sz), Opcode::Stx(sz), Opcode::St(sz)]);
    }
    v.extend([Opcode::Xadd32, Opcode::Xadd64, Opcode::Lddw, Opcode::LdMapFd, Opcode::Call, Opcode::Exit]);
    v
}

/// Average execution time per opcode, in nanoseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    ns: BTreeMap<String, f64>,
}

impl LatencyTable {
    pub fn parse(text: &str) -> Result<LatencyTable, SearchError> {
        let ns: BTreeMap<String, f64> = toml::from_str(text).map_err(|e| SearchError::Latency(e.to_string()))?;
        for op in all_opcodes() {
            match ns.get(&opcode_key(op)) {
                Some(v) if *v > 0.0 => {}
                Some(v) => return Err(SearchError::Latency(format!("{}: non-positive latency {v}", opcode_key(op)))),
                None => return Err(SearchError::Latency(format!("missing opcode {}", opcode_key(op)))),
            }
        }
        Ok(LatencyTable { ns })
    }

    pub fn load(path: &Path) -> Result<LatencyTable, SearchError> {
        let text = std::fs::read_to_string(path).map_err(|e| SearchError::Latency(format!("{}: {e}", path.display())))?;
        LatencyTable::parse(&text)
    }

    /// The table shipped with the crate.
    pub fn bundled() -> LatencyTable {
        LatencyTable::parse(BUNDLED).expect("bundled latency table is valid")
    }

    pub fn get(&self, op: Opcode) -> f64 {
        if op == Opcode::Nop {
            return 0.0;
        }
        self.ns[&opcode_key(op)]
    }

    /// Summed latency of every instruction in `p`.
    pub fn program(&self, p: &Program) -> f64 {
        p.insns.iter().map(|i| self.get(i.op)).sum()
    }
}
