use std::collections::HashMap;
use std::fmt;

use super::cfg::{build_cfg, AnalysisError, Cfg};
use crate::isa::{helpers, JmpCond, Opcode, Program, Reg, Src, NUM_REGS};

/// A versioned register. Version 0 is the value on entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    pub reg: Reg,
    pub ver: u32,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_v{}", self.reg, self.ver)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarDef {
    Entry,
    Insn(usize),
    Phi(usize),
    /// Set undefined by the helper call at this instruction.
    Clobber(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    Var(Var),
    Imm(i64),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => v.fmt(f),
            Operand::Imm(i) => i.fmt(f),
        }
    }
}

/// Condition under which a CFG edge is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeCond {
    pub cond: JmpCond,
    /// Fallthrough edges take the negation of the jump condition.
    pub negated: bool,
    pub lhs: Var,
    pub rhs: Operand,
}

impl fmt::Display for EdgeCond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.cond {
            JmpCond::Ja => "true",
            JmpCond::Jeq => "==",
            JmpCond::Jne => "!=",
            JmpCond::Jgt => ">u",
            JmpCond::Jge => ">=u",
            JmpCond::Jlt => "<u",
            JmpCond::Jle => "<=u",
            JmpCond::Jsgt => ">s",
            JmpCond::Jsge => ">=s",
        };
        if self.negated {
            write!(f, "!({} {} {})", self.lhs, op, self.rhs)
        } else {
            write!(f, "({} {} {})", self.lhs, op, self.rhs)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phi {
    pub var: Var,
    /// One source per incoming edge (edge index, version on that edge).
    pub sources: Vec<(usize, Var)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SsaInsn {
    pub block: usize,
    /// Version of `dst` read, if the instruction reads it.
    pub dst_in: Option<Var>,
    /// Version of `src` read, if the instruction reads it.
    pub src_in: Option<Var>,
    /// Helper arguments read by a call.
    pub args: Vec<Var>,
    /// Version defined.
    pub def: Option<Var>,
    /// Versions made undefined by a call.
    pub clobbers: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Ssa {
    pub cfg: Cfg,
    pub insns: Vec<SsaInsn>,
    pub phis: Vec<Vec<Phi>>,
    /// Register versions at block entry (after phis) and exit.
    pub entry_env: Vec<[Var; NUM_REGS]>,
    pub exit_env: Vec<[Var; NUM_REGS]>,
    pub edge_conds: Vec<Option<EdgeCond>>,
    pub defs: HashMap<Var, VarDef>,
    pub reachable: Vec<bool>,
}

impl Ssa {
    pub fn def_of(&self, v: Var) -> VarDef {
        self.defs.get(&v).copied().unwrap_or(VarDef::Entry)
    }

    /// Register versions live just before instruction `at` executes.
    pub fn env_before(&self, p: &Program, at: usize) -> [Var; NUM_REGS] {
        let b = self.cfg.block_of(at);
        let mut env = self.entry_env[b];
        for i in self.cfg.blocks[b].start..at {
            self.apply(p, i, &mut env);
        }
        env
    }

    fn apply(&self, _p: &Program, i: usize, env: &mut [Var; NUM_REGS]) {
        let s = &self.insns[i];
        for c in &s.clobbers {
            env[c.reg.index()] = *c;
        }
        if let Some(d) = s.def {
            env[d.reg.index()] = d;
        }
    }

    /// Path condition of block `b` as text.
    pub fn path_condition(&self, b: usize) -> String {
        if b == 0 {
            return "true".into();
        }
        let preds: Vec<String> = self
            .cfg
            .preds(b)
            .map(|(ei, e)| match &self.edge_conds[ei] {
                Some(c) => format!("pc_b{} & {}", e.from, c),
                None => format!("pc_b{}", e.from),
            })
            .collect();
        if preds.is_empty() {
            "false".into()
        } else {
            preds.join(" | ")
        }
    }

    /// Human-readable listing.
    pub fn listing(&self, p: &Program) -> String {
        let mut out = String::new();
        for (b, blk) in self.cfg.blocks.iter().enumerate() {
            out.push_str(&format!("b{b}: pc_b{b} = {}\n", self.path_condition(b)));
            for phi in &self.phis[b] {
                let srcs: Vec<String> = phi
                    .sources
                    .iter()
                    .map(|(e, v)| format!("b{}:{}", self.cfg.edges[*e].from, v))
                    .collect();
                out.push_str(&format!("  {} = phi({})\n", phi.var, srcs.join(", ")));
            }
            for i in blk.range() {
                let s = &self.insns[i];
                let mut line = format!("  {i:3}: {}", p.insns[i]);
                if let Some(d) = s.def {
                    line.push_str(&format!("    ; {d} :="));
                    for u in s.dst_in.iter().chain(s.src_in.iter()).chain(s.args.iter()) {
                        line.push_str(&format!(" {u}"));
                    }
                } else if s.dst_in.is_some() || s.src_in.is_some() {
                    line.push_str("    ; uses");
                    for u in s.dst_in.iter().chain(s.src_in.iter()) {
                        line.push_str(&format!(" {u}"));
                    }
                }
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }
}

/// Converts a forward-ordered program to SSA form with per-edge conditions.
pub fn to_ssa(p: &Program) -> Result<Ssa, AnalysisError> {
    let cfg = build_cfg(p)?;
    if !cfg.is_forward() {
        return Err(AnalysisError::NotForward);
    }
    let nb = cfg.blocks.len();
    let mut next_ver = [1u32; NUM_REGS];
    let mut fresh = |r: Reg| {
        let v = Var { reg: r, ver: next_ver[r.index()] };
        next_ver[r.index()] += 1;
        v
    };
    let entry: [Var; NUM_REGS] = std::array::from_fn(|i| Var { reg: Reg::new(i as u8).unwrap(), ver: 0 });
    let mut defs = HashMap::new();
    let mut insns = vec![SsaInsn::default(); p.len()];
    let mut phis = vec![Vec::new(); nb];
    let mut entry_env = vec![entry; nb];
    let mut exit_env = vec![entry; nb];
    let mut edge_conds = vec![None; cfg.edges.len()];
    let reachable = cfg.reachable_from_entry();

    for b in 0..nb {
        let preds: Vec<(usize, usize)> = cfg.preds(b).map(|(ei, e)| (ei, e.from)).collect();
        let mut env = entry;
        if b != 0 && !preds.is_empty() {
            for r in 0..NUM_REGS {
                let first = exit_env[preds[0].1][r];
                if preds.iter().all(|(_, pb)| exit_env[*pb][r] == first) {
                    env[r] = first;
                } else {
                    let v = fresh(Reg::new(r as u8).unwrap());
                    defs.insert(v, VarDef::Phi(b));
                    phis[b].push(Phi { var: v, sources: preds.iter().map(|(ei, pb)| (*ei, exit_env[*pb][r])).collect() });
                    env[r] = v;
                }
            }
        }
        entry_env[b] = env;
        for i in cfg.blocks[b].range() {
            let insn = &p.insns[i];
            let op = insn.op;
            let mut s = SsaInsn { block: b, ..Default::default() };
            if op.reads_dst() {
                s.dst_in = Some(env[insn.dst.index()]);
            }
            if op.reads_src() {
                s.src_in = Some(env[insn.src.index()]);
            }
            if op == Opcode::Exit {
                s.dst_in = Some(env[0]);
            }
            if op == Opcode::Call {
                let n = helpers::arity(insn.imm as u32).unwrap_or(5);
                s.args = (1..=n).map(|r| env[r]).collect();
                for r in 1..=5 {
                    let v = fresh(Reg::new(r).unwrap());
                    defs.insert(v, VarDef::Clobber(i));
                    env[r as usize] = v;
                    s.clobbers.push(v);
                }
                let v = fresh(Reg::R0);
                defs.insert(v, VarDef::Insn(i));
                env[0] = v;
                s.def = Some(v);
            } else if op.writes_dst() {
                let v = fresh(insn.dst);
                defs.insert(v, VarDef::Insn(i));
                env[insn.dst.index()] = v;
                s.def = Some(v);
            }
            insns[i] = s;
        }
        exit_env[b] = env;
        let last = cfg.blocks[b].last();
        let insn = &p.insns[last];
        if let Opcode::Jmp(cond, src) = insn.op {
            if cond != JmpCond::Ja {
                let lhs = env[insn.dst.index()];
                let rhs = match src {
                    Src::Imm => Operand::Imm(insn.imm),
                    Src::Reg => Operand::Var(env[insn.src.index()]),
                };
                for (ei, e) in cfg.succs(b) {
                    edge_conds[ei] = Some(EdgeCond { cond, negated: !e.taken, lhs, rhs });
                }
            }
        }
    }
    Ok(Ssa { cfg, insns, phis, entry_env, exit_env, edge_conds, defs, reachable })
}
