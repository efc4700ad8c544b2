//! Safety checking: static checks over the CFG and inferred types, then a
//! single solver query covering NULL dereference, bounds, alignment and
//! initialization properties that depend on runtime values.

use std::fmt;

use bpfsynth_core::analysis::{build_cfg, infer_ptr_types, reorder_forward, to_ssa, MemType, PtrFact, PtrInfo, Ssa, Var, VarDef};
use bpfsynth_core::interpreter::{default_fuel, execute, FaultKind, MachineState};
use bpfsynth_core::isa::{helpers, AluOp, JmpCond, Opcode, Program, Reg, Src, STACK_SIZE};
use bpfsynth_core::layout;
use bpfsynth_core::ProgramSpec;
use log::debug;

use crate::solver::{Solver, SolverError, Verdict};
use crate::term::Term;
use crate::vcgen::{AccessEvent, VcContext, VcOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    UnreachableBlock,
    Loop,
    OobJump,
    OutOfBounds,
    NullDeref,
    UninitStackRead,
    UninitRegister,
    ClobberedRegister,
    Misaligned,
    PointerAlu,
    PointerAlias,
    PointerCompare,
    PointerLeak,
    CtxStore,
    InvalidBase,
    BadHelperArg,
    /// The encoder or solver could not decide the program.
    Unverified,
}

impl ViolationKind {
    /// Interpreter fault a counterexample for this violation must raise.
    pub fn fault(self) -> Option<FaultKind> {
        Some(match self {
            ViolationKind::OutOfBounds => FaultKind::OobAccess,
            ViolationKind::NullDeref => FaultKind::NullDeref,
            ViolationKind::UninitStackRead | ViolationKind::UninitRegister | ViolationKind::ClobberedRegister => {
                FaultKind::ReadBeforeWrite
            }
            ViolationKind::Misaligned => FaultKind::BadAlignment,
            _ => return None,
        })
    }

    fn rank(self) -> u8 {
        match self {
            ViolationKind::UninitRegister | ViolationKind::ClobberedRegister => 0,
            ViolationKind::NullDeref | ViolationKind::OutOfBounds => 1,
            ViolationKind::Misaligned => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::UnreachableBlock => "UNREACHABLE_BLOCK",
            ViolationKind::Loop => "LOOP",
            ViolationKind::OobJump => "OOB_JUMP",
            ViolationKind::OutOfBounds => "OUT_OF_BOUNDS",
            ViolationKind::NullDeref => "NULL_DEREF",
            ViolationKind::UninitStackRead => "UNINIT_STACK_READ",
            ViolationKind::UninitRegister => "UNINIT_REGISTER",
            ViolationKind::ClobberedRegister => "CLOBBERED_REGISTER",
            ViolationKind::Misaligned => "MISALIGNED",
            ViolationKind::PointerAlu => "POINTER_ALU",
            ViolationKind::PointerAlias => "POINTER_ALIAS",
            ViolationKind::PointerCompare => "POINTER_COMPARE",
            ViolationKind::PointerLeak => "POINTER_LEAK",
            ViolationKind::CtxStore => "CTX_STORE",
            ViolationKind::InvalidBase => "INVALID_BASE",
            ViolationKind::BadHelperArg => "BAD_HELPER_ARG",
            ViolationKind::Unverified => "UNVERIFIED",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub at: usize,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.kind, self.at, self.detail)
    }
}

/// An input that drives the program into a violation.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyCounterexample {
    pub input: MachineState,
    pub kind: ViolationKind,
    /// The interpreter raised the matching fault on this input.
    pub replayed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SafetyReport {
    pub violations: Vec<Violation>,
    pub counterexamples: Vec<SafetyCounterexample>,
    pub solver_calls: usize,
}

impl SafetyReport {
    pub fn is_safe(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, at: usize, detail: impl Into<String>) {
        self.violations.push(Violation { kind, at, detail: detail.into() });
    }
}

impl fmt::Display for SafetyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_safe() {
            return writeln!(f, "SAFE");
        }
        writeln!(f, "UNSAFE")?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        for c in &self.counterexamples {
            writeln!(f, "  counterexample for {} (replayed: {})", c.kind, c.replayed)?;
        }
        Ok(())
    }
}

fn is_map_helper(id: u32) -> bool {
    matches!(id, helpers::MAP_LOOKUP_ELEM | helpers::MAP_UPDATE_ELEM | helpers::MAP_DELETE_ELEM)
}

/// Registers the interpreter reads at instruction `at`.
fn reads(p: &Program, ssa: &Ssa, at: usize) -> Vec<Var> {
    let s = &ssa.insns[at];
    let insn = &p.insns[at];
    if insn.op == Opcode::Call {
        let id = insn.imm as u32;
        return if is_map_helper(id) { s.args.clone() } else { Vec::new() };
    }
    s.dst_in.into_iter().chain(s.src_in).collect()
}

fn control_flow(p: &Program, r: &mut SafetyReport) -> Option<Program> {
    let cfg = match build_cfg(p) {
        Ok(c) => c,
        Err(e) => {
            let at = p
                .insns
                .iter()
                .enumerate()
                .find(|(i, x)| x.jump_target(*i).is_some_and(|t| t < 0 || t >= p.len() as i64))
                .map(|(i, _)| i)
                .unwrap_or(0);
            r.push(ViolationKind::OobJump, at, e.to_string());
            return None;
        }
    };
    if let Some(&b) = cfg.falls_off.first() {
        r.push(ViolationKind::OobJump, cfg.blocks[b].last(), "execution falls off the end of the program");
    }
    if cfg.has_cycle() {
        let at = p
            .insns
            .iter()
            .enumerate()
            .find(|(i, x)| x.jump_target(*i).is_some_and(|t| t <= *i as i64))
            .map(|(i, _)| i)
            .unwrap_or(0);
        r.push(ViolationKind::Loop, at, "control flow contains a cycle");
        return None;
    }
    let reach = cfg.reachable_from_entry();
    for (b, blk) in cfg.blocks.iter().enumerate() {
        if !reach[b] && p.insns[blk.range()].iter().any(|x| !x.is_nop()) {
            r.push(ViolationKind::UnreachableBlock, blk.start, format!("block {}..{} is never executed", blk.start, blk.end));
        }
    }
    if !r.is_safe() {
        return None;
    }
    if cfg.is_forward() {
        Some(p.clone())
    } else {
        reorder_forward(p).ok()
    }
}

fn check_registers(p: &Program, ssa: &Ssa, spec: &ProgramSpec, r: &mut SafetyReport) {
    for (b, blk) in ssa.cfg.blocks.iter().enumerate() {
        if !ssa.reachable[b] {
            continue;
        }
        for at in blk.range() {
            for v in reads(p, ssa, at) {
                match ssa.def_of(v) {
                    VarDef::Entry if v.reg != Reg::FP && spec.input_kind(v.reg).is_none() => {
                        r.push(ViolationKind::UninitRegister, at, format!("{} read before any write", v.reg))
                    }
                    VarDef::Clobber(call) => r.push(
                        ViolationKind::ClobberedRegister,
                        at,
                        format!("{} read after the helper call at {call}", v.reg),
                    ),
                    _ => {}
                }
            }
        }
    }
}

fn scalar_imm(v: i64) -> PtrFact {
    PtrFact { ty: MemType::Scalar, off: None, origin: None, value: Some(v as u64), entries: Vec::new() }
}

fn check_types(p: &Program, ssa: &Ssa, info: &PtrInfo, spec: &ProgramSpec, r: &mut SafetyReport) {
    for (b, blk) in ssa.cfg.blocks.iter().enumerate() {
        if !ssa.reachable[b] {
            continue;
        }
        for at in blk.range() {
            let insn = p.insns[at];
            let s = &ssa.insns[at];
            let fact = |v: Option<Var>| v.map(|v| info.get(v));
            match insn.op {
                Opcode::Alu64(op, src) | Opcode::Alu32(op, src) => {
                    let is64 = matches!(insn.op, Opcode::Alu64(..));
                    let a = fact(s.dst_in);
                    let bf = match src {
                        Src::Imm => Some(scalar_imm(insn.imm)),
                        Src::Reg => fact(s.src_in),
                    };
                    let ap = a.as_ref().is_some_and(|f| f.ty.is_pointer());
                    let bp = op != AluOp::Neg && bf.as_ref().is_some_and(|f| f.ty.is_pointer());
                    if !ap && !bp {
                        continue;
                    }
                    let aty = a.as_ref().map(|f| f.ty);
                    let bty = bf.as_ref().map(|f| f.ty);
                    let bad = match (is64, op) {
                        (false, _) => Some(ViolationKind::PointerAlu),
                        (true, AluOp::Mov) => None,
                        (true, AluOp::Add) if ap && bp => Some(ViolationKind::PointerAlias),
                        (true, AluOp::Add) => {
                            let pty = if ap { aty } else { bty };
                            (!pty.is_some_and(MemType::is_memory)).then_some(ViolationKind::PointerAlu)
                        }
                        (true, AluOp::Sub) if ap && bp => {
                            let same = aty == bty && !matches!(aty, Some(MemType::MapValue(_))) && aty.is_some_and(MemType::is_memory);
                            (!same).then_some(ViolationKind::PointerAlias)
                        }
                        (true, AluOp::Sub) if ap => (!aty.is_some_and(MemType::is_memory)).then_some(ViolationKind::PointerAlu),
                        _ => Some(ViolationKind::PointerAlu),
                    };
                    if let Some(kind) = bad {
                        r.push(kind, at, format!("{} on {} and {}", op.mnemonic(), fmt_ty(aty), fmt_ty(bty)));
                    }
                }
                Opcode::Jmp(cond, src) if cond != JmpCond::Ja => {
                    let a = fact(s.dst_in).map(|f| f.ty);
                    let bf = match src {
                        Src::Imm => Some(scalar_imm(insn.imm)),
                        Src::Reg => fact(s.src_in),
                    };
                    let bty = bf.as_ref().map(|f| f.ty);
                    let ap = a.is_some_and(MemType::is_pointer);
                    let bp = bty.is_some_and(MemType::is_pointer);
                    let ok = match (ap, bp) {
                        (false, false) => true,
                        (true, true) => a == bty,
                        (true, false) => bf.as_ref().is_some_and(|f| f.value == Some(0)),
                        (false, true) => false,
                    };
                    if !ok {
                        r.push(ViolationKind::PointerCompare, at, format!("comparison of {} with {}", fmt_ty(a), fmt_ty(bty)));
                    }
                }
                Opcode::Ldx(_) | Opcode::Stx(_) | Opcode::St(_) | Opcode::Xadd32 | Opcode::Xadd64 => {
                    let Some(acc) = info.access(p, ssa, at) else { continue };
                    if !acc.ty.is_memory() {
                        r.push(ViolationKind::InvalidBase, at, format!("dereference through {}", acc.ty));
                    } else if insn.op.is_store()
                        && (acc.ty == MemType::Ctx || (acc.ty == MemType::Packet && !spec.packet_writable()))
                    {
                        r.push(ViolationKind::CtxStore, at, format!("store to read-only {}", acc.ty));
                    }
                }
                Opcode::Call if is_map_helper(insn.imm as u32) => {
                    let handle = s.args.first().map(|v| info.ty(*v));
                    match handle {
                        Some(MemType::MapHandle(id)) if spec.map(id).is_some() => {}
                        other => r.push(ViolationKind::BadHelperArg, at, format!("r1 is {}, not a map handle", fmt_ty(other))),
                    }
                    let ptr_args = if insn.imm as u32 == helpers::MAP_UPDATE_ELEM { 1..3 } else { 1..2 };
                    for k in ptr_args {
                        let ty = s.args.get(k).map(|v| info.ty(*v));
                        if !ty.is_some_and(MemType::is_memory) {
                            r.push(ViolationKind::BadHelperArg, at, format!("r{} is {}, not a memory pointer", k + 1, fmt_ty(ty)));
                        }
                    }
                }
                Opcode::Exit => {
                    let ty = fact(s.dst_in).map(|f| f.ty);
                    if ty.is_some_and(MemType::is_pointer) {
                        r.push(ViolationKind::PointerLeak, at, format!("r0 holds a {} pointer at exit", fmt_ty(ty)));
                    }
                }
                _ => {}
            }
        }
    }
}

fn fmt_ty(t: Option<MemType>) -> String {
    t.map(|t| t.to_string()).unwrap_or_else(|| "IMM".into())
}

fn region_bounds(ev: &AccessEvent, spec: &ProgramSpec) -> Option<(i64, i64)> {
    match ev.ty {
        MemType::Stack => Some((-STACK_SIZE, 0)),
        MemType::Packet | MemType::Ctx => Some((0, spec.packet_size as i64)),
        MemType::MapValue(id) => spec.map(id).map(|m| (0, m.value_size as i64)),
        _ => None,
    }
}

fn check_concrete_accesses(accesses: &[AccessEvent], spec: &ProgramSpec, r: &mut SafetyReport) {
    for ev in accesses {
        let w = ev.width as i64;
        let Some((lo, hi)) = region_bounds(ev, spec) else {
            r.push(ViolationKind::InvalidBase, ev.at, format!("access through {}", ev.ty));
            continue;
        };
        match ev.off {
            Some(o) => {
                if o < lo || o + w > hi {
                    r.push(ViolationKind::OutOfBounds, ev.at, format!("{}-byte access at {} offset {o}", w, ev.ty));
                } else if ev.ty == MemType::Stack && ev.aligned && o.rem_euclid(w) != 0 {
                    r.push(ViolationKind::Misaligned, ev.at, format!("{w}-byte stack access at offset {o}"));
                }
            }
            None if matches!(ev.ty, MemType::MapValue(_)) => {
                r.push(ViolationKind::OutOfBounds, ev.at, format!("unknown offset into {}", ev.ty));
            }
            None => {}
        }
    }
}

struct Indicator {
    kind: ViolationKind,
    at: usize,
    detail: String,
    term: Term,
}

fn indicators(cx: &VcContext, enc: &crate::vcgen::Encoding, spec: &ProgramSpec) -> Vec<Indicator> {
    let mut out = Vec::new();
    let mut add = |kind, at, detail: String, term: Term| {
        if term.as_bool() != Some(false) {
            out.push(Indicator { kind, at, detail, term });
        }
    };
    for rr in &enc.reg_reads {
        if rr.defined.as_bool() == Some(true) {
            continue;
        }
        add(ViolationKind::UninitRegister, rr.at, format!("{} may be undefined", rr.var.reg), rr.pc.and(&rr.defined.not()));
    }
    for ev in &enc.accesses {
        let w = ev.width as u64;
        if let MemType::MapValue(_) = ev.ty {
            if let Some(o) = ev.off {
                let base = ev.addr.bvsub(&Term::bv64(o as u64));
                add(ViolationKind::NullDeref, ev.at, "map value may be NULL".into(), ev.pc.and(&base.equals(&Term::bv64(0))));
            }
        }
        if ev.off.is_none() {
            let (lo, hi) = match ev.ty {
                MemType::Stack => (cx.fp.bvsub(&Term::bv64(STACK_SIZE as u64)), cx.fp.clone()),
                MemType::Packet | MemType::Ctx => (cx.pkt.clone(), cx.pkt.bvadd(&Term::bv64(spec.packet_size as u64))),
                _ => continue,
            };
            let end = ev.addr.bvadd(&Term::bv64(w));
            let inside = lo.bvule(&ev.addr).and(&end.bvule(&hi)).and(&ev.addr.bvule(&end));
            let guard = Term::bv64(layout::NULL_GUARD);
            let low = ev.addr.bvult(&guard);
            add(
                ViolationKind::OutOfBounds,
                ev.at,
                format!("{w}-byte {} access may leave the region", ev.ty),
                ev.pc.and(&inside.not()).and(&low.not()),
            );
            add(
                ViolationKind::NullDeref,
                ev.at,
                format!("{w}-byte {} access may hit the null page", ev.ty),
                ev.pc.and(&inside.not()).and(&low),
            );
            if ev.ty == MemType::Stack && ev.aligned && w > 1 {
                let mis = ev.addr.bvand(&Term::bv64(w - 1)).equals(&Term::bv64(0)).not();
                add(ViolationKind::Misaligned, ev.at, format!("{w}-byte stack access may be misaligned"), ev.pc.and(&mis));
            }
        }
        if ev.ty == MemType::Stack && !ev.writes {
            add(
                ViolationKind::UninitStackRead,
                ev.at,
                format!("{w}-byte stack read may precede its write"),
                ev.pc.and(&ev.init.not()),
            );
        }
    }
    out
}

/// Checks `p` for safety. Without a solver, only the static checks run and
/// any property needing a query makes the program UNSAFE (unverified).
pub fn check_safety(p: &Program, spec: &ProgramSpec, solver: Option<&mut Solver>) -> Result<SafetyReport, SolverError> {
    let mut r = SafetyReport::default();
    if let Err(e) = p.validate() {
        r.push(ViolationKind::OobJump, 0, e.to_string());
        return Ok(r);
    }
    let Some(p) = control_flow(p, &mut r) else { return Ok(r) };
    let ssa = match to_ssa(&p) {
        Ok(s) => s,
        Err(e) => {
            r.push(ViolationKind::Unverified, 0, e.to_string());
            return Ok(r);
        }
    };
    let info = infer_ptr_types(&p, &ssa, spec);
    check_registers(&p, &ssa, spec, &mut r);
    check_types(&p, &ssa, &info, spec, &mut r);
    if !r.is_safe() {
        return Ok(r);
    }
    let mut cx = VcContext::new(spec, VcOptions::default());
    let enc = match cx.encode(&p, "s") {
        Ok(e) => e,
        Err(e) => {
            r.push(ViolationKind::Unverified, 0, e.to_string());
            return Ok(r);
        }
    };
    check_concrete_accesses(&enc.accesses, spec, &mut r);
    if !r.is_safe() {
        return Ok(r);
    }
    let inds = indicators(&cx, &enc, spec);
    if inds.is_empty() {
        return Ok(r);
    }
    let Some(solver) = solver else {
        r.push(ViolationKind::Unverified, inds[0].at, format!("{} needs a solver query", inds[0].kind));
        return Ok(r);
    };
    let goal = Term::or_all(inds.iter().map(|i| i.term.clone()));
    let named = inds.iter().enumerate().map(|(k, i)| (format!("v{k}"), i.term.clone())).collect();
    let q = cx.finish(goal, Vec::new(), named, true);
    r.solver_calls += 1;
    match solver.check(&q)? {
        Verdict::Unsat => {}
        Verdict::Unknown(reason) => r.push(ViolationKind::Unverified, 0, format!("safety query undecided: {reason}")),
        Verdict::Sat(values) => {
            let fired = |k: usize| values.get(q.named[k].1).and_then(|v| v.as_ref()).is_some_and(|v| v.is_true());
            let pick = (0..inds.len())
                .filter(|k| fired(*k))
                .min_by_key(|k| (inds[*k].at, inds[*k].kind.rank()))
                .unwrap_or(0);
            let ind = &inds[pick];
            r.push(ind.kind, ind.at, ind.detail.clone());
            if let Some(t) = &q.template {
                let (input, _) = t.build(&values);
                let replayed = replays(&p, spec, &input, ind.kind);
                if !replayed {
                    debug!("safety counterexample for {} at {} did not replay", ind.kind, ind.at);
                }
                r.counterexamples.push(SafetyCounterexample { input, kind: ind.kind, replayed });
            }
        }
    }
    Ok(r)
}

/// Whether running `p` on `input` raises the fault expected for `kind`.
pub fn replays(p: &Program, spec: &ProgramSpec, input: &MachineState, kind: ViolationKind) -> bool {
    match (execute(p, spec, input, default_fuel(p)), kind.fault()) {
        (Err(f), Some(k)) => f.kind == k,
        _ => false,
    }
}
