use std::collections::HashMap;
use std::fmt;

use super::ssa::{Ssa, Var};
use crate::isa::{helpers, AluOp, Opcode, Program, Reg, Src, NUM_REGS};
use crate::progspec::{InputKind, ProgramSpec};
use crate::semantics::{alu32, alu64};

/// What a register value points to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemType {
    Stack,
    Packet,
    Ctx,
    MapValue(u32),
    MapHandle(u32),
    Scalar,
    /// Not yet written, or clobbered by a helper call.
    Uninit,
    Unknown,
}

impl MemType {
    pub fn is_pointer(self) -> bool {
        matches!(self, MemType::Stack | MemType::Packet | MemType::Ctx | MemType::MapValue(_) | MemType::MapHandle(_))
    }

    /// Pointers that may be dereferenced.
    pub fn is_memory(self) -> bool {
        matches!(self, MemType::Stack | MemType::Packet | MemType::Ctx | MemType::MapValue(_))
    }
}

impl fmt::Display for MemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemType::Stack => write!(f, "STACK"),
            MemType::Packet => write!(f, "PACKET"),
            MemType::Ctx => write!(f, "CTX"),
            MemType::MapValue(id) => write!(f, "MAP_VALUE({id})"),
            MemType::MapHandle(id) => write!(f, "MAP_HANDLE({id})"),
            MemType::Scalar => write!(f, "SCALAR"),
            MemType::Uninit => write!(f, "UNINIT"),
            MemType::Unknown => write!(f, "UNKNOWN"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PtrFact {
    pub ty: MemType,
    /// Byte offset from the region base (frame pointer, packet start, or the
    /// value pointer returned by `origin`).
    pub off: Option<i64>,
    /// For map values: the lookup result this pointer derives from.
    pub origin: Option<Var>,
    /// Known constant value of a scalar.
    pub value: Option<u64>,
    /// Per incoming edge offsets when a merge loses the concrete offset.
    pub entries: Vec<(usize, Option<i64>)>,
}

impl PtrFact {
    fn of(ty: MemType) -> PtrFact {
        PtrFact { ty, off: None, origin: None, value: None, entries: Vec::new() }
    }

    fn ptr(ty: MemType, off: Option<i64>, origin: Option<Var>) -> PtrFact {
        PtrFact { ty, off, origin, value: None, entries: Vec::new() }
    }

    fn scalar(value: Option<u64>) -> PtrFact {
        PtrFact { value, ..PtrFact::of(MemType::Scalar) }
    }

    fn unknown() -> PtrFact {
        PtrFact::of(MemType::Unknown)
    }
}

/// Inferred pointer type and offset per SSA variable.
#[derive(Clone, Debug, Default)]
pub struct PtrInfo {
    facts: HashMap<Var, PtrFact>,
}

/// A memory access resolved to a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemAccess {
    pub ty: MemType,
    pub off: Option<i64>,
    pub origin: Option<Var>,
}

impl PtrInfo {
    pub fn get(&self, v: Var) -> PtrFact {
        self.facts.get(&v).cloned().unwrap_or_else(PtrFact::unknown)
    }

    pub fn ty(&self, v: Var) -> MemType {
        self.facts.get(&v).map(|f| f.ty).unwrap_or(MemType::Unknown)
    }

    /// Region and offset accessed by memory instruction `at`.
    pub fn access(&self, p: &Program, ssa: &Ssa, at: usize) -> Option<MemAccess> {
        let insn = &p.insns[at];
        let base = if insn.op.is_load() { ssa.insns[at].src_in? } else if insn.op.is_store() { ssa.insns[at].dst_in? } else { return None };
        let f = self.get(base);
        Some(MemAccess { ty: f.ty, off: f.off.map(|o| o + insn.off as i64), origin: f.origin })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &PtrFact)> {
        self.facts.iter()
    }
}

fn merge(facts: &[(usize, PtrFact)]) -> PtrFact {
    let live: Vec<&(usize, PtrFact)> = facts.iter().filter(|(_, f)| f.ty != MemType::Uninit).collect();
    let Some((_, first)) = live.first() else {
        return PtrFact::of(MemType::Uninit);
    };
    if live.iter().any(|(_, f)| f.ty != first.ty) {
        return PtrFact::unknown();
    }
    if first.ty == MemType::Scalar {
        let v = first.value;
        return PtrFact::scalar(if live.iter().all(|(_, f)| f.value == v) { v } else { None });
    }
    let origin = if live.iter().all(|(_, f)| f.origin == first.origin) { first.origin } else { None };
    let same_off = live.iter().all(|(_, f)| f.off == first.off);
    let off = if same_off && (origin.is_some() || !matches!(first.ty, MemType::MapValue(_))) { first.off } else { None };
    let entries = if off.is_none() { live.iter().map(|(e, f)| (*e, f.off)).collect() } else { Vec::new() };
    PtrFact { ty: first.ty, off, origin, value: None, entries }
}

fn alu_fact(op: AluOp, is64: bool, a: &PtrFact, b: &PtrFact) -> PtrFact {
    use MemType::*;
    let is_scalar = |t: MemType| matches!(t, Scalar);
    if op == AluOp::Mov {
        if is64 {
            return b.clone();
        }
        return match b.ty {
            Scalar => PtrFact::scalar(b.value.map(|v| v as u32 as u64)),
            Uninit => PtrFact::of(Uninit),
            _ => PtrFact::unknown(),
        };
    }
    if a.ty == Uninit || (op != AluOp::Neg && b.ty == Uninit) {
        return PtrFact::unknown();
    }
    let both_scalar = is_scalar(a.ty) && (op == AluOp::Neg || is_scalar(b.ty));
    if both_scalar {
        let value = match (a.value, b.value) {
            (Some(x), Some(y)) => Some(if is64 { alu64(op, &x, &y) } else { alu32(op, &x, &y) }),
            (Some(x), None) if op == AluOp::Neg => Some(if is64 { alu64(op, &x, &0) } else { alu32(op, &x, &0) }),
            _ => None,
        };
        return PtrFact::scalar(value);
    }
    if !is64 {
        return PtrFact::unknown();
    }
    match op {
        AluOp::Add if a.ty.is_memory() && b.ty == Scalar => {
            PtrFact::ptr(a.ty, a.off.zip(b.value).map(|(o, v)| o.wrapping_add(v as i64)), a.origin)
        }
        AluOp::Add if a.ty == Scalar && b.ty.is_memory() => {
            PtrFact::ptr(b.ty, b.off.zip(a.value).map(|(o, v)| o.wrapping_add(v as i64)), b.origin)
        }
        AluOp::Sub if a.ty.is_memory() && b.ty == Scalar => {
            PtrFact::ptr(a.ty, a.off.zip(b.value).map(|(o, v)| o.wrapping_sub(v as i64)), a.origin)
        }
        AluOp::Sub if a.ty.is_memory() && a.ty == b.ty && !matches!(a.ty, MapValue(_)) => PtrFact::scalar(
            a.off.zip(b.off).map(|(x, y)| x.wrapping_sub(y) as u64),
        ),
        _ => PtrFact::unknown(),
    }
}

/// Infers the memory region and concrete offset of every SSA variable.
pub fn infer_ptr_types(p: &Program, ssa: &Ssa, spec: &ProgramSpec) -> PtrInfo {
    let mut facts: HashMap<Var, PtrFact> = HashMap::new();
    for r in 0..NUM_REGS {
        let reg = Reg::new(r as u8).unwrap();
        let fact = if reg == Reg::FP {
            PtrFact::ptr(MemType::Stack, Some(0), None)
        } else {
            match spec.input_kind(reg) {
                Some(InputKind::Packet) => PtrFact::ptr(MemType::Packet, Some(0), None),
                Some(InputKind::Ctx) => PtrFact::ptr(MemType::Ctx, Some(0), None),
                Some(InputKind::Scalar) => PtrFact::scalar(None),
                None => PtrFact::of(MemType::Uninit),
            }
        };
        facts.insert(Var { reg, ver: 0 }, fact);
    }
    let get = |facts: &HashMap<Var, PtrFact>, v: Var| facts.get(&v).cloned().unwrap_or_else(PtrFact::unknown);

    for (b, blk) in ssa.cfg.blocks.iter().enumerate() {
        for phi in &ssa.phis[b] {
            let srcs: Vec<(usize, PtrFact)> = phi
                .sources
                .iter()
                .filter(|(e, _)| ssa.reachable[ssa.cfg.edges[*e].from])
                .map(|(e, v)| (*e, get(&facts, *v)))
                .collect();
            facts.insert(phi.var, merge(&srcs));
        }
        for i in blk.range() {
            let insn = &p.insns[i];
            let s = &ssa.insns[i];
            for c in &s.clobbers {
                facts.insert(*c, PtrFact::of(MemType::Uninit));
            }
            let Some(def) = s.def else { continue };
            let fact = match insn.op {
                Opcode::Alu64(op, src) | Opcode::Alu32(op, src) => {
                    let a = s.dst_in.map(|v| get(&facts, v)).unwrap_or_else(|| PtrFact::scalar(None));
                    let b = match src {
                        Src::Imm => PtrFact::scalar(Some(insn.imm as u64)),
                        Src::Reg => s.src_in.map(|v| get(&facts, v)).unwrap_or_else(|| PtrFact::scalar(None)),
                    };
                    alu_fact(op, matches!(insn.op, Opcode::Alu64(..)), &a, &b)
                }
                Opcode::Ldx(_) => PtrFact::scalar(None),
                Opcode::Lddw => PtrFact::scalar(Some(insn.imm as u64)),
                Opcode::LdMapFd => PtrFact::ptr(MemType::MapHandle(insn.imm as u32), None, None),
                Opcode::Call => match insn.imm as u32 {
                    helpers::MAP_LOOKUP_ELEM => match s.args.first().map(|v| get(&facts, *v).ty) {
                        Some(MemType::MapHandle(id)) => PtrFact::ptr(MemType::MapValue(id), Some(0), Some(def)),
                        _ => PtrFact::unknown(),
                    },
                    _ => PtrFact::scalar(None),
                },
                _ => PtrFact::unknown(),
            };
            facts.insert(def, fact);
        }
    }
    PtrInfo { facts }
}

/// Largest value set tracked per register before giving up.
pub const MAX_VALUE_SET: usize = 8;

/// Per variable: the finite set of constants it may hold, each tagged with
/// the incoming edge that produces it (`None` when it is a single constant).
pub type ConcreteValues = HashMap<Var, Vec<(Option<usize>, u64)>>;

pub fn infer_concrete_values(ssa: &Ssa, info: &PtrInfo) -> ConcreteValues {
    let mut out: ConcreteValues = HashMap::new();
    for (v, f) in info.iter() {
        if let (MemType::Scalar, Some(c)) = (f.ty, f.value) {
            out.insert(*v, vec![(None, c)]);
        }
    }
    for phis in &ssa.phis {
        for phi in phis {
            if out.contains_key(&phi.var) {
                continue;
            }
            let mut set: Vec<(Option<usize>, u64)> = Vec::new();
            let mut ok = true;
            for (e, src) in &phi.sources {
                if !ssa.reachable[ssa.cfg.edges[*e].from] {
                    continue;
                }
                match out.get(src) {
                    Some(vals) => {
                        for (_, c) in vals {
                            if !set.iter().any(|(_, x)| x == c) {
                                set.push((Some(*e), *c));
                            }
                        }
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && !set.is_empty() && set.len() <= MAX_VALUE_SET {
                out.insert(phi.var, set);
            }
        }
    }
    out
}

/// A prior write whose offset may reach a read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WriteEntry {
    pub block: usize,
    pub offset: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Resolution {
    /// Offset known without any path reasoning.
    pub concrete: Option<i64>,
    /// Clauses `pc(block) => read_offset == offset`.
    pub clauses: Vec<(usize, i64)>,
}

/// Resolves the offset observed at a read in `reader` given prior writes,
/// ordered latest first.
pub fn resolve_at_read(reader: usize, entries: &[WriteEntry], dom: &[Vec<bool>], reach: &[Vec<bool>]) -> Resolution {
    let mut res = Resolution::default();
    for e in entries {
        if dom[reader][e.block] {
            if res.clauses.is_empty() {
                res.concrete = Some(e.offset);
            } else {
                res.clauses.push((e.block, e.offset));
            }
            break;
        }
        if !reach[e.block][reader] {
            continue;
        }
        res.clauses.push((e.block, e.offset));
    }
    res
}
