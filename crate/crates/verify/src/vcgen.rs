//! Verification conditions for programs over shared symbolic inputs.
//!
//! Register values are encoded functionally over SSA versions. Memory is
//! byte-granular: every store appends rows to a write table and every load
//! resolves each byte as an `ite` chain over earlier rows, falling back to
//! the shared initial memory. Maps add a second level: a map-level write
//! table from key valuations to value pointers.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use bpfsynth_core::analysis::{
    infer_ptr_types, to_ssa, AnalysisError, MemAccess, MemType, PtrInfo, Ssa, Var, VarDef, WindowSpec,
};
use bpfsynth_core::interpreter::{HelperOracle, MachineState};
use bpfsynth_core::isa::{helpers, AluOp, Instruction, Opcode, Program, Reg, Src, NUM_REGS, STACK_SIZE};
use bpfsynth_core::layout;
use bpfsynth_core::semantics::{alu32, alu64, branch};
use bpfsynth_core::{InputKind, ProgramSpec};
use thiserror::Error;

use crate::model::BvValue;
use crate::term::{Script, Sort, Term};

/// Formula-size optimizations; all on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VcOptions {
    /// Separate read/write tables per memory type.
    pub type_tables: bool,
    /// Use statically known map ids instead of guarded per-map cases.
    pub map_concretize: bool,
    /// Compare statically known offsets instead of address terms.
    pub offset_concretize: bool,
}

impl Default for VcOptions {
    fn default() -> Self {
        VcOptions { type_tables: true, map_concretize: true, offset_concretize: true }
    }
}

impl VcOptions {
    pub const NONE: VcOptions = VcOptions { type_tables: false, map_concretize: false, offset_concretize: false };
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VcError {
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("cannot encode instruction {at}: {reason}")]
    Refused { at: usize, reason: String },
}

fn refused(at: usize, reason: impl Into<String>) -> VcError {
    VcError::Refused { at, reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Table {
    All,
    Stack,
    Packet,
    Map(u32),
}

#[derive(Clone, Debug)]
enum Base {
    Stack,
    Packet,
    MapPtr(Term),
}

/// A byte address: the full address term and, when known, a base plus
/// concrete offset.
#[derive(Clone, Debug)]
struct Loc {
    addr: Term,
    key: Option<(Base, i64)>,
}

#[derive(Clone, Debug)]
struct Row {
    loc: Loc,
    byte: Term,
    pc: Term,
}

#[derive(Clone, Debug)]
struct MapWrite {
    key: Term,
    ptr: Term,
    pc: Term,
}

/// One memory access as seen by the safety checker.
#[derive(Clone, Debug)]
pub struct AccessEvent {
    pub at: usize,
    pub ty: MemType,
    /// Offset from the region base when statically known.
    pub off: Option<i64>,
    pub width: usize,
    /// Address of the first byte.
    pub addr: Term,
    /// For map values: the value pointer the access is relative to.
    pub ptr_base: Option<Term>,
    pub pc: Term,
    pub writes: bool,
    /// All bytes read were written earlier on the executed path. Always
    /// true for non-stack regions.
    pub init: Term,
    /// Subject to the stack alignment rule.
    pub aligned: bool,
}

/// A register read together with whether the version is defined.
#[derive(Clone, Debug)]
pub struct RegRead {
    pub at: usize,
    pub var: Var,
    pub defined: Term,
    pub pc: Term,
}

/// Result of encoding one program (or window).
#[derive(Clone, Debug)]
pub struct Encoding {
    pub r0: Term,
    /// Register values after the encoded range (windows only).
    pub regs_out: Vec<Term>,
    pub pcs: Vec<Term>,
    pub accesses: Vec<AccessEvent>,
    pub reg_reads: Vec<RegRead>,
    /// Value pointer terms produced by lookups, by defining variable.
    pub lookups: HashMap<Var, Term>,
    writes: HashMap<Table, Vec<Row>>,
    map_writes: HashMap<u32, Vec<MapWrite>>,
}

/// Shared symbols and side constraints for one query.
pub struct VcContext {
    spec: ProgramSpec,
    opts: VcOptions,
    pub fp: Term,
    pub pkt: Term,
    in_regs: Vec<Term>,
    pkt_bytes: Vec<Term>,
    init_rows: HashMap<Table, Vec<(Loc, Term)>>,
    map_reads: Vec<(u32, Term, Term)>,
    fresh_ptrs: Vec<Term>,
    map_fds: BTreeMap<u32, Term>,
    probes: BTreeMap<u32, Term>,
    helpers_used: BTreeSet<usize>,
    map_init_bytes: Vec<(Term, Term)>,
    constraints: Vec<Term>,
    next: usize,
}

const HELPER_UF: [(&str, u32); 4] = [("h_rand", 32), ("h_ktime", 64), ("h_cpu", 32), ("h_other", 64)];

fn helper_kind(id: u32) -> usize {
    match id {
        helpers::GET_PRANDOM_U32 => 0,
        helpers::KTIME_GET_NS => 1,
        helpers::GET_SMP_PROCESSOR_ID => 2,
        _ => 3,
    }
}

/// Oracle entries recovered from a model per helper kind.
const ORACLE_LEN: u64 = 8;

fn in_range(t: &Term, lo: u64, hi: u64) -> Term {
    Term::bv64(lo).bvule(t).and(&t.bvule(&Term::bv64(hi)))
}

fn concat_bytes(bytes: &[Term]) -> Term {
    let mut v = bytes[0].clone();
    for b in &bytes[1..] {
        v = b.concat(&v);
    }
    v
}

impl VcContext {
    pub fn new(spec: &ProgramSpec, opts: VcOptions) -> VcContext {
        let fp = Term::var("fp", Sort::Bv(64));
        let pkt = Term::var("pkt", Sort::Bv(64));
        let in_regs = (0..NUM_REGS).map(|r| Term::var(&format!("in_r{r}"), Sort::Bv(64))).collect();
        let pkt_bytes = (0..spec.packet_size).map(|i| Term::var(&format!("pkt_b{i}"), Sort::Bv(8))).collect();
        let constraints = vec![
            in_range(&fp, layout::FP_MIN, layout::FP_MAX),
            fp.bvand(&Term::bv64(layout::FP_ALIGN - 1)).equals(&Term::bv64(0)),
            in_range(&pkt, layout::PKT_MIN, layout::PKT_MAX),
        ];
        VcContext {
            spec: spec.clone(),
            opts,
            fp,
            pkt,
            in_regs,
            pkt_bytes,
            init_rows: HashMap::new(),
            map_reads: Vec::new(),
            fresh_ptrs: Vec::new(),
            map_fds: BTreeMap::new(),
            probes: BTreeMap::new(),
            helpers_used: BTreeSet::new(),
            map_init_bytes: Vec::new(),
            constraints,
            next: 0,
        }
    }

    pub fn spec(&self) -> &ProgramSpec {
        &self.spec
    }

    pub fn options(&self) -> VcOptions {
        self.opts
    }

    pub fn fresh(&mut self, prefix: &str, sort: Sort) -> Term {
        self.next += 1;
        Term::var(&format!("{prefix}_{}", self.next), sort)
    }

    pub fn constrain(&mut self, t: Term) {
        self.constraints.push(t);
    }

    fn table(&self, ty: MemType) -> Table {
        if !self.opts.type_tables {
            return Table::All;
        }
        match ty {
            MemType::Stack => Table::Stack,
            MemType::MapValue(id) => Table::Map(id),
            _ => Table::Packet,
        }
    }

    fn value_size(&self, id: u32) -> i64 {
        self.spec.map(id).map(|m| m.value_size as i64).unwrap_or(0)
    }

    fn key_size(&self, id: u32) -> u32 {
        self.spec.map(id).map(|m| m.key_size).unwrap_or(0)
    }

    fn addr_match(&self, a: &Loc, b: &Loc) -> Term {
        if self.opts.offset_concretize {
            if let (Some((ba, oa)), Some((bb, ob))) = (&a.key, &b.key) {
                return match (ba, bb) {
                    (Base::Stack, Base::Stack) | (Base::Packet, Base::Packet) => Term::bool(oa == ob),
                    (Base::MapPtr(x), Base::MapPtr(y)) => {
                        if oa != ob {
                            Term::bool(false)
                        } else {
                            x.equals(y)
                        }
                    }
                    _ => Term::bool(false),
                };
            }
        }
        a.addr.equals(&b.addr)
    }

    fn map_ptr_ok(p: &Term) -> Term {
        let aligned = p.bvand(&Term::bv64(layout::SLOT - 1)).equals(&Term::bv64(0));
        in_range(p, layout::MAP_VALUE_MIN, layout::MAP_VALUE_MAX).and(&aligned)
    }

    /// Initial byte at `loc`, shared between all programs of the query.
    fn init_byte(&mut self, table: Table, loc: &Loc, ty: MemType) -> Term {
        if matches!(ty, MemType::Packet | MemType::Ctx) {
            let size = self.pkt_bytes.len() as i64;
            if let Some((Base::Packet, o)) = &loc.key {
                if (0..size).contains(o) {
                    return self.pkt_bytes[*o as usize].clone();
                }
            }
            if loc.key.is_none() {
                let mut v = self.aliased_init(table, loc, ty);
                for i in (0..size).rev() {
                    let a = self.pkt.bvadd(&Term::bv64(i as u64));
                    v = loc.addr.equals(&a).ite(&self.pkt_bytes[i as usize], &v);
                }
                return v;
            }
        }
        self.aliased_init(table, loc, ty)
    }

    fn aliased_init(&mut self, table: Table, loc: &Loc, ty: MemType) -> Term {
        let rows = self.init_rows.get(&table).cloned().unwrap_or_default();
        let mut clauses = Vec::new();
        for (l, byte) in &rows {
            let m = self.addr_match(loc, l);
            match m.as_bool() {
                Some(true) => return byte.clone(),
                Some(false) => {}
                None => clauses.push((m, byte.clone())),
            }
        }
        let x = self.fresh("m", Sort::Bv(8));
        for (m, byte) in clauses {
            self.constraints.push(m.implies(&x.equals(&byte)));
        }
        self.init_rows.entry(table).or_default().push((loc.clone(), x.clone()));
        if matches!(ty, MemType::MapValue(_)) {
            self.map_init_bytes.push((loc.addr.clone(), x.clone()));
        }
        x
    }

    /// Value pointer for `key` in the initial map contents.
    fn init_lookup(&mut self, map: u32, key: &Term) -> Term {
        let mut conds = Vec::new();
        for (m, k, p) in &self.map_reads {
            if *m != map {
                continue;
            }
            let eq = key.equals(k);
            if eq.as_bool() == Some(true) {
                return p.clone();
            }
            conds.push((eq, p.clone()));
        }
        let ptr = self.fresh("mp", Sort::Bv(64));
        let zero = Term::bv64(0);
        self.constraints.push(ptr.equals(&zero).or(&VcContext::map_ptr_ok(&ptr)));
        for (eq, p) in conds {
            self.constraints.push(eq.implies(&ptr.equals(&p)));
            let same_slot = ptr.equals(&zero).not().and(&ptr.equals(&p));
            self.constraints.push(same_slot.implies(&eq));
        }
        for (m, _, p) in &self.map_reads {
            if *m != map {
                let c = ptr.equals(&zero).not().implies(&ptr.equals(p).not());
                self.constraints.push(c);
            }
        }
        for f in &self.fresh_ptrs {
            self.constraints.push(ptr.equals(f).not());
        }
        self.map_reads.push((map, key.clone(), ptr.clone()));
        ptr
    }

    fn fresh_value_ptr(&mut self) -> Term {
        let ptr = self.fresh("up", Sort::Bv(64));
        self.constraints.push(VcContext::map_ptr_ok(&ptr));
        for (_, _, p) in &self.map_reads {
            self.constraints.push(ptr.equals(p).not());
        }
        for f in &self.fresh_ptrs {
            self.constraints.push(ptr.equals(f).not());
        }
        self.fresh_ptrs.push(ptr.clone());
        ptr
    }

    fn map_fd(&mut self, id: u32) -> Term {
        if self.opts.map_concretize {
            return Term::bv64(layout::map_handle(id));
        }
        if let Some(t) = self.map_fds.get(&id) {
            return t.clone();
        }
        let t = Term::var(&format!("mapfd{id}"), Sort::Bv(64));
        self.constraints.push(t.equals(&Term::bv64(layout::map_handle(id))));
        self.map_fds.insert(id, t.clone());
        t
    }

    /// Resolves one byte against a program's writes.
    fn resolve(&mut self, writes: &HashMap<Table, Vec<Row>>, table: Table, loc: &Loc, ty: MemType) -> (Term, Term) {
        let mut v = self.init_byte(table, loc, ty);
        let mut init = Term::bool(false);
        if let Some(rows) = writes.get(&table) {
            for row in rows {
                let g = row.pc.and(&self.addr_match(loc, &row.loc));
                if g.as_bool() == Some(false) {
                    continue;
                }
                v = g.ite(&row.byte, &v);
                init = init.or(&g);
            }
        }
        (v, init)
    }

    fn lookup_in(&mut self, map_writes: &HashMap<u32, Vec<MapWrite>>, map: u32, key: &Term) -> Term {
        let mut v = self.init_lookup(map, key);
        if let Some(ws) = map_writes.get(&map) {
            for w in ws {
                let g = w.pc.and(&key.equals(&w.key));
                v = g.ite(&w.ptr, &v);
            }
        }
        v
    }

    fn stack_loc(&self, off: i64) -> Loc {
        let key = self.opts.offset_concretize.then_some((Base::Stack, off));
        Loc { addr: self.fp.bvadd(&Term::bv64(off as u64)), key }
    }

    fn packet_loc(&self, off: i64) -> Loc {
        let key = self.opts.offset_concretize.then_some((Base::Packet, off));
        Loc { addr: self.pkt.bvadd(&Term::bv64(off as u64)), key }
    }

    fn map_loc(&self, ptr: &Term, off: i64) -> Loc {
        let key = self.opts.offset_concretize.then(|| (Base::MapPtr(ptr.clone()), off));
        Loc { addr: ptr.bvadd(&Term::bv64(off as u64)), key }
    }

    /// Final value of stack byte `off` after `enc`.
    pub fn final_stack_byte(&mut self, enc: &Encoding, off: i64) -> Term {
        let loc = self.stack_loc(off);
        let t = self.table(MemType::Stack);
        self.resolve(&enc.writes, t, &loc, MemType::Stack).0
    }

    /// Final value of packet byte `off` after `enc`.
    pub fn final_packet_byte(&mut self, enc: &Encoding, off: i64) -> Term {
        let loc = self.packet_loc(off);
        let t = self.table(MemType::Packet);
        self.resolve(&enc.writes, t, &loc, MemType::Packet).0
    }

    fn probe(&mut self, map: u32) -> Term {
        if let Some(t) = self.probes.get(&map) {
            return t.clone();
        }
        let t = Term::var(&format!("probe{map}"), Sort::Bv(8 * self.key_size(map)));
        self.probes.insert(map, t.clone());
        t
    }

    /// Final contents of `map` at the shared probe key: (present, value bytes).
    fn final_map_entry(&mut self, enc: &Encoding, map: u32) -> (Term, Term, Vec<Term>) {
        let key = self.probe(map);
        let ptr = self.lookup_in(&enc.map_writes, map, &key);
        let ty = MemType::MapValue(map);
        let table = self.table(ty);
        let bytes = (0..self.value_size(map))
            .map(|i| {
                let loc = self.map_loc(&ptr, i);
                self.resolve(&enc.writes, table, &loc, ty).0
            })
            .collect();
        (ptr.equals(&Term::bv64(0)).not(), ptr, bytes)
    }

    /// Encodes a whole program over the shared inputs.
    pub fn encode(&mut self, p: &Program, tag: &str) -> Result<Encoding, VcError> {
        let ssa = to_ssa(p)?;
        let info = infer_ptr_types(p, &ssa, &self.spec);
        let mut e = Enc::new(self, p, &ssa, &info, tag);
        for r in Reg::all() {
            let v = Var { reg: r, ver: 0 };
            let (val, def) = if r == Reg::FP {
                (e.cx.fp.clone(), true)
            } else {
                match e.cx.spec.input_kind(r) {
                    Some(InputKind::Packet | InputKind::Ctx) => (e.cx.pkt.clone(), true),
                    Some(InputKind::Scalar) => (e.cx.in_regs[r.index()].clone(), true),
                    None => (e.cx.in_regs[r.index()].clone(), false),
                }
            };
            e.vals.insert(v, val);
            e.defined.insert(v, Term::bool(def));
        }
        let mut exits = Vec::new();
        for (b, blk) in ssa.cfg.blocks.iter().enumerate() {
            if !ssa.reachable[b] {
                e.pcs.push(Term::bool(false));
                continue;
            }
            let pc = if b == 0 {
                Term::bool(true)
            } else {
                let guards: Vec<Term> = ssa.cfg.preds(b).map(|(ei, _)| e.edge_guard(ei)).collect();
                Term::or_all(guards)
            };
            e.pcs.push(pc.clone());
            for phi in &ssa.phis[b] {
                let mut val: Option<Term> = None;
                let mut def: Option<Term> = None;
                for (ei, src) in phi.sources.iter().rev() {
                    if !ssa.reachable[ssa.cfg.edges[*ei].from] {
                        continue;
                    }
                    let sv = e.val(*src);
                    let sd = e.def(*src);
                    let g = e.edge_guard(*ei);
                    val = Some(match val {
                        None => sv,
                        Some(rest) => g.ite(&sv, &rest),
                    });
                    def = Some(match def {
                        None => sd,
                        Some(rest) => g.ite(&sd, &rest),
                    });
                }
                let val = match val {
                    Some(v) => v,
                    None => e.cx.fresh(&format!("{tag}_dead"), Sort::Bv(64)),
                };
                e.vals.insert(phi.var, val);
                e.defined.insert(phi.var, def.unwrap_or_else(|| Term::bool(false)));
            }
            for i in blk.range() {
                e.insn(i, &pc)?;
            }
            if p.insns[blk.last()].op == Opcode::Exit {
                let r0 = e.val(ssa.insns[blk.last()].dst_in.expect("exit reads r0"));
                exits.push((pc.clone(), r0));
            }
        }
        let mut r0 = Term::bv64(0);
        for (pc, v) in exits.into_iter().rev() {
            r0 = pc.ite(&v, &r0);
        }
        Ok(e.finish(r0, Vec::new()))
    }

    /// Encodes instructions `start..end` of `p` (one basic block) starting
    /// from register values `entry`.
    pub fn encode_window(
        &mut self,
        p: &Program,
        start: usize,
        end: usize,
        entry: &[Term],
        tag: &str,
    ) -> Result<Encoding, VcError> {
        let ssa = to_ssa(p)?;
        let info = infer_ptr_types(p, &ssa, &self.spec);
        let mut env = ssa.env_before(p, start);
        let mut e = Enc::new(self, p, &ssa, &info, tag);
        for r in Reg::all() {
            e.vals.insert(env[r.index()], entry[r.index()].clone());
            e.defined.insert(env[r.index()], Term::bool(true));
        }
        let pc = Term::bool(true);
        for i in start..end {
            if !bpfsynth_core::analysis::window_eligible(p.insns[i].op) {
                return Err(refused(i, "instruction not allowed in a window"));
            }
            e.insn(i, &pc)?;
            if let Some(d) = ssa.insns[i].def {
                env[d.reg.index()] = d;
            }
        }
        let regs_out = env.iter().map(|v| e.val(*v)).collect();
        Ok(e.finish(Term::bv64(0), regs_out))
    }

    /// Output inequality of two encoded programs under `spec`.
    pub fn outputs_differ(&mut self, a: &Encoding, b: &Encoding) -> Term {
        let mut diffs = vec![a.r0.equals(&b.r0).not()];
        if self.spec.packet_is_output() {
            for i in 0..self.spec.packet_size as i64 {
                let x = self.final_packet_byte(a, i);
                let y = self.final_packet_byte(b, i);
                diffs.push(x.equals(&y).not());
            }
        }
        let maps: Vec<u32> = self.spec.maps.iter().map(|m| m.map_id).collect();
        for m in maps {
            let (pa, _, ba) = self.final_map_entry(a, m);
            let (pb, _, bb) = self.final_map_entry(b, m);
            let content = Term::or_all(ba.iter().zip(&bb).map(|(x, y)| x.equals(y).not()));
            diffs.push(pa.equals(&pb).not().or(&pa.and(&content)));
        }
        Term::or_all(diffs)
    }

    /// Finishes the query: asserts side constraints and `goal`, and
    /// prepares the model terms needed to rebuild a counterexample input.
    pub fn finish(self, goal: Term, outputs: Vec<Term>, named: Vec<(String, Term)>, with_cex: bool) -> Query {
        let mut s = Script::new();
        for c in &self.constraints {
            s.assert(c);
        }
        s.assert(&goal);
        let mut watch = Vec::new();
        let mut w = |s: &mut Script, t: &Term| {
            watch.push(s.name_of(t));
            watch.len() - 1
        };
        let outputs = outputs.iter().map(|t| w(&mut s, t)).collect();
        let named = named.iter().map(|(n, t)| (n.clone(), w(&mut s, t))).collect();
        let template = with_cex.then(|| {
            let inputs = self.spec.inputs();
            let regs = inputs
                .iter()
                .filter(|(_, k)| *k == InputKind::Scalar)
                .map(|(r, _)| (*r, w(&mut s, &self.in_regs[r.index()])))
                .collect();
            let fp = w(&mut s, &self.fp);
            let pkt = w(&mut s, &self.pkt);
            let packet = self.pkt_bytes.iter().map(|b| w(&mut s, b)).collect();
            let map_reads = self
                .map_reads
                .iter()
                .map(|(m, k, p)| (*m, w(&mut s, k), w(&mut s, p)))
                .collect();
            let map_bytes = self.map_init_bytes.iter().map(|(a, b)| (w(&mut s, a), w(&mut s, b))).collect();
            let helpers = self
                .helpers_used
                .iter()
                .map(|k| {
                    let (name, width) = HELPER_UF[*k];
                    let idx = (0..ORACLE_LEN)
                        .map(|i| w(&mut s, &Term::app(name, vec![Term::bv64(i)], Sort::Bv(width))))
                        .collect();
                    (*k, idx)
                })
                .collect();
            CexTemplate { spec: self.spec.clone(), regs, fp, pkt, packet, map_reads, map_bytes, helpers }
        });
        Query { text: s.text(), watch, outputs, named, template }
    }
}

/// An SMT query ready for the solver.
#[derive(Clone, Debug)]
pub struct Query {
    /// Script with every assertion, without `check-sat`.
    pub text: String,
    /// Expressions whose values are read back on SAT.
    pub watch: Vec<String>,
    /// Indices into `watch` of query-specific outputs.
    pub outputs: Vec<usize>,
    /// Named indicator terms (indices into `watch`).
    pub named: Vec<(String, usize)>,
    /// How to turn a model into a concrete input, when meaningful.
    pub template: Option<CexTemplate>,
}

/// Recipe for rebuilding a [`MachineState`] from model values.
#[derive(Clone, Debug)]
pub struct CexTemplate {
    spec: ProgramSpec,
    regs: Vec<(Reg, usize)>,
    fp: usize,
    pkt: usize,
    packet: Vec<usize>,
    map_reads: Vec<(u32, usize, usize)>,
    map_bytes: Vec<(usize, usize)>,
    helpers: Vec<(usize, Vec<usize>)>,
}

impl CexTemplate {
    /// Builds the input; the flag reports whether any value was missing
    /// from the model and defaulted to zero.
    pub fn build(&self, values: &[Option<BvValue>]) -> (MachineState, bool) {
        let mut missing = false;
        let mut get = |i: usize| match values.get(i).and_then(|v| v.as_ref()) {
            Some(v) => v.clone(),
            None => {
                missing = true;
                BvValue::from_u64(0, 64)
            }
        };
        let mut s = MachineState::new(&self.spec);
        for (r, i) in &self.regs {
            s.regs[r.index()] = get(*i).as_u64();
        }
        s.frame_pointer = get(self.fp).as_u64();
        s.packet_base = get(self.pkt).as_u64();
        for (k, i) in self.packet.iter().enumerate() {
            s.packet[k] = get(*i).as_u64() as u8;
        }
        let bytes: Vec<(u64, u8)> = self.map_bytes.iter().map(|(a, b)| (get(*a).as_u64(), get(*b).as_u64() as u8)).collect();
        for (m, k, p) in &self.map_reads {
            let ptr = get(*p).as_u64();
            if ptr == 0 {
                continue;
            }
            let Some(def) = self.spec.map(*m) else { continue };
            let mut key = get(*k).bytes;
            key.resize(def.key_size as usize, 0);
            let value = (0..def.value_size as u64)
                .map(|o| bytes.iter().rev().find(|(a, _)| *a == ptr + o).map(|(_, b)| *b).unwrap_or(0))
                .collect();
            s.maps.entry(*m).or_default().insert(key, value);
        }
        let mut oracle = HelperOracle::default();
        for (kind, idx) in &self.helpers {
            let vals: Vec<u64> = idx.iter().map(|i| get(*i).as_u64()).collect();
            match kind {
                0 => oracle.random = vals.iter().map(|v| *v as u32).collect(),
                1 => oracle.ktime = vals,
                2 => oracle.cpu = vals.iter().map(|v| *v as u32).collect(),
                _ => oracle.unknown = vals,
            }
        }
        s.oracle = oracle;
        (s, missing)
    }
}

struct Enc<'a> {
    cx: &'a mut VcContext,
    p: &'a Program,
    ssa: &'a Ssa,
    info: &'a PtrInfo,
    tag: String,
    vals: HashMap<Var, Term>,
    defined: HashMap<Var, Term>,
    pcs: Vec<Term>,
    writes: HashMap<Table, Vec<Row>>,
    map_writes: HashMap<u32, Vec<MapWrite>>,
    counters: [Term; 4],
    accesses: Vec<AccessEvent>,
    reg_reads: Vec<RegRead>,
    lookups: HashMap<Var, Term>,
}

impl<'a> Enc<'a> {
    fn new(cx: &'a mut VcContext, p: &'a Program, ssa: &'a Ssa, info: &'a PtrInfo, tag: &str) -> Enc<'a> {
        Enc {
            cx,
            p,
            ssa,
            info,
            tag: tag.to_string(),
            vals: HashMap::new(),
            defined: HashMap::new(),
            pcs: Vec::new(),
            writes: HashMap::new(),
            map_writes: HashMap::new(),
            counters: std::array::from_fn(|_| Term::bv64(0)),
            accesses: Vec::new(),
            reg_reads: Vec::new(),
            lookups: HashMap::new(),
        }
    }

    fn finish(self, r0: Term, regs_out: Vec<Term>) -> Encoding {
        Encoding {
            r0,
            regs_out,
            pcs: self.pcs,
            accesses: self.accesses,
            reg_reads: self.reg_reads,
            lookups: self.lookups,
            writes: self.writes,
            map_writes: self.map_writes,
        }
    }

    fn val(&mut self, v: Var) -> Term {
        if let Some(t) = self.vals.get(&v) {
            return t.clone();
        }
        let t = self.cx.fresh(&format!("{}_u", self.tag), Sort::Bv(64));
        self.vals.insert(v, t.clone());
        t
    }

    fn def(&self, v: Var) -> Term {
        self.defined.get(&v).cloned().unwrap_or_else(|| Term::bool(false))
    }

    fn edge_guard(&mut self, ei: usize) -> Term {
        let from = self.ssa.cfg.edges[ei].from;
        let pc = self.pcs[from].clone();
        match self.ssa.edge_conds[ei] {
            None => pc,
            Some(c) => {
                let lhs = self.val(c.lhs);
                let rhs = match c.rhs {
                    bpfsynth_core::analysis::Operand::Var(v) => self.val(v),
                    bpfsynth_core::analysis::Operand::Imm(i) => Term::bv64(i as u64),
                };
                let t = branch(c.cond, &lhs, &rhs);
                pc.and(&if c.negated { t.not() } else { t })
            }
        }
    }

    fn read_reg(&mut self, at: usize, v: Var, pc: &Term) -> Term {
        let defined = self.def(v);
        self.reg_reads.push(RegRead { at, var: v, defined, pc: pc.clone() });
        self.val(v)
    }

    fn set(&mut self, v: Var, t: Term) {
        self.vals.insert(v, t);
        self.defined.insert(v, Term::bool(true));
    }

    /// Byte locations of an access through a pointer with the given fact.
    fn locs(&mut self, at: usize, acc: &MemAccess, ptr: &Term, extra: i64, width: usize) -> Result<Vec<Loc>, VcError> {
        let opt = self.cx.opts.offset_concretize;
        let base_addr = ptr.bvadd(&Term::bv64(extra as u64));
        let mut out = Vec::with_capacity(width);
        for k in 0..width as i64 {
            let addr = base_addr.bvadd(&Term::bv64(k as u64));
            let key = match (acc.ty, acc.off) {
                (_, None) => None,
                _ if !opt => None,
                (MemType::Stack, Some(o)) => Some((Base::Stack, o + k)),
                (MemType::Packet | MemType::Ctx, Some(o)) => Some((Base::Packet, o + k)),
                (MemType::MapValue(id), Some(o)) => {
                    let vs = self.cx.value_size(id);
                    match acc.origin {
                        Some(origin) if (0..vs).contains(&(o + k)) => Some((Base::MapPtr(self.val(origin)), o + k)),
                        _ => None,
                    }
                }
                (ty, _) => return Err(refused(at, format!("memory access through {ty}"))),
            };
            out.push(Loc { addr, key });
        }
        Ok(out)
    }

    fn check_memory(&self, at: usize, ty: MemType) -> Result<(), VcError> {
        if ty.is_memory() {
            Ok(())
        } else {
            Err(refused(at, format!("memory access through {ty}")))
        }
    }

    fn origin_ptr(&mut self, acc: &MemAccess) -> Option<Term> {
        match acc.ty {
            MemType::MapValue(_) => acc.origin.map(|o| self.val(o)),
            _ => None,
        }
    }

    /// Loads `width` bytes; returns the zero-extended value and the
    /// all-bytes-initialized condition.
    fn load(&mut self, at: usize, acc: MemAccess, ptr: &Term, extra: i64, width: usize, pc: &Term, aligned: bool) -> Result<Term, VcError> {
        self.check_memory(at, acc.ty)?;
        let locs = self.locs(at, &acc, ptr, extra, width)?;
        let table = self.cx.table(acc.ty);
        let mut bytes = Vec::with_capacity(width);
        let mut init = Vec::new();
        for loc in &locs {
            let (v, i) = self.cx.resolve(&self.writes, table, loc, acc.ty);
            bytes.push(v);
            init.push(i);
        }
        let init = if acc.ty == MemType::Stack { Term::and_all(init) } else { Term::bool(true) };
        let ptr_base = self.origin_ptr(&acc);
        self.accesses.push(AccessEvent {
            at,
            ty: acc.ty,
            off: acc.off,
            width,
            addr: locs[0].addr.clone(),
            ptr_base,
            pc: pc.clone(),
            writes: false,
            init,
            aligned,
        });
        let v = concat_bytes(&bytes);
        Ok(v.zext(64 - v.width()))
    }

    fn store(&mut self, at: usize, acc: MemAccess, ptr: &Term, extra: i64, value: &Term, width: usize, pc: &Term) -> Result<(), VcError> {
        self.check_memory(at, acc.ty)?;
        match acc.ty {
            MemType::Ctx => return Err(refused(at, "store to read-only context")),
            MemType::Packet if !self.cx.spec.packet_writable() => return Err(refused(at, "store to read-only buffer")),
            _ => {}
        }
        let locs = self.locs(at, &acc, ptr, extra, width)?;
        let table = self.cx.table(acc.ty);
        for (k, loc) in locs.iter().enumerate() {
            let byte = value.extract(8 * k as u32 + 7, 8 * k as u32);
            self.writes.entry(table).or_default().push(Row { loc: loc.clone(), byte, pc: pc.clone() });
        }
        let ptr_base = self.origin_ptr(&acc);
        self.accesses.push(AccessEvent {
            at,
            ty: acc.ty,
            off: acc.off,
            width,
            addr: locs[0].addr.clone(),
            ptr_base,
            pc: pc.clone(),
            writes: true,
            init: Term::bool(true),
            aligned: true,
        });
        Ok(())
    }

    /// Reads `len` bytes through helper argument `arg` (a pointer register).
    fn read_arg(&mut self, at: usize, arg: Var, len: usize, pc: &Term) -> Result<Term, VcError> {
        let f = self.info.get(arg);
        let acc = MemAccess { ty: f.ty, off: f.off, origin: f.origin };
        let ptr = self.val(arg);
        let v = {
            self.check_memory(at, acc.ty)?;
            let locs = self.locs(at, &acc, &ptr, 0, len)?;
            let table = self.cx.table(acc.ty);
            let mut bytes = Vec::with_capacity(len);
            let mut init = Vec::new();
            for loc in &locs {
                let (v, i) = self.cx.resolve(&self.writes, table, loc, acc.ty);
                bytes.push(v);
                init.push(i);
            }
            let init = if acc.ty == MemType::Stack { Term::and_all(init) } else { Term::bool(true) };
            let ptr_base = self.origin_ptr(&acc);
            self.accesses.push(AccessEvent {
                at,
                ty: acc.ty,
                off: acc.off,
                width: len,
                addr: locs[0].addr.clone(),
                ptr_base,
                pc: pc.clone(),
                writes: false,
                init,
                aligned: false,
            });
            bytes
        };
        Ok(concat_bytes(&v))
    }

    fn map_call(&mut self, at: usize, id: u32, pc: &Term) -> Result<Term, VcError> {
        let s = &self.ssa.insns[at];
        let args = s.args.clone();
        for a in &args {
            self.read_reg(at, *a, pc);
        }
        let handle_var = args[0];
        let handle = self.val(handle_var);
        let candidates: Vec<(u32, Term)> = match self.info.ty(handle_var) {
            MemType::MapHandle(m) if self.cx.opts.map_concretize => vec![(m, Term::bool(true))],
            _ => self
                .cx
                .spec
                .maps
                .iter()
                .map(|m| (m.map_id, handle.equals(&Term::bv64(layout::map_handle(m.map_id)))))
                .collect(),
        };
        if candidates.is_empty() {
            return Err(refused(at, "map helper without maps"));
        }
        let mut result: Option<Term> = None;
        for (m, guard) in candidates.into_iter().rev() {
            let ks = self.cx.key_size(m) as usize;
            let vs = self.cx.value_size(m) as usize;
            let gpc = pc.and(&guard);
            let key = self.read_arg(at, args[1], ks, &gpc)?;
            let r = match id {
                helpers::MAP_LOOKUP_ELEM => {
                    let p = self.cx.lookup_in(&self.map_writes, m, &key);
                    if let Some(d) = s.def {
                        self.lookups.insert(d, p.clone());
                    }
                    p
                }
                helpers::MAP_UPDATE_ELEM => {
                    let value = self.read_arg(at, args[2], vs, &gpc)?;
                    let ptr = self.cx.fresh_value_ptr();
                    let ty = MemType::MapValue(m);
                    let table = self.cx.table(ty);
                    for k in 0..vs {
                        let loc = self.cx.map_loc(&ptr, k as i64);
                        let byte = value.extract(8 * k as u32 + 7, 8 * k as u32);
                        self.writes.entry(table).or_default().push(Row { loc, byte, pc: gpc.clone() });
                    }
                    self.map_writes.entry(m).or_default().push(MapWrite { key, ptr, pc: gpc });
                    Term::bv64(0)
                }
                _ => {
                    let p = self.cx.lookup_in(&self.map_writes, m, &key);
                    let present = p.equals(&Term::bv64(0)).not();
                    self.map_writes.entry(m).or_default().push(MapWrite { key, ptr: Term::bv64(0), pc: gpc });
                    present.ite(&Term::bv64(0), &Term::bv64(-2i64 as u64))
                }
            };
            result = Some(match result {
                None => r,
                Some(rest) => guard.ite(&r, &rest),
            });
        }
        Ok(result.unwrap())
    }

    fn insn(&mut self, i: usize, pc: &Term) -> Result<(), VcError> {
        let insn: Instruction = self.p.insns[i];
        let s = self.ssa.insns[i].clone();
        let imm = Term::bv64(insn.imm as u64);
        match insn.op {
            Opcode::Nop | Opcode::Jmp(..) => {
                if let Some(v) = s.dst_in {
                    self.read_reg(i, v, pc);
                }
                if let Some(v) = s.src_in {
                    self.read_reg(i, v, pc);
                }
            }
            Opcode::Alu64(op, src) | Opcode::Alu32(op, src) => {
                let a = match s.dst_in {
                    Some(v) => self.read_reg(i, v, pc),
                    None => Term::bv64(0),
                };
                let b = match (op, src) {
                    (AluOp::Neg, _) => Term::bv64(0),
                    (_, Src::Imm) => imm,
                    (_, Src::Reg) => self.read_reg(i, s.src_in.expect("register operand"), pc),
                };
                let r = if matches!(insn.op, Opcode::Alu64(..)) { alu64(op, &a, &b) } else { alu32(op, &a, &b) };
                self.set(s.def.expect("alu defines dst"), r);
            }
            Opcode::Ldx(size) => {
                let base = s.src_in.expect("load base");
                let ptr = self.read_reg(i, base, pc);
                let acc = self.info.access(self.p, self.ssa, i).expect("memory instruction");
                let v = self.load(i, acc, &ptr, insn.off as i64, size.bytes(), pc, true)?;
                self.set(s.def.expect("load defines dst"), v);
            }
            Opcode::Stx(size) | Opcode::St(size) => {
                let ptr = self.read_reg(i, s.dst_in.expect("store base"), pc);
                let v = match insn.op {
                    Opcode::Stx(_) => self.read_reg(i, s.src_in.expect("store value"), pc),
                    _ => imm,
                };
                let acc = self.info.access(self.p, self.ssa, i).expect("memory instruction");
                let v = if size.bits() < 64 { v.extract(size.bits() - 1, 0) } else { v };
                self.store(i, acc, &ptr, insn.off as i64, &v, size.bytes(), pc)?;
            }
            Opcode::Xadd32 | Opcode::Xadd64 => {
                let size = insn.op.mem_size().unwrap();
                let ptr = self.read_reg(i, s.dst_in.expect("xadd base"), pc);
                let v = self.read_reg(i, s.src_in.expect("xadd value"), pc);
                let acc = self.info.access(self.p, self.ssa, i).expect("memory instruction");
                let old = self.load(i, acc, &ptr, insn.off as i64, size.bytes(), pc, true)?;
                let new = old.bvadd(&v);
                let new = if size.bits() < 64 { new.extract(size.bits() - 1, 0) } else { new };
                self.store(i, acc, &ptr, insn.off as i64, &new, size.bytes(), pc)?;
            }
            Opcode::Lddw => self.set(s.def.unwrap(), imm),
            Opcode::LdMapFd => {
                let t = self.cx.map_fd(insn.imm as u32);
                self.set(s.def.unwrap(), t);
            }
            Opcode::Call => {
                let id = insn.imm as u32;
                let r0 = match id {
                    helpers::MAP_LOOKUP_ELEM | helpers::MAP_UPDATE_ELEM | helpers::MAP_DELETE_ELEM => self.map_call(i, id, pc)?,
                    _ => {
                        let kind = helper_kind(id);
                        self.cx.helpers_used.insert(kind);
                        let (name, width) = HELPER_UF[kind];
                        let n = self.counters[kind].clone();
                        self.counters[kind] = pc.ite(&n.bvadd(&Term::bv64(1)), &n);
                        let r = Term::app(name, vec![n], Sort::Bv(width));
                        r.zext(64 - width)
                    }
                };
                for c in &s.clobbers {
                    let t = self.cx.fresh(&format!("{}_clob", self.tag), Sort::Bv(64));
                    self.vals.insert(*c, t);
                    self.defined.insert(*c, Term::bool(false));
                }
                self.set(s.def.expect("call defines r0"), r0);
            }
            Opcode::Exit => {
                self.read_reg(i, s.dst_in.expect("exit reads r0"), pc);
            }
        }
        Ok(())
    }
}

/// Full-program equivalence: UNSAT iff `p1` and `p2` agree on every input.
pub fn equivalence_query(p1: &Program, p2: &Program, spec: &ProgramSpec, opts: VcOptions) -> Result<Query, VcError> {
    let mut cx = VcContext::new(spec, opts);
    let a = cx.encode(p1, "a")?;
    let b = cx.encode(p2, "b")?;
    let goal = cx.outputs_differ(&a, &b);
    Ok(cx.finish(goal, Vec::new(), Vec::new(), true))
}

/// `p` with the window range replaced by `w2`, padded with NOPs.
pub fn splice(p: &Program, ws: &WindowSpec, w2: &[Instruction]) -> Option<Program> {
    if w2.len() > ws.len() {
        return None;
    }
    let mut insns = p.insns.clone();
    for (k, slot) in insns[ws.start..ws.end].iter_mut().enumerate() {
        *slot = w2.get(k).copied().unwrap_or(Instruction::NOP);
    }
    Some(Program::new(insns))
}

/// Window equivalence of `p1[ws]` and `w2` under the window's liveness and
/// inferred preconditions. UNSAT implies the spliced program is equivalent
/// to `p1`; SAT is inconclusive for the whole program.
pub fn window_query(p1: &Program, w2: &[Instruction], ws: &WindowSpec, spec: &ProgramSpec, opts: VcOptions) -> Result<Query, VcError> {
    window_query_with(p1, w2, ws, spec, opts, true)
}

/// Like [`window_query`], optionally ignoring inferred constant values.
pub fn window_query_with(
    p1: &Program,
    w2: &[Instruction],
    ws: &WindowSpec,
    spec: &ProgramSpec,
    opts: VcOptions,
    use_constants: bool,
) -> Result<Query, VcError> {
    let p2 = splice(p1, ws, w2).ok_or_else(|| refused(ws.start, "replacement longer than window"))?;
    let mut cx = VcContext::new(spec, opts);
    let mut entry: Vec<Term> = (0..NUM_REGS).map(|r| Term::var(&format!("w_r{r}"), Sort::Bv(64))).collect();
    for (r, ty, off) in &ws.ptr_in {
        let t = match (ty, off) {
            (MemType::Stack, Some(o)) => cx.fp.bvadd(&Term::bv64(*o as u64)),
            (MemType::Packet | MemType::Ctx, Some(o)) => cx.pkt.bvadd(&Term::bv64(*o as u64)),
            _ => continue,
        };
        entry[r.index()] = t;
    }
    if use_constants {
        for (r, vals) in &ws.concrete_pre {
            let t = entry[r.index()].clone();
            cx.constrain(Term::or_all(vals.iter().map(|c| t.equals(&Term::bv64(*c)))));
        }
    }
    let a = cx.encode_window(p1, ws.start, ws.end, &entry, "a")?;
    let b = cx.encode_window(&p2, ws.start, ws.end, &entry, "b")?;
    let mut diffs = Vec::new();
    for r in ws.live_after.iter() {
        diffs.push(a.regs_out[r.index()].equals(&b.regs_out[r.index()]).not());
    }
    let mut stack_offs = BTreeSet::new();
    let mut packet_offs = BTreeSet::new();
    for ev in a.accesses.iter().chain(&b.accesses).filter(|e| e.writes) {
        let off = ev.off.ok_or_else(|| refused(ev.at, "window store at unknown offset"))?;
        let set = match ev.ty {
            MemType::Stack => &mut stack_offs,
            MemType::Packet => &mut packet_offs,
            _ => return Err(refused(ev.at, "window store outside stack and packet")),
        };
        set.extend(off..off + ev.width as i64);
    }
    for o in stack_offs {
        if o + STACK_SIZE >= 0 && ws.live_after_stack.contains((o + STACK_SIZE) as usize) {
            let x = cx.final_stack_byte(&a, o);
            let y = cx.final_stack_byte(&b, o);
            diffs.push(x.equals(&y).not());
        }
    }
    for o in packet_offs {
        if o >= 0 && ws.live_after_packet.contains(o as usize) {
            let x = cx.final_packet_byte(&a, o);
            let y = cx.final_packet_byte(&b, o);
            diffs.push(x.equals(&y).not());
        }
    }
    Ok(cx.finish(Term::or_all(diffs), Vec::new(), Vec::new(), false))
}

/// Binds the inputs to `input` and exposes the program's outputs: r0 first,
/// then every final packet byte.
pub fn concrete_query(p: &Program, spec: &ProgramSpec, input: &MachineState, opts: VcOptions) -> Result<Query, VcError> {
    let mut cx = VcContext::new(spec, opts);
    let enc = cx.encode(p, "a")?;
    let mut bind = vec![
        cx.fp.equals(&Term::bv64(input.frame_pointer)),
        cx.pkt.equals(&Term::bv64(input.packet_base)),
    ];
    for (r, k) in spec.inputs() {
        if k == InputKind::Scalar {
            bind.push(cx.in_regs[r.index()].equals(&Term::bv64(input.regs[r.index()])));
        }
    }
    for (i, b) in input.packet.iter().enumerate().take(cx.pkt_bytes.len()) {
        bind.push(cx.pkt_bytes[i].equals(&Term::bv(*b as u64, 8)));
    }
    let mut outputs = vec![enc.r0.clone()];
    for i in 0..spec.packet_size as i64 {
        outputs.push(cx.final_packet_byte(&enc, i));
    }
    Ok(cx.finish(Term::and_all(bind), outputs, Vec::new(), false))
}

/// Variables defined by instruction `at`'s helper call that are uninitialized afterwards.
pub fn is_clobber(ssa: &Ssa, v: Var) -> bool {
    matches!(ssa.def_of(v), VarDef::Clobber(_))
}
