use std::fmt;

use super::ssa::Ssa;
use super::types::{MemType, PtrInfo};
use crate::isa::{helpers, Opcode, Program, Reg, NUM_REGS, STACK_SIZE};
use crate::progspec::ProgramSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct RegSet(u16);

impl RegSet {
    pub const EMPTY: RegSet = RegSet(0);

    pub fn all() -> RegSet {
        RegSet((1 << NUM_REGS) - 1)
    }

    pub fn contains(self, r: Reg) -> bool {
        self.0 & (1 << r.index()) != 0
    }

    pub fn insert(&mut self, r: Reg) {
        self.0 |= 1 << r.index();
    }

    pub fn remove(&mut self, r: Reg) {
        self.0 &= !(1 << r.index());
    }

    pub fn union(self, o: RegSet) -> RegSet {
        RegSet(self.0 | o.0)
    }

    pub fn intersect(self, o: RegSet) -> RegSet {
        RegSet(self.0 & o.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Reg> {
        Reg::all().filter(move |r| self.contains(*r))
    }
}

impl FromIterator<Reg> for RegSet {
    fn from_iter<I: IntoIterator<Item = Reg>>(iter: I) -> Self {
        let mut s = RegSet::EMPTY;
        for r in iter {
            s.insert(r);
        }
        s
    }
}

impl fmt::Display for RegSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|r| r.to_string()).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

/// Fixed-size bit set over byte offsets.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ByteSet {
    bits: Vec<u64>,
    len: usize,
}

impl ByteSet {
    pub fn new(len: usize) -> ByteSet {
        ByteSet { bits: vec![0; len.div_ceil(64)], len }
    }

    pub fn full(len: usize) -> ByteSet {
        let mut s = ByteSet::new(len);
        s.fill();
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|w| *w == 0)
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.bits[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn set_range(&mut self, start: i64, n: usize, on: bool) {
        for i in start..start + n as i64 {
            if i >= 0 && (i as usize) < self.len {
                let (w, b) = (i as usize / 64, i as usize % 64);
                if on {
                    self.bits[w] |= 1 << b;
                } else {
                    self.bits[w] &= !(1 << b);
                }
            }
        }
    }

    pub fn any_in(&self, start: i64, n: usize) -> bool {
        (start..start + n as i64).any(|i| i >= 0 && self.contains(i as usize))
    }

    pub fn fill(&mut self) {
        for i in 0..self.len {
            self.bits[i / 64] |= 1 << (i % 64);
        }
    }

    pub fn union_with(&mut self, o: &ByteSet) {
        for (a, b) in self.bits.iter_mut().zip(&o.bits) {
            *a |= *b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|i| self.contains(*i))
    }
}

/// Live registers and memory bytes at a program point. Stack byte `i`
/// stands for offset `i - 512` from the frame pointer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiveSet {
    pub regs: RegSet,
    pub stack: ByteSet,
    pub packet: ByteSet,
}

impl LiveSet {
    fn empty(packet_size: usize) -> LiveSet {
        LiveSet { regs: RegSet::EMPTY, stack: ByteSet::new(STACK_SIZE as usize), packet: ByteSet::new(packet_size) }
    }

    fn union_with(&mut self, o: &LiveSet) {
        self.regs = self.regs.union(o.regs);
        self.stack.union_with(&o.stack);
        self.packet.union_with(&o.packet);
    }

    pub fn stack_live(&self, off: i64, n: usize) -> bool {
        self.stack.any_in(off + STACK_SIZE, n)
    }
}

/// Live sets before and after every instruction.
#[derive(Clone, Debug)]
pub struct Liveness {
    pub before: Vec<LiveSet>,
    pub after: Vec<LiveSet>,
}

/// Backward liveness over registers, concrete stack bytes and packet bytes.
/// Map values are always treated as live.
pub fn liveness(p: &Program, ssa: &Ssa, info: &PtrInfo, spec: &ProgramSpec) -> Liveness {
    let psize = spec.packet_size as usize;
    let n = p.len();
    let mut before = vec![LiveSet::empty(psize); n];
    let mut after = vec![LiveSet::empty(psize); n];
    let exit_live = {
        let mut l = LiveSet::empty(psize);
        l.regs.insert(Reg::R0);
        if spec.packet_is_output() {
            l.packet.fill();
        }
        l
    };

    let gen_mem = |live: &mut LiveSet, ty: MemType, off: Option<i64>, len: usize| match (ty, off) {
        (MemType::Stack, Some(o)) => live.stack.set_range(o + STACK_SIZE, len, true),
        (MemType::Stack, None) => live.stack.fill(),
        (MemType::Packet | MemType::Ctx, Some(o)) => live.packet.set_range(o, len, true),
        (MemType::Packet | MemType::Ctx, None) => live.packet.fill(),
        (MemType::MapValue(_), _) => {}
        _ => {
            live.stack.fill();
            live.packet.fill();
        }
    };

    for (b, blk) in ssa.cfg.blocks.iter().enumerate().rev() {
        let mut live = LiveSet::empty(psize);
        let mut has_succ = false;
        for (_, e) in ssa.cfg.succs(b) {
            has_succ = true;
            live.union_with(&before[ssa.cfg.blocks[e.to].start]);
        }
        if !has_succ {
            live = exit_live.clone();
        }
        for i in blk.range().rev() {
            after[i] = live.clone();
            let insn = &p.insns[i];
            let s = &ssa.insns[i];
            match insn.op {
                Opcode::Exit => live = exit_live.clone(),
                Opcode::Call => {
                    for r in 0..=5u8 {
                        live.regs.remove(Reg::new(r).unwrap());
                    }
                    let id = insn.imm as u32;
                    let arity = helpers::arity(id).unwrap_or(5);
                    for r in 1..=arity as u8 {
                        live.regs.insert(Reg::new(r).unwrap());
                    }
                    let map_size = |which: usize| -> Option<usize> {
                        match info.get(*s.args.first()?).ty {
                            MemType::MapHandle(mid) => {
                                let m = spec.map(mid)?;
                                Some(if which == 0 { m.key_size } else { m.value_size } as usize)
                            }
                            _ => None,
                        }
                    };
                    let mem_arg = |live: &mut LiveSet, arg: usize, len: Option<usize>| {
                        if let Some(v) = s.args.get(arg) {
                            let f = info.get(*v);
                            match len {
                                Some(len) => gen_mem(live, f.ty, f.off, len),
                                None => gen_mem(live, MemType::Unknown, None, 0),
                            }
                        }
                    };
                    match id {
                        helpers::MAP_LOOKUP_ELEM | helpers::MAP_DELETE_ELEM => mem_arg(&mut live, 1, map_size(0)),
                        helpers::MAP_UPDATE_ELEM => {
                            mem_arg(&mut live, 1, map_size(0));
                            mem_arg(&mut live, 2, map_size(1));
                        }
                        _ if helpers::arity(id).is_none() => gen_mem(&mut live, MemType::Unknown, None, 0),
                        _ => {}
                    }
                }
                _ => {
                    if insn.op.writes_dst() {
                        live.regs.remove(insn.dst);
                    }
                    if let Some(size) = insn.op.mem_size() {
                        let acc = info.access(p, ssa, i).expect("memory instruction");
                        if insn.op.is_store() && !matches!(insn.op, Opcode::Xadd32 | Opcode::Xadd64) {
                            match (acc.ty, acc.off) {
                                (MemType::Stack, Some(o)) => live.stack.set_range(o + STACK_SIZE, size.bytes(), false),
                                (MemType::Packet, Some(o)) => live.packet.set_range(o, size.bytes(), false),
                                _ => {}
                            }
                        } else {
                            gen_mem(&mut live, acc.ty, acc.off, size.bytes());
                        }
                    }
                    if insn.op.reads_dst() {
                        live.regs.insert(insn.dst);
                    }
                    if insn.op.reads_src() {
                        live.regs.insert(insn.src);
                    }
                }
            }
            if insn.op == Opcode::Exit {
                live.regs.insert(Reg::R0);
            }
            before[i] = live.clone();
        }
    }
    Liveness { before, after }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{infer_ptr_types, to_ssa};
    use crate::isa::parse_asm;

    fn live(src: &str, spec: &ProgramSpec) -> Liveness {
        let p = parse_asm(src).unwrap();
        let ssa = to_ssa(&p).unwrap();
        let info = infer_ptr_types(&p, &ssa, spec);
        liveness(&p, &ssa, &info, spec)
    }

    #[test]
    fn overwritten_register_is_dead() {
        let l = live("bpf_mov64 r0 1\nbpf_mov64 r0 2\nbpf_exit", &ProgramSpec::xdp(0));
        assert!(!l.after[0].regs.contains(Reg::R0));
        assert!(l.after[1].regs.contains(Reg::R0));
    }

    #[test]
    fn stack_bytes_live_until_read() {
        let src = "bpf_mov64 r3 0\nbpf_stx_64 r10 -8 r3\nbpf_stx_32 r10 -16 r3\nbpf_load_32 r0 r10 -8\nbpf_exit";
        let l = live(src, &ProgramSpec::xdp(0));
        assert!(l.after[1].stack_live(-8, 4));
        assert!(!l.after[1].stack_live(-4, 4));
        assert!(!l.after[2].stack_live(-16, 4));
    }

    #[test]
    fn packet_is_live_at_exit_for_xdp() {
        let l = live("bpf_st_imm8 r1 0 1\nbpf_mov64 r0 0\nbpf_exit", &ProgramSpec::xdp(4));
        assert!(l.after[0].packet.contains(0));
        let l = live("bpf_mov64 r0 0\nbpf_exit", &ProgramSpec::ctx(4));
        assert!(l.after[0].packet.is_empty());
    }
}
