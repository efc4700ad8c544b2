//! Concrete execution of programs over machine states and test suites.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::isa::{helpers, Instruction, Opcode, Program, Reg, Size, Src, NUM_REGS, STACK_SIZE};
use crate::layout;
use crate::progspec::{InputKind, ProgramSpec};
use crate::semantics::{alu32, alu64, branch};

pub type MapContents = BTreeMap<Vec<u8>, Vec<u8>>;

/// Predrawn return values for nondeterministic helpers, consumed in call order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HelperOracle {
    pub random: Vec<u32>,
    pub ktime: Vec<u64>,
    pub cpu: Vec<u32>,
    /// Return values of helpers without a precise model.
    pub unknown: Vec<u64>,
}

/// Program input: registers, memory and map contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    /// Values of scalar input registers; pointer inputs and r10 are set from
    /// the layout fields, other registers start uninitialized.
    pub regs: [u64; NUM_REGS],
    pub frame_pointer: u64,
    pub packet_base: u64,
    pub packet: Vec<u8>,
    pub maps: BTreeMap<u32, MapContents>,
    pub oracle: HelperOracle,
}

impl MachineState {
    pub fn new(spec: &ProgramSpec) -> MachineState {
        MachineState {
            regs: [0; NUM_REGS],
            frame_pointer: layout::DEFAULT_FP,
            packet_base: layout::DEFAULT_PKT,
            packet: vec![0; spec.packet_size as usize],
            maps: spec.maps.iter().map(|m| (m.map_id, MapContents::new())).collect(),
            oracle: HelperOracle::default(),
        }
    }
}

/// Observable result of a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputState {
    pub r0: u64,
    pub packet: Vec<u8>,
    pub maps: BTreeMap<u32, MapContents>,
}

impl OutputState {
    /// Equality restricted to the components the program type exposes.
    pub fn same_as(&self, other: &OutputState, spec: &ProgramSpec) -> bool {
        self.r0 == other.r0
            && self.maps == other.maps
            && (!spec.packet_is_output() || self.packet == other.packet)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultKind {
    OobAccess,
    ReadBeforeWrite,
    NullDeref,
    BadAlignment,
    BadJump,
    Diverged,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::OobAccess => "OOB_ACCESS",
            FaultKind::ReadBeforeWrite => "READ_BEFORE_WRITE",
            FaultKind::NullDeref => "NULL_DEREF",
            FaultKind::BadAlignment => "BAD_ALIGNMENT",
            FaultKind::BadJump => "BAD_JUMP",
            FaultKind::Diverged => "DIVERGED",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("{kind} at instruction {at}")]
pub struct RuntimeFault {
    pub kind: FaultKind,
    pub at: usize,
}

/// Memory region an address falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Stack,
    Packet,
    MapValue,
}

struct Exec<'a> {
    spec: &'a ProgramSpec,
    regs: [Option<u64>; NUM_REGS],
    stack: [u8; STACK_SIZE as usize],
    stack_init: [bool; STACK_SIZE as usize],
    fp: u64,
    pkt_base: u64,
    packet: Vec<u8>,
    /// map id -> key -> slot address
    maps: BTreeMap<u32, BTreeMap<Vec<u8>, u64>>,
    /// slot address -> value bytes
    heap: BTreeMap<u64, Vec<u8>>,
    next_slot: u64,
    oracle: &'a HelperOracle,
    calls: [usize; 4],
    at: usize,
    /// Address regions touched, for analyses that cross-check the interpreter.
    trace: Option<&'a mut Vec<Access>>,
}

/// A memory access observed during execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    pub at: usize,
    pub region: Region,
    /// Offset from the region base (frame pointer, packet start, slot start).
    pub offset: i64,
}

impl<'a> Exec<'a> {
    fn fault(&self, kind: FaultKind) -> RuntimeFault {
        RuntimeFault { kind, at: self.at }
    }

    fn reg(&self, r: Reg) -> Result<u64, RuntimeFault> {
        self.regs[r.index()].ok_or(self.fault(FaultKind::ReadBeforeWrite))
    }

    fn locate(&self, addr: u64, len: usize) -> Result<(Region, u64), RuntimeFault> {
        let len = len as u64;
        let within = |base: u64, size: u64| addr >= base && addr.wrapping_add(len) <= base + size && addr.checked_add(len).is_some();
        let stack_lo = self.fp.wrapping_sub(STACK_SIZE as u64);
        if within(stack_lo, STACK_SIZE as u64) {
            return Ok((Region::Stack, addr - stack_lo));
        }
        if within(self.pkt_base, self.packet.len() as u64) {
            return Ok((Region::Packet, addr - self.pkt_base));
        }
        let slot = addr - (addr % layout::SLOT);
        if let Some(v) = self.heap.get(&slot) {
            if within(slot, v.len() as u64) {
                return Ok((Region::MapValue, slot));
            }
        }
        if addr < layout::NULL_GUARD {
            Err(self.fault(FaultKind::NullDeref))
        } else {
            Err(self.fault(FaultKind::OobAccess))
        }
    }

    fn record(&mut self, region: Region, addr: u64) {
        let at = self.at;
        let offset = match region {
            Region::Stack => addr.wrapping_sub(self.fp) as i64,
            Region::Packet => (addr - self.pkt_base) as i64,
            Region::MapValue => (addr % layout::SLOT) as i64,
        };
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(Access { at, region, offset });
        }
    }

    fn read(&mut self, addr: u64, len: usize, aligned: bool) -> Result<Vec<u8>, RuntimeFault> {
        let (region, base) = self.locate(addr, len)?;
        self.record(region, addr);
        match region {
            Region::Stack => {
                if aligned && addr % len as u64 != 0 {
                    return Err(self.fault(FaultKind::BadAlignment));
                }
                let o = base as usize;
                if !self.stack_init[o..o + len].iter().all(|b| *b) {
                    return Err(self.fault(FaultKind::ReadBeforeWrite));
                }
                Ok(self.stack[o..o + len].to_vec())
            }
            Region::Packet => {
                let o = base as usize;
                Ok(self.packet[o..o + len].to_vec())
            }
            Region::MapValue => {
                let o = (addr - base) as usize;
                Ok(self.heap[&base][o..o + len].to_vec())
            }
        }
    }

    fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), RuntimeFault> {
        let len = bytes.len();
        let (region, base) = self.locate(addr, len)?;
        self.record(region, addr);
        match region {
            Region::Stack => {
                if addr % len as u64 != 0 {
                    return Err(self.fault(FaultKind::BadAlignment));
                }
                let o = base as usize;
                self.stack[o..o + len].copy_from_slice(bytes);
                self.stack_init[o..o + len].iter_mut().for_each(|b| *b = true);
            }
            Region::Packet => {
                if !self.spec.packet_writable() {
                    return Err(self.fault(FaultKind::OobAccess));
                }
                let o = base as usize;
                self.packet[o..o + len].copy_from_slice(bytes);
            }
            Region::MapValue => {
                let o = (addr - base) as usize;
                self.heap.get_mut(&base).unwrap()[o..o + len].copy_from_slice(bytes);
            }
        }
        Ok(())
    }

    fn alloc(&mut self, value: Vec<u8>) -> u64 {
        let slot = self.next_slot;
        self.next_slot += layout::SLOT;
        self.heap.insert(slot, value);
        slot
    }

    fn map_arg(&self) -> Result<(u32, usize, usize), RuntimeFault> {
        let id = layout::map_of_handle(self.reg(Reg::R1)?).ok_or(self.fault(FaultKind::OobAccess))?;
        let def = self.spec.map(id).ok_or(self.fault(FaultKind::OobAccess))?;
        Ok((id, def.key_size as usize, def.value_size as usize))
    }

    fn call(&mut self, id: u32) -> Result<u64, RuntimeFault> {
        let next = |v: &mut usize| {
            let i = *v;
            *v += 1;
            i
        };
        Ok(match id {
            helpers::MAP_LOOKUP_ELEM => {
                let (map, ks, _) = self.map_arg()?;
                let key = self.read(self.reg(Reg::R2)?, ks, false)?;
                self.maps[&map].get(&key).copied().unwrap_or(0)
            }
            helpers::MAP_UPDATE_ELEM => {
                let (map, ks, vs) = self.map_arg()?;
                let key = self.read(self.reg(Reg::R2)?, ks, false)?;
                let value = self.read(self.reg(Reg::R3)?, vs, false)?;
                self.reg(Reg::R4)?;
                let slot = self.alloc(value);
                self.maps.get_mut(&map).unwrap().insert(key, slot);
                0
            }
            helpers::MAP_DELETE_ELEM => {
                let (map, ks, _) = self.map_arg()?;
                let key = self.read(self.reg(Reg::R2)?, ks, false)?;
                match self.maps.get_mut(&map).unwrap().remove(&key) {
                    Some(_) => 0,
                    None => (-2i64) as u64,
                }
            }
            helpers::GET_PRANDOM_U32 => {
                let i = next(&mut self.calls[0]);
                self.oracle.random.get(i).copied().unwrap_or(0) as u64
            }
            helpers::KTIME_GET_NS => {
                let i = next(&mut self.calls[1]);
                self.oracle.ktime.get(i).copied().unwrap_or(0)
            }
            helpers::GET_SMP_PROCESSOR_ID => {
                let i = next(&mut self.calls[2]);
                self.oracle.cpu.get(i).copied().unwrap_or(0) as u64
            }
            _ => {
                let i = next(&mut self.calls[3]);
                self.oracle.unknown.get(i).copied().unwrap_or(0)
            }
        })
    }

    fn step(&mut self, insn: &Instruction) -> Result<Option<i64>, RuntimeFault> {
        let imm = insn.imm as u64;
        let operand = |s: &Exec, src: Src| -> Result<u64, RuntimeFault> {
            match src {
                Src::Imm => Ok(imm),
                Src::Reg => s.reg(insn.src),
            }
        };
        match insn.op {
            Opcode::Nop => {}
            Opcode::Alu64(op, src) | Opcode::Alu32(op, src) => {
                let b = if op == crate::isa::AluOp::Neg { 0 } else { operand(self, src)? };
                let a = if insn.op.reads_dst() { self.reg(insn.dst)? } else { 0 };
                let r = if matches!(insn.op, Opcode::Alu64(..)) { alu64(op, &a, &b) } else { alu32(op, &a, &b) };
                self.regs[insn.dst.index()] = Some(r);
            }
            Opcode::Jmp(cond, src) => {
                let taken = match cond {
                    crate::isa::JmpCond::Ja => true,
                    _ => branch(cond, &self.reg(insn.dst)?, &operand(self, src)?),
                };
                if taken {
                    return Ok(Some(insn.off as i64));
                }
            }
            Opcode::Ldx(size) => {
                let addr = self.reg(insn.src)?.wrapping_add(insn.off as i64 as u64);
                let bytes = self.read(addr, size.bytes(), true)?;
                self.regs[insn.dst.index()] = Some(le_value(&bytes));
            }
            Opcode::Stx(size) | Opcode::St(size) => {
                let addr = self.reg(insn.dst)?.wrapping_add(insn.off as i64 as u64);
                let v = if matches!(insn.op, Opcode::Stx(_)) { self.reg(insn.src)? } else { imm };
                self.write(addr, &v.to_le_bytes()[..size.bytes()])?;
            }
            Opcode::Xadd32 | Opcode::Xadd64 => {
                let size = insn.op.mem_size().unwrap();
                let addr = self.reg(insn.dst)?.wrapping_add(insn.off as i64 as u64);
                let v = self.reg(insn.src)?;
                let old = le_value(&self.read(addr, size.bytes(), true)?);
                let new = old.wrapping_add(v);
                self.write(addr, &new.to_le_bytes()[..size.bytes()])?;
            }
            Opcode::Lddw => self.regs[insn.dst.index()] = Some(imm),
            Opcode::LdMapFd => self.regs[insn.dst.index()] = Some(layout::map_handle(insn.imm as u32)),
            Opcode::Call => {
                let r0 = self.call(insn.imm as u32)?;
                self.regs[0] = Some(r0);
                for r in 1..=5 {
                    self.regs[r] = None;
                }
            }
            Opcode::Exit => return Ok(None),
        }
        Ok(Some(0))
    }
}

fn le_value(bytes: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    buf[..bytes.len()].copy_from_slice(bytes);
    u64::from_le_bytes(buf)
}

/// Runs `p` on `input`, failing on any unsafe step or after `fuel` steps.
pub fn execute(p: &Program, spec: &ProgramSpec, input: &MachineState, fuel: usize) -> Result<OutputState, RuntimeFault> {
    execute_traced(p, spec, input, fuel, None)
}

/// Like [`execute`], additionally recording every memory access.
pub fn execute_traced(
    p: &Program,
    spec: &ProgramSpec,
    input: &MachineState,
    fuel: usize,
    trace: Option<&mut Vec<Access>>,
) -> Result<OutputState, RuntimeFault> {
    let mut regs = [None; NUM_REGS];
    for (r, kind) in spec.inputs() {
        regs[r.index()] = Some(match kind {
            InputKind::Packet | InputKind::Ctx => input.packet_base,
            InputKind::Scalar => input.regs[r.index()],
        });
    }
    regs[Reg::FP.index()] = Some(input.frame_pointer);

    let mut heap = BTreeMap::new();
    let mut maps = BTreeMap::new();
    let mut next_slot = layout::MAP_VALUE_MIN;
    for def in &spec.maps {
        let mut entries = BTreeMap::new();
        if let Some(init) = input.maps.get(&def.map_id) {
            for (k, v) in init {
                let mut v = v.clone();
                v.resize(def.value_size as usize, 0);
                heap.insert(next_slot, v);
                entries.insert(k.clone(), next_slot);
                next_slot += layout::SLOT;
            }
        }
        maps.insert(def.map_id, entries);
    }

    let mut packet = input.packet.clone();
    packet.resize(spec.packet_size as usize, 0);
    let mut ex = Exec {
        spec,
        regs,
        stack: [0; STACK_SIZE as usize],
        stack_init: [false; STACK_SIZE as usize],
        fp: input.frame_pointer,
        pkt_base: input.packet_base,
        packet,
        maps,
        heap,
        next_slot,
        oracle: &input.oracle,
        calls: [0; 4],
        at: 0,
        trace,
    };

    let mut pc: i64 = 0;
    let mut steps = 0usize;
    loop {
        if pc < 0 || pc as usize >= p.insns.len() {
            return Err(RuntimeFault { kind: FaultKind::BadJump, at: ex.at });
        }
        if steps >= fuel {
            return Err(RuntimeFault { kind: FaultKind::Diverged, at: pc as usize });
        }
        steps += 1;
        ex.at = pc as usize;
        let insn = &p.insns[pc as usize];
        match ex.step(insn)? {
            None => break,
            Some(off) => pc += 1 + off,
        }
    }

    let r0 = ex.reg(Reg::R0)?;
    let maps = ex
        .maps
        .iter()
        .map(|(id, entries)| {
            let contents = entries.iter().map(|(k, slot)| (k.clone(), ex.heap[slot].clone())).collect();
            (*id, contents)
        })
        .collect();
    Ok(OutputState { r0, packet: ex.packet, maps })
}

/// Default fuel for loop-free programs: every instruction at most once.
pub fn default_fuel(p: &Program) -> usize {
    p.len().max(1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestCase {
    pub input: MachineState,
    pub expected: OutputState,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SuiteResult {
    Pass,
    FirstFailure { index: usize, observed: Result<OutputState, RuntimeFault> },
}

/// Runs every test in order and reports the first mismatch.
pub fn run_suite(p: &Program, spec: &ProgramSpec, suite: &[TestCase]) -> SuiteResult {
    let fuel = default_fuel(p);
    for (index, t) in suite.iter().enumerate() {
        let observed = execute(p, spec, &t.input, fuel);
        let ok = matches!(&observed, Ok(o) if o.same_as(&t.expected, spec));
        if !ok {
            return SuiteResult::FirstFailure { index, observed };
        }
    }
    SuiteResult::Pass
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TestGenError {
    #[error("source program faults on {faults} of {attempts} sampled inputs")]
    SourceFaults { faults: usize, attempts: usize },
}

/// Draws a random input for `spec`.
pub fn random_input(spec: &ProgramSpec, rng: &mut impl Rng) -> MachineState {
    let mut s = MachineState::new(spec);
    for r in 0..NUM_REGS {
        s.regs[r] = random_scalar(rng);
    }
    let fp_slots = (layout::FP_MAX - layout::FP_MIN) / layout::FP_ALIGN;
    s.frame_pointer = layout::FP_MIN + rng.gen_range(0..=fp_slots) * layout::FP_ALIGN;
    s.packet_base = layout::PKT_MIN + rng.gen_range(0..=0xffffu64) * 0x10;
    rng.fill(&mut s.packet[..]);
    let empty_maps = rng.gen_bool(0.25);
    for def in &spec.maps {
        let contents = s.maps.entry(def.map_id).or_default();
        if empty_maps {
            continue;
        }
        let n = rng.gen_range(0..=4usize);
        for _ in 0..n {
            let mut key = vec![0u8; def.key_size as usize];
            if rng.gen_bool(0.75) {
                // small integer keys, the common case for array-like maps
                let k: u64 = rng.gen_range(0..4);
                let len = key.len().min(8);
                key[..len].copy_from_slice(&k.to_le_bytes()[..len]);
            } else {
                rng.fill(&mut key[..]);
            }
            let mut value = vec![0u8; def.value_size as usize];
            rng.fill(&mut value[..]);
            contents.insert(key, value);
        }
    }
    s.oracle = HelperOracle {
        random: (0..8).map(|_| rng.gen()).collect(),
        ktime: (0..8).map(|_| rng.gen()).collect(),
        cpu: (0..8).map(|_| rng.gen_range(0..64)).collect(),
        unknown: (0..8).map(|_| random_scalar(rng)).collect(),
    };
    s
}

fn random_scalar(rng: &mut impl Rng) -> u64 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(0..16),
        1 => (rng.gen_range(-16i64..16)) as u64,
        2 => rng.gen::<u32>() as u64,
        _ => rng.gen(),
    }
}

/// Generates `n` tests whose expected outputs come from running `p_src`.
pub fn gen_tests(p_src: &Program, spec: &ProgramSpec, n: usize, seed: u64) -> Result<Vec<TestCase>, TestGenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fuel = default_fuel(p_src);
    let mut out = Vec::with_capacity(n);
    let (mut attempts, mut faults) = (0usize, 0usize);
    while out.len() < n {
        attempts += 1;
        let input = random_input(spec, &mut rng);
        match execute(p_src, spec, &input, fuel) {
            Ok(expected) => out.push(TestCase { input, expected }),
            Err(_) => {
                faults += 1;
                if attempts >= 16 && faults * 2 > attempts {
                    return Err(TestGenError::SourceFaults { faults, attempts });
                }
            }
        }
    }
    Ok(out)
}

/// Address of stack byte `off` (negative, relative to r10) for tests.
pub fn stack_addr(state: &MachineState, off: i64) -> u64 {
    state.frame_pointer.wrapping_add(off as u64)
}

/// Convenience: reads a little-endian value of `size` from output packet bytes.
pub fn packet_value(out: &OutputState, off: usize, size: Size) -> u64 {
    le_value(&out.packet[off..off + size.bytes()])
}
