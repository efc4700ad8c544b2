//! The BPF instruction subset handled by the optimizer.
//!
//! Instructions are kept in a flat list where a wide immediate load (`LDDW`)
//! is a single entry. Jump offsets inside a [`Program`] count list entries;
//! the binary encoding converts them to 8-byte slots.

use std::fmt;

use thiserror::Error;

/// Number of general purpose registers, including the frame pointer.
pub const NUM_REGS: usize = 11;

/// Size of the program stack in bytes.
pub const STACK_SIZE: i64 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R1: Reg = Reg(1);
    pub const R2: Reg = Reg(2);
    pub const R3: Reg = Reg(3);
    pub const R4: Reg = Reg(4);
    pub const R5: Reg = Reg(5);
    pub const R6: Reg = Reg(6);
    pub const R7: Reg = Reg(7);
    pub const R8: Reg = Reg(8);
    pub const R9: Reg = Reg(9);
    /// Read-only frame pointer.
    pub const FP: Reg = Reg(10);

    pub fn new(index: u8) -> Option<Reg> {
        ((index as usize) < NUM_REGS).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Or,
    And,
    Lsh,
    Rsh,
    Neg,
    Xor,
    Mov,
    Arsh,
}

impl AluOp {
    pub const ALL: [AluOp; 12] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::Div,
        AluOp::Or,
        AluOp::And,
        AluOp::Lsh,
        AluOp::Rsh,
        AluOp::Neg,
        AluOp::Xor,
        AluOp::Mov,
        AluOp::Arsh,
    ];

    fn code(self) -> u8 {
        match self {
            AluOp::Add => 0x00,
            AluOp::Sub => 0x10,
            AluOp::Mul => 0x20,
            AluOp::Div => 0x30,
            AluOp::Or => 0x40,
            AluOp::And => 0x50,
            AluOp::Lsh => 0x60,
            AluOp::Rsh => 0x70,
            AluOp::Neg => 0x80,
            AluOp::Xor => 0xa0,
            AluOp::Mov => 0xb0,
            AluOp::Arsh => 0xc0,
        }
    }

    fn from_code(code: u8) -> Option<AluOp> {
        AluOp::ALL.into_iter().find(|op| op.code() == code)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Or => "or",
            AluOp::And => "and",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Neg => "neg",
            AluOp::Xor => "xor",
            AluOp::Mov => "mov",
            AluOp::Arsh => "arsh",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JmpCond {
    Ja,
    Jeq,
    Jne,
    Jgt,
    Jge,
    Jlt,
    Jle,
    Jsgt,
    Jsge,
}

impl JmpCond {
    pub const ALL: [JmpCond; 9] = [
        JmpCond::Ja,
        JmpCond::Jeq,
        JmpCond::Jne,
        JmpCond::Jgt,
        JmpCond::Jge,
        JmpCond::Jlt,
        JmpCond::Jle,
        JmpCond::Jsgt,
        JmpCond::Jsge,
    ];

    fn code(self) -> u8 {
        match self {
            JmpCond::Ja => 0x00,
            JmpCond::Jeq => 0x10,
            JmpCond::Jgt => 0x20,
            JmpCond::Jge => 0x30,
            JmpCond::Jne => 0x50,
            JmpCond::Jsgt => 0x60,
            JmpCond::Jsge => 0x70,
            JmpCond::Jlt => 0xa0,
            JmpCond::Jle => 0xb0,
        }
    }

    fn from_code(code: u8) -> Option<JmpCond> {
        JmpCond::ALL.into_iter().find(|c| c.code() == code)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            JmpCond::Ja => "ja",
            JmpCond::Jeq => "jeq",
            JmpCond::Jne => "jne",
            JmpCond::Jgt => "jgt",
            JmpCond::Jge => "jge",
            JmpCond::Jlt => "jlt",
            JmpCond::Jle => "jle",
            JmpCond::Jsgt => "jsgt",
            JmpCond::Jsge => "jsge",
        }
    }

    /// Condition taken on the fallthrough edge, if expressible in the subset.
    pub fn negate(self) -> Option<JmpCond> {
        Some(match self {
            JmpCond::Ja => return None,
            JmpCond::Jeq => JmpCond::Jne,
            JmpCond::Jne => JmpCond::Jeq,
            JmpCond::Jgt => JmpCond::Jle,
            JmpCond::Jge => JmpCond::Jlt,
            JmpCond::Jlt => JmpCond::Jge,
            JmpCond::Jle => JmpCond::Jgt,
            JmpCond::Jsgt | JmpCond::Jsge => return None,
        })
    }
}

/// Memory access width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    B,
    H,
    W,
    DW,
}

impl Size {
    pub const ALL: [Size; 4] = [Size::B, Size::H, Size::W, Size::DW];

    pub fn bytes(self) -> usize {
        match self {
            Size::B => 1,
            Size::H => 2,
            Size::W => 4,
            Size::DW => 8,
        }
    }

    pub fn bits(self) -> u32 {
        self.bytes() as u32 * 8
    }

    fn code(self) -> u8 {
        match self {
            Size::W => 0x00,
            Size::H => 0x08,
            Size::B => 0x10,
            Size::DW => 0x18,
        }
    }

    fn from_code(code: u8) -> Size {
        match code & 0x18 {
            0x00 => Size::W,
            0x08 => Size::H,
            0x10 => Size::B,
            _ => Size::DW,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Size> {
        Size::ALL.into_iter().find(|s| s.bits() == bits)
    }
}

/// Whether the second ALU/jump operand is the immediate or the source register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Src {
    Imm,
    Reg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Alu64(AluOp, Src),
    Alu32(AluOp, Src),
    Jmp(JmpCond, Src),
    Ldx(Size),
    Stx(Size),
    St(Size),
    /// `*(u64 *)(dst + off) += src`
    Xadd64,
    /// `*(u32 *)(dst + off) += src`
    Xadd32,
    /// 64-bit immediate load, two slots wide in the binary encoding.
    Lddw,
    /// Map descriptor load; the `LDDW` pseudo form with `src = 1`.
    LdMapFd,
    Call,
    Exit,
    Nop,
}

impl Opcode {
    pub fn is_jump(self) -> bool {
        matches!(self, Opcode::Jmp(..))
    }

    pub fn is_load(self) -> bool {
        matches!(self, Opcode::Ldx(_))
    }

    pub fn is_store(self) -> bool {
        matches!(
            self,
            Opcode::Stx(_) | Opcode::St(_) | Opcode::Xadd32 | Opcode::Xadd64
        )
    }

    pub fn is_mem(self) -> bool {
        self.is_load() || self.is_store()
    }

    pub fn mem_size(self) -> Option<Size> {
        match self {
            Opcode::Ldx(s) | Opcode::Stx(s) | Opcode::St(s) => Some(s),
            Opcode::Xadd32 => Some(Size::W),
            Opcode::Xadd64 => Some(Size::DW),
            _ => None,
        }
    }

    /// Does the instruction assign its `dst` register?
    pub fn writes_dst(self) -> bool {
        matches!(
            self,
            Opcode::Alu64(..) | Opcode::Alu32(..) | Opcode::Ldx(_) | Opcode::Lddw | Opcode::LdMapFd
        )
    }

    /// Does the instruction read its `dst` register?
    pub fn reads_dst(self) -> bool {
        match self {
            Opcode::Alu64(AluOp::Mov, _) | Opcode::Alu32(AluOp::Mov, _) => false,
            Opcode::Alu64(..) | Opcode::Alu32(..) => true,
            Opcode::Jmp(JmpCond::Ja, _) => false,
            Opcode::Jmp(..) => true,
            Opcode::Stx(_) | Opcode::St(_) | Opcode::Xadd32 | Opcode::Xadd64 => true,
            _ => false,
        }
    }

    /// Does the instruction read its `src` register?
    pub fn reads_src(self) -> bool {
        match self {
            Opcode::Alu64(AluOp::Neg, _) | Opcode::Alu32(AluOp::Neg, _) => false,
            Opcode::Alu64(_, Src::Reg) | Opcode::Alu32(_, Src::Reg) => true,
            Opcode::Jmp(JmpCond::Ja, _) => false,
            Opcode::Jmp(_, Src::Reg) => true,
            Opcode::Ldx(_) | Opcode::Stx(_) | Opcode::Xadd32 | Opcode::Xadd64 => true,
            _ => false,
        }
    }

    /// Does the instruction use its immediate field?
    pub fn uses_imm(self) -> bool {
        match self {
            Opcode::Alu64(AluOp::Neg, _) | Opcode::Alu32(AluOp::Neg, _) => false,
            Opcode::Alu64(_, Src::Imm) | Opcode::Alu32(_, Src::Imm) => true,
            Opcode::Jmp(JmpCond::Ja, _) => false,
            Opcode::Jmp(_, Src::Imm) => true,
            Opcode::St(_) | Opcode::Lddw | Opcode::LdMapFd | Opcode::Call => true,
            _ => false,
        }
    }

    /// Does the instruction use its offset field?
    pub fn uses_off(self) -> bool {
        self.is_jump() || self.is_mem()
    }
}

/// A single instruction. Unused fields are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Instruction {
    pub op: Opcode,
    pub dst: Reg,
    pub src: Reg,
    pub off: i16,
    pub imm: i64,
}

impl Instruction {
    pub const NOP: Instruction = Instruction {
        op: Opcode::Nop,
        dst: Reg::R0,
        src: Reg::R0,
        off: 0,
        imm: 0,
    };

    pub const EXIT: Instruction = Instruction {
        op: Opcode::Exit,
        ..Instruction::NOP
    };

    pub fn new(op: Opcode, dst: Reg, src: Reg, off: i16, imm: i64) -> Instruction {
        Instruction { op, dst, src, off, imm }.normalized()
    }

    pub fn alu64_imm(op: AluOp, dst: Reg, imm: i32) -> Instruction {
        Instruction::new(Opcode::Alu64(op, Src::Imm), dst, Reg::R0, 0, imm as i64)
    }

    pub fn alu64_reg(op: AluOp, dst: Reg, src: Reg) -> Instruction {
        Instruction::new(Opcode::Alu64(op, Src::Reg), dst, src, 0, 0)
    }

    pub fn alu32_imm(op: AluOp, dst: Reg, imm: i32) -> Instruction {
        Instruction::new(Opcode::Alu32(op, Src::Imm), dst, Reg::R0, 0, imm as i64)
    }

    pub fn alu32_reg(op: AluOp, dst: Reg, src: Reg) -> Instruction {
        Instruction::new(Opcode::Alu32(op, Src::Reg), dst, src, 0, 0)
    }

    pub fn jmp_imm(cond: JmpCond, dst: Reg, imm: i32, off: i16) -> Instruction {
        Instruction::new(Opcode::Jmp(cond, Src::Imm), dst, Reg::R0, off, imm as i64)
    }

    pub fn jmp_reg(cond: JmpCond, dst: Reg, src: Reg, off: i16) -> Instruction {
        Instruction::new(Opcode::Jmp(cond, Src::Reg), dst, src, off, 0)
    }

    pub fn ja(off: i16) -> Instruction {
        Instruction::new(Opcode::Jmp(JmpCond::Ja, Src::Imm), Reg::R0, Reg::R0, off, 0)
    }

    pub fn ldx(size: Size, dst: Reg, base: Reg, off: i16) -> Instruction {
        Instruction::new(Opcode::Ldx(size), dst, base, off, 0)
    }

    pub fn stx(size: Size, base: Reg, off: i16, src: Reg) -> Instruction {
        Instruction::new(Opcode::Stx(size), base, src, off, 0)
    }

    pub fn st(size: Size, base: Reg, off: i16, imm: i32) -> Instruction {
        Instruction::new(Opcode::St(size), base, Reg::R0, off, imm as i64)
    }

    pub fn xadd(size: Size, base: Reg, off: i16, src: Reg) -> Instruction {
        let op = if size == Size::DW { Opcode::Xadd64 } else { Opcode::Xadd32 };
        Instruction::new(op, base, src, off, 0)
    }

    pub fn lddw(dst: Reg, imm: i64) -> Instruction {
        Instruction::new(Opcode::Lddw, dst, Reg::R0, 0, imm)
    }

    pub fn ld_map_fd(dst: Reg, map_id: u32) -> Instruction {
        Instruction::new(Opcode::LdMapFd, dst, Reg::R0, 0, map_id as i64)
    }

    pub fn call(helper: u32) -> Instruction {
        Instruction::new(Opcode::Call, Reg::R0, Reg::R0, 0, helper as i64)
    }

    /// Clears fields the opcode ignores and folds `ja +0` into `nop`, so that
    /// structurally equal instructions compare equal.
    pub fn normalized(mut self) -> Instruction {
        let op = self.op;
        if op == Opcode::Jmp(JmpCond::Ja, Src::Imm) || op == Opcode::Jmp(JmpCond::Ja, Src::Reg) {
            self.op = Opcode::Jmp(JmpCond::Ja, Src::Imm);
            if self.off == 0 {
                return Instruction::NOP;
            }
        }
        match self.op {
            Opcode::Alu64(AluOp::Neg, _) => self.op = Opcode::Alu64(AluOp::Neg, Src::Imm),
            Opcode::Alu32(AluOp::Neg, _) => self.op = Opcode::Alu32(AluOp::Neg, Src::Imm),
            _ => {}
        }
        let op = self.op;
        let keeps_dst = op.writes_dst() || op.reads_dst();
        if !keeps_dst {
            self.dst = Reg::R0;
        }
        if !op.reads_src() {
            self.src = Reg::R0;
        }
        if !op.uses_off() {
            self.off = 0;
        }
        if !op.uses_imm() {
            self.imm = 0;
        }
        self
    }

    pub fn is_nop(&self) -> bool {
        self.op == Opcode::Nop
    }

    /// Number of 8-byte slots the instruction occupies in the binary encoding.
    pub fn slots(&self) -> usize {
        match self.op {
            Opcode::Lddw | Opcode::LdMapFd => 2,
            _ => 1,
        }
    }

    /// Jump target as a program index, for jump instructions.
    pub fn jump_target(&self, at: usize) -> Option<i64> {
        self.op.is_jump().then(|| at as i64 + 1 + self.off as i64)
    }
}

/// A sequence of instructions in program order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Program {
    pub insns: Vec<Instruction>,
}

impl Program {
    pub fn new(insns: Vec<Instruction>) -> Program {
        Program { insns: insns.into_iter().map(Instruction::normalized).collect() }
    }

    pub fn len(&self) -> usize {
        self.insns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insns.is_empty()
    }

    /// Instruction count in encoded slots, not counting NOPs.
    pub fn instruction_count(&self) -> usize {
        self.insns.iter().filter(|i| !i.is_nop()).map(Instruction::slots).sum()
    }

    /// Checks register ranges, immediates and jump targets.
    pub fn validate(&self) -> Result<(), IsaError> {
        if self.insns.is_empty() {
            return Err(IsaError::Empty);
        }
        for (at, insn) in self.insns.iter().enumerate() {
            if insn.op.writes_dst() && insn.dst == Reg::FP {
                return Err(IsaError::FramePointerWrite { at });
            }
            let wide = matches!(insn.op, Opcode::Lddw);
            if !wide && i32::try_from(insn.imm).is_err() {
                return Err(IsaError::ImmOverflow { at, imm: insn.imm });
            }
            if insn.op == Opcode::LdMapFd && insn.imm < 0 {
                return Err(IsaError::ImmOverflow { at, imm: insn.imm });
            }
            if let Some(target) = insn.jump_target(at) {
                if target < 0 || target >= self.insns.len() as i64 {
                    return Err(IsaError::JumpOutOfBounds { at, target });
                }
            }
        }
        Ok(())
    }
}

impl From<Vec<Instruction>> for Program {
    fn from(insns: Vec<Instruction>) -> Self {
        Program::new(insns)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown opcode `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: register `{name}` out of range")]
    BadRegister { line: usize, name: String },
    #[error("line {line}: immediate `{value}` does not fit")]
    ImmRange { line: usize, value: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("program is empty")]
    Empty,
    #[error("instruction {at}: immediate {imm} does not fit in 32 bits")]
    ImmOverflow { at: usize, imm: i64 },
    #[error("instruction {at}: jump to {target} leaves the program")]
    JumpOutOfBounds { at: usize, target: i64 },
    #[error("instruction {at}: writes the read-only frame pointer")]
    FramePointerWrite { at: usize },
    #[error("encoding length {len} is not a multiple of 8")]
    Truncated { len: usize },
    #[error("byte offset {offset}: unknown opcode 0x{opcode:02x}")]
    UnknownOpcode { offset: usize, opcode: u8 },
    #[error("byte offset {offset}: truncated 16-byte immediate load")]
    TruncatedLddw { offset: usize },
    #[error("byte offset {offset}: register field {value} out of range")]
    BadRegisterField { offset: usize, value: u8 },
    #[error("byte offset {offset}: jump lands inside a 16-byte instruction")]
    JumpIntoLddw { offset: usize },
}

// ---------------------------------------------------------------------------
// Binary encoding

const CLASS_LD: u8 = 0x00;
const CLASS_LDX: u8 = 0x01;
const CLASS_ST: u8 = 0x02;
const CLASS_STX: u8 = 0x03;
const CLASS_ALU: u8 = 0x04;
const CLASS_JMP: u8 = 0x05;
const CLASS_ALU64: u8 = 0x07;

const MODE_IMM: u8 = 0x00;
const MODE_MEM: u8 = 0x60;
const MODE_ATOMIC: u8 = 0xc0;
const SRC_X: u8 = 0x08;

const OP_CALL: u8 = 0x85;
const OP_EXIT: u8 = 0x95;
const OP_LDDW: u8 = CLASS_LD | MODE_IMM | 0x18;
const PSEUDO_MAP_FD: u8 = 1;

fn slot_bytes(opcode: u8, dst: u8, src: u8, off: i16, imm: i32) -> [u8; 8] {
    let mut out = [0u8; 8];
    out[0] = opcode;
    out[1] = (src << 4) | (dst & 0x0f);
    out[2..4].copy_from_slice(&off.to_le_bytes());
    out[4..8].copy_from_slice(&imm.to_le_bytes());
    out
}

/// Encodes a program into little-endian 8-byte instruction records.
pub fn encode(p: &Program) -> Vec<u8> {
    let mut slot_of = Vec::with_capacity(p.len() + 1);
    let mut slot = 0usize;
    for insn in &p.insns {
        slot_of.push(slot);
        slot += insn.slots();
    }
    slot_of.push(slot);

    let mut out = Vec::with_capacity(slot * 8);
    for (at, insn) in p.insns.iter().enumerate() {
        let dst = insn.dst.0;
        let src = insn.src.0;
        let imm32 = insn.imm as i32;
        let bytes = match insn.op {
            Opcode::Alu64(op, s) | Opcode::Alu32(op, s) => {
                let class = if matches!(insn.op, Opcode::Alu64(..)) { CLASS_ALU64 } else { CLASS_ALU };
                let x = if s == Src::Reg && op != AluOp::Neg { SRC_X } else { 0 };
                slot_bytes(op.code() | x | class, dst, src, 0, imm32)
            }
            Opcode::Jmp(cond, s) => {
                let target = insn.jump_target(at).unwrap() as usize;
                let off = slot_of[target] as i64 - slot_of[at] as i64 - 1;
                let x = if s == Src::Reg && cond != JmpCond::Ja { SRC_X } else { 0 };
                slot_bytes(cond.code() | x | CLASS_JMP, dst, src, off as i16, imm32)
            }
            Opcode::Nop => slot_bytes(CLASS_JMP, 0, 0, 0, 0),
            Opcode::Ldx(size) => slot_bytes(CLASS_LDX | MODE_MEM | size.code(), dst, src, insn.off, 0),
            Opcode::Stx(size) => slot_bytes(CLASS_STX | MODE_MEM | size.code(), dst, src, insn.off, 0),
            Opcode::St(size) => slot_bytes(CLASS_ST | MODE_MEM | size.code(), dst, 0, insn.off, imm32),
            Opcode::Xadd32 => slot_bytes(CLASS_STX | MODE_ATOMIC | Size::W.code(), dst, src, insn.off, 0),
            Opcode::Xadd64 => slot_bytes(CLASS_STX | MODE_ATOMIC | Size::DW.code(), dst, src, insn.off, 0),
            Opcode::Call => slot_bytes(OP_CALL, 0, 0, 0, imm32),
            Opcode::Exit => slot_bytes(OP_EXIT, 0, 0, 0, 0),
            Opcode::Lddw | Opcode::LdMapFd => {
                let pseudo = if insn.op == Opcode::LdMapFd { PSEUDO_MAP_FD } else { 0 };
                out.extend_from_slice(&slot_bytes(OP_LDDW, dst, pseudo, 0, insn.imm as i32));
                slot_bytes(0, 0, 0, 0, (insn.imm >> 32) as i32)
            }
        };
        out.extend_from_slice(&bytes);
    }
    out
}

/// Decodes raw instruction records produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Program, IsaError> {
    if bytes.len() % 8 != 0 {
        return Err(IsaError::Truncated { len: bytes.len() });
    }
    let nslots = bytes.len() / 8;
    // (slot index, instruction with slot-relative jump offset)
    let mut raw: Vec<(usize, Instruction)> = Vec::new();
    let mut slot = 0;
    while slot < nslots {
        let offset = slot * 8;
        let rec = &bytes[offset..offset + 8];
        let opcode = rec[0];
        let dst_v = rec[1] & 0x0f;
        let src_v = rec[1] >> 4;
        let off = i16::from_le_bytes([rec[2], rec[3]]);
        let imm = i32::from_le_bytes([rec[4], rec[5], rec[6], rec[7]]);
        let reg = |v: u8| Reg::new(v).ok_or(IsaError::BadRegisterField { offset, value: v });
        let dst = reg(dst_v)?;
        let src = reg(src_v)?;
        let unknown = IsaError::UnknownOpcode { offset, opcode };
        let class = opcode & 0x07;
        let insn = match class {
            CLASS_ALU | CLASS_ALU64 => {
                let op = AluOp::from_code(opcode & 0xf0).ok_or(unknown)?;
                let s = if opcode & SRC_X != 0 { Src::Reg } else { Src::Imm };
                let opc = if class == CLASS_ALU64 { Opcode::Alu64(op, s) } else { Opcode::Alu32(op, s) };
                Instruction { op: opc, dst, src, off: 0, imm: imm as i64 }
            }
            CLASS_JMP => match opcode {
                OP_CALL => Instruction::call(imm as u32),
                OP_EXIT => Instruction::EXIT,
                _ => {
                    let cond = JmpCond::from_code(opcode & 0xf0).ok_or(unknown)?;
                    let s = if opcode & SRC_X != 0 { Src::Reg } else { Src::Imm };
                    Instruction { op: Opcode::Jmp(cond, s), dst, src, off, imm: imm as i64 }
                }
            },
            CLASS_LDX if opcode & 0xe0 == MODE_MEM => Instruction {
                op: Opcode::Ldx(Size::from_code(opcode)),
                dst,
                src,
                off,
                imm: 0,
            },
            CLASS_STX if opcode & 0xe0 == MODE_MEM => Instruction {
                op: Opcode::Stx(Size::from_code(opcode)),
                dst,
                src,
                off,
                imm: 0,
            },
            CLASS_STX if opcode & 0xe0 == MODE_ATOMIC => {
                if imm != 0 {
                    return Err(unknown);
                }
                let op = match Size::from_code(opcode) {
                    Size::W => Opcode::Xadd32,
                    Size::DW => Opcode::Xadd64,
                    _ => return Err(unknown),
                };
                Instruction { op, dst, src, off, imm: 0 }
            }
            CLASS_ST if opcode & 0xe0 == MODE_MEM => Instruction {
                op: Opcode::St(Size::from_code(opcode)),
                dst,
                src,
                off,
                imm: imm as i64,
            },
            CLASS_LD if opcode == OP_LDDW => {
                if slot + 1 >= nslots {
                    return Err(IsaError::TruncatedLddw { offset });
                }
                let next = &bytes[offset + 8..offset + 16];
                if next[0] != 0 {
                    return Err(IsaError::TruncatedLddw { offset });
                }
                let hi = i32::from_le_bytes([next[4], next[5], next[6], next[7]]);
                let value = ((hi as i64) << 32) | (imm as u32 as i64);
                let insn = match src_v {
                    0 => Instruction::lddw(dst, value),
                    PSEUDO_MAP_FD => Instruction::ld_map_fd(dst, value as u32),
                    _ => return Err(unknown),
                };
                raw.push((slot, insn));
                slot += 2;
                continue;
            }
            _ => return Err(unknown),
        };
        raw.push((slot, insn));
        slot += 1;
    }

    // Convert slot-relative jump offsets to entry-relative offsets.
    let mut index_of_slot = vec![None; nslots + 1];
    for (i, (s, _)) in raw.iter().enumerate() {
        index_of_slot[*s] = Some(i);
    }
    index_of_slot[nslots] = Some(raw.len());
    let mut insns = Vec::with_capacity(raw.len());
    for (i, (s, insn)) in raw.iter().enumerate() {
        let mut insn = *insn;
        if insn.op.is_jump() {
            let target_slot = *s as i64 + 1 + insn.off as i64;
            if target_slot < 0 || target_slot > nslots as i64 {
                return Err(IsaError::JumpOutOfBounds { at: i, target: target_slot });
            }
            let target = index_of_slot[target_slot as usize]
                .ok_or(IsaError::JumpIntoLddw { offset: s * 8 })?;
            insn.off = (target as i64 - i as i64 - 1) as i16;
        }
        insns.push(insn.normalized());
    }
    Ok(Program { insns })
}

// ---------------------------------------------------------------------------
// Assembly text

/// Well-known helper ids.
pub mod helpers {
    pub const MAP_LOOKUP_ELEM: u32 = 1;
    pub const MAP_UPDATE_ELEM: u32 = 2;
    pub const MAP_DELETE_ELEM: u32 = 3;
    pub const KTIME_GET_NS: u32 = 5;
    pub const GET_PRANDOM_U32: u32 = 7;
    pub const GET_SMP_PROCESSOR_ID: u32 = 8;

    pub fn by_name(name: &str) -> Option<u32> {
        Some(match name {
            "map_lookup_elem" | "map_lookup" => MAP_LOOKUP_ELEM,
            "map_update_elem" | "map_update" => MAP_UPDATE_ELEM,
            "map_delete_elem" | "map_delete" => MAP_DELETE_ELEM,
            "ktime_get_ns" => KTIME_GET_NS,
            "get_prandom_u32" => GET_PRANDOM_U32,
            "get_smp_processor_id" => GET_SMP_PROCESSOR_ID,
            _ => return None,
        })
    }

    /// Number of argument registers (r1..) a modeled helper reads.
    pub fn arity(id: u32) -> Option<usize> {
        match id {
            MAP_LOOKUP_ELEM | MAP_DELETE_ELEM => Some(2),
            MAP_UPDATE_ELEM => Some(4),
            KTIME_GET_NS | GET_PRANDOM_U32 | GET_SMP_PROCESSOR_ID => Some(0),
            _ => None,
        }
    }
}

/// Parses line-oriented assembly into a program.
pub fn parse_asm(text: &str) -> Result<Program, IsaError> {
    let (prog, lines) = parse_lines(text)?;
    if let Err(e) = prog.validate() {
        return Err(match e {
            IsaError::JumpOutOfBounds { at, target } => IsaError::Syntax {
                line: lines[at],
                msg: format!("jump target {target} outside the program"),
            },
            IsaError::FramePointerWrite { at } => IsaError::Syntax {
                line: lines[at],
                msg: "r10 is read-only".into(),
            },
            other => other,
        });
    }
    Ok(prog)
}

/// Like [`parse_asm`] but keeps out-of-range jumps and r10 writes, for
/// feeding malformed programs to the safety checker.
pub fn parse_asm_unchecked(text: &str) -> Result<Program, IsaError> {
    parse_lines(text).map(|(p, _)| p)
}

fn parse_lines(text: &str) -> Result<(Program, Vec<usize>), IsaError> {
    struct Pending<'a> {
        line: usize,
        mnemonic: &'a str,
        args: Vec<&'a str>,
    }
    let mut labels = std::collections::HashMap::new();
    let mut pending = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let code = raw.split("//").next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        let mut rest = code;
        // Leading labels: `name:`
        while let Some((head, tail)) = rest.split_once(':') {
            let head = head.trim();
            if head.is_empty() || !head.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                break;
            }
            labels.insert(head.to_string(), pending.len());
            rest = tail.trim();
        }
        if rest.is_empty() {
            continue;
        }
        let mut parts = rest.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty());
        let mnemonic = parts.next().unwrap();
        pending.push(Pending { line, mnemonic, args: parts.collect() });
    }

    let mut insns = Vec::with_capacity(pending.len());
    for (at, p) in pending.iter().enumerate() {
        let insn = parse_insn(p.line, p.mnemonic, &p.args, at, &labels)?;
        insns.push(insn);
    }
    Ok((Program::new(insns), pending.iter().map(|p| p.line).collect()))
}

fn parse_reg(line: usize, s: &str) -> Result<Reg, IsaError> {
    let bad = || IsaError::BadRegister { line, name: s.to_string() };
    let digits = s.strip_prefix('r').ok_or_else(bad)?;
    let n: u8 = digits.parse().map_err(|_| bad())?;
    Reg::new(n).ok_or_else(bad)
}

fn is_reg(s: &str) -> bool {
    s.len() > 1 && s.starts_with('r') && s[1..].chars().all(|c| c.is_ascii_digit())
}

fn parse_int(line: usize, s: &str) -> Result<i128, IsaError> {
    let bad = || IsaError::Syntax { line, msg: format!("expected a number, found `{s}`") };
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16).map_err(|_| bad())?
    } else {
        body.parse::<i128>().map_err(|_| bad())?
    };
    Ok(if neg { -v } else { v })
}

/// 32-bit immediates accept signed values and unsigned bit patterns.
fn parse_imm32(line: usize, s: &str) -> Result<i64, IsaError> {
    let v = parse_int(line, s)?;
    if v >= i32::MIN as i128 && v <= u32::MAX as i128 {
        Ok(v as u32 as i32 as i64)
    } else {
        Err(IsaError::ImmRange { line, value: s.to_string() })
    }
}

fn parse_imm64(line: usize, s: &str) -> Result<i64, IsaError> {
    let v = parse_int(line, s)?;
    if v >= i64::MIN as i128 && v <= u64::MAX as i128 {
        Ok(v as u64 as i64)
    } else {
        Err(IsaError::ImmRange { line, value: s.to_string() })
    }
}

fn parse_off(line: usize, s: &str) -> Result<i16, IsaError> {
    let v = parse_int(line, s)?;
    i16::try_from(v).map_err(|_| IsaError::ImmRange { line, value: s.to_string() })
}

fn parse_insn(
    line: usize,
    mnemonic: &str,
    args: &[&str],
    at: usize,
    labels: &std::collections::HashMap<String, usize>,
) -> Result<Instruction, IsaError> {
    let m = mnemonic.strip_prefix("bpf_").unwrap_or(mnemonic).to_ascii_lowercase();
    let unknown = || IsaError::UnknownMnemonic { line, mnemonic: mnemonic.to_string() };
    let arity = |n: usize| -> Result<(), IsaError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(IsaError::Syntax {
                line,
                msg: format!("`{mnemonic}` takes {n} operand(s), found {}", args.len()),
            })
        }
    };
    let jump_off = |s: &str| -> Result<i16, IsaError> {
        if let Some(&target) = labels.get(s) {
            let off = target as i64 - at as i64 - 1;
            return i16::try_from(off).map_err(|_| IsaError::ImmRange { line, value: s.to_string() });
        }
        if s.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+') {
            parse_off(line, s)
        } else {
            Err(IsaError::UndefinedLabel { line, label: s.to_string() })
        }
    };

    match m.as_str() {
        "nop" => {
            arity(0)?;
            return Ok(Instruction::NOP);
        }
        "exit" => {
            arity(0)?;
            return Ok(Instruction::EXIT);
        }
        "call" => {
            arity(1)?;
            let id = match helpers::by_name(args[0]) {
                Some(id) => id as i64,
                None => parse_imm32(line, args[0])?,
            };
            return Ok(Instruction::call(id as u32));
        }
        "lddw" => {
            arity(2)?;
            return Ok(Instruction::lddw(parse_reg(line, args[0])?, parse_imm64(line, args[1])?));
        }
        "ld_map_fd" => {
            arity(2)?;
            let id = parse_int(line, args[1])?;
            let id = u32::try_from(id)
                .ok()
                .filter(|v| *v <= i32::MAX as u32)
                .ok_or(IsaError::ImmRange { line, value: args[1].to_string() })?;
            return Ok(Instruction::ld_map_fd(parse_reg(line, args[0])?, id));
        }
        "ja" => {
            arity(1)?;
            return Ok(Instruction::ja(jump_off(args[0])?));
        }
        _ => {}
    }

    // Memory forms carry a width suffix: load_16, stx_32, st_imm64, xadd_32.
    let width_of = |s: &str| -> Option<Size> {
        let s = s.strip_prefix('_').unwrap_or(s);
        Size::from_bits(s.parse().ok()?)
    };
    for (prefix, kind) in [("load", 0), ("ldx", 0), ("stx", 1), ("st_imm", 2), ("xadd", 3)] {
        if let Some(rest) = m.strip_prefix(prefix) {
            let Some(size) = width_of(rest) else { continue };
            arity(3)?;
            return Ok(match kind {
                0 => Instruction::ldx(size, parse_reg(line, args[0])?, parse_reg(line, args[1])?, parse_off(line, args[2])?),
                1 => Instruction::stx(size, parse_reg(line, args[0])?, parse_off(line, args[1])?, parse_reg(line, args[2])?),
                2 => Instruction::st(size, parse_reg(line, args[0])?, parse_off(line, args[1])?, parse_imm32(line, args[2])? as i32),
                _ => {
                    if !matches!(size, Size::W | Size::DW) {
                        return Err(unknown());
                    }
                    Instruction::xadd(size, parse_reg(line, args[0])?, parse_off(line, args[1])?, parse_reg(line, args[2])?)
                }
            });
        }
    }

    // Conditional jumps: jeq dst src|imm off
    let cond_name = if m == "jneq" { "jne" } else { m.as_str() };
    if let Some(cond) = JmpCond::ALL.into_iter().find(|c| c.mnemonic() == cond_name) {
        arity(3)?;
        let dst = parse_reg(line, args[0])?;
        let off = jump_off(args[2])?;
        return Ok(if is_reg(args[1]) {
            Instruction::jmp_reg(cond, dst, parse_reg(line, args[1])?, off)
        } else {
            Instruction::jmp_imm(cond, dst, parse_imm32(line, args[1])? as i32, off)
        });
    }

    // ALU: add64, add32, add (64-bit)
    let (base, is32) = if let Some(b) = m.strip_suffix("64") {
        (b, false)
    } else if let Some(b) = m.strip_suffix("32") {
        (b, true)
    } else {
        (m.as_str(), false)
    };
    let base = match base {
        "lshift" => "lsh",
        "rshift" => "rsh",
        other => other,
    };
    let op = AluOp::ALL.into_iter().find(|o| o.mnemonic() == base).ok_or_else(unknown)?;
    if op == AluOp::Neg {
        arity(1)?;
        let dst = parse_reg(line, args[0])?;
        return Ok(if is32 { Instruction::alu32_imm(op, dst, 0) } else { Instruction::alu64_imm(op, dst, 0) });
    }
    arity(2)?;
    let dst = parse_reg(line, args[0])?;
    Ok(if is_reg(args[1]) {
        let src = parse_reg(line, args[1])?;
        if is32 { Instruction::alu32_reg(op, dst, src) } else { Instruction::alu64_reg(op, dst, src) }
    } else {
        let imm = parse_imm32(line, args[1])? as i32;
        if is32 { Instruction::alu32_imm(op, dst, imm) } else { Instruction::alu64_imm(op, dst, imm) }
    })
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = self;
        match i.op {
            Opcode::Nop => write!(f, "nop"),
            Opcode::Exit => write!(f, "bpf_exit"),
            Opcode::Call => write!(f, "bpf_call {}", i.imm),
            Opcode::Lddw => write!(f, "bpf_lddw {} {:#x}", i.dst, i.imm as u64),
            Opcode::LdMapFd => write!(f, "bpf_ld_map_fd {} {}", i.dst, i.imm),
            Opcode::Jmp(JmpCond::Ja, _) => write!(f, "bpf_ja {}", i.off),
            Opcode::Jmp(c, Src::Imm) => write!(f, "bpf_{} {} {} {}", c.mnemonic(), i.dst, i.imm, i.off),
            Opcode::Jmp(c, Src::Reg) => write!(f, "bpf_{} {} {} {}", c.mnemonic(), i.dst, i.src, i.off),
            Opcode::Ldx(s) => write!(f, "bpf_load_{} {} {} {}", s.bits(), i.dst, i.src, i.off),
            Opcode::Stx(s) => write!(f, "bpf_stx_{} {} {} {}", s.bits(), i.dst, i.off, i.src),
            Opcode::St(s) => write!(f, "bpf_st_imm{} {} {} {}", s.bits(), i.dst, i.off, i.imm),
            Opcode::Xadd32 => write!(f, "bpf_xadd_32 {} {} {}", i.dst, i.off, i.src),
            Opcode::Xadd64 => write!(f, "bpf_xadd_64 {} {} {}", i.dst, i.off, i.src),
            Opcode::Alu64(op, src) | Opcode::Alu32(op, src) => {
                let w = if matches!(i.op, Opcode::Alu64(..)) { 64 } else { 32 };
                if op == AluOp::Neg {
                    return write!(f, "bpf_neg{} {}", w, i.dst);
                }
                match src {
                    Src::Imm => write!(f, "bpf_{}{} {} {}", op.mnemonic(), w, i.dst, i.imm),
                    Src::Reg => write!(f, "bpf_{}{} {} {}", op.mnemonic(), w, i.dst, i.src),
                }
            }
        }
    }
}

/// Prints a program as assembly, one instruction per line.
pub fn print_asm(p: &Program) -> String {
    let mut out = String::new();
    for insn in &p.insns {
        out.push_str(&insn.to_string());
        out.push('\n');
    }
    out
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_asm(self))
    }
}
