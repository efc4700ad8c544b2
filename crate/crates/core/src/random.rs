//! Random loop-free programs for property tests.
//!
//! Programs use the packet pointer in r1 and a scalar in r2, write only
//! r0 and r3..r5, and mostly avoid faults by tracking which registers and
//! stack slots are definitely written.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::isa::{AluOp, Instruction, JmpCond, Program, Reg, Size};
use crate::progspec::{InputKind, ProgramSpec};

/// Input description the generated programs assume.
pub fn random_program_spec() -> ProgramSpec {
    ProgramSpec::xdp(16).with_input(Reg::R2, InputKind::Scalar)
}

#[derive(Clone, Copy, Debug)]
pub struct RandomProgramConfig {
    /// Total length including the final exit.
    pub max_len: usize,
    pub allow_memory: bool,
    pub allow_jumps: bool,
}

impl Default for RandomProgramConfig {
    fn default() -> Self {
        RandomProgramConfig { max_len: 12, allow_memory: true, allow_jumps: true }
    }
}

const WRITABLE: [Reg; 4] = [Reg::R0, Reg::R3, Reg::R4, Reg::R5];

fn small_imm(rng: &mut impl Rng) -> i32 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(-4..16),
        1 => rng.gen_range(0..64),
        2 => rng.gen(),
        _ => *[0xff, 0xffff, -1, i32::MIN, 0x7fff_ffff].choose(rng).unwrap(),
    }
}

pub fn random_program(rng: &mut impl Rng, cfg: RandomProgramConfig) -> Program {
    let len = rng.gen_range(2..=cfg.max_len.max(2));
    let body = len - 1;
    let mut insns = Vec::with_capacity(len);
    // definitely-initialized registers and 8-byte stack slots
    let mut regs: Vec<Reg> = vec![Reg::R2];
    let mut slots: Vec<i16> = Vec::new();
    // instructions before this index may be skipped by a pending jump
    let mut guarded_until = 0usize;

    insns.push(if rng.gen_bool(0.5) {
        Instruction::alu64_reg(AluOp::Mov, Reg::R0, Reg::R2)
    } else {
        Instruction::alu64_imm(AluOp::Mov, Reg::R0, small_imm(rng))
    });
    regs.push(Reg::R0);

    while insns.len() < body {
        let at = insns.len();
        let certain = at >= guarded_until;
        let kind = rng.gen_range(0..10);
        let dst = *WRITABLE.choose(rng).unwrap();
        let src = *regs.choose(rng).unwrap();
        let insn = match kind {
            0..=4 => {
                let op = *AluOp::ALL.choose(rng).unwrap();
                let reads = op != AluOp::Mov;
                let cands: Vec<Reg> = regs.iter().copied().filter(|r| WRITABLE.contains(r)).collect();
                let dst = if reads { *cands.choose(rng).unwrap_or(&Reg::R0) } else { dst };
                let is64 = rng.gen_bool(0.6);
                let use_reg = rng.gen_bool(0.5);
                let i = match (is64, use_reg) {
                    (true, true) => Instruction::alu64_reg(op, dst, src),
                    (true, false) => Instruction::alu64_imm(op, dst, small_imm(rng)),
                    (false, true) => Instruction::alu32_reg(op, dst, src),
                    (false, false) => Instruction::alu32_imm(op, dst, small_imm(rng)),
                };
                if certain && !regs.contains(&dst) {
                    regs.push(dst);
                }
                i
            }
            5 if cfg.allow_memory => {
                let size = *Size::ALL.choose(rng).unwrap();
                let slot = -8 * rng.gen_range(1..=4i16);
                let off = slot + (rng.gen_range(0..(8 / size.bytes() as i16))) * size.bytes() as i16;
                let i = if rng.gen_bool(0.5) {
                    Instruction::stx(Size::DW, Reg::FP, slot, src)
                } else if rng.gen_bool(0.5) {
                    Instruction::st(size, Reg::FP, off, small_imm(rng))
                } else {
                    Instruction::stx(size, Reg::FP, off, src)
                };
                if certain && i.op.mem_size() == Some(Size::DW) && !slots.contains(&slot) {
                    slots.push(slot);
                }
                i
            }
            6 if cfg.allow_memory => {
                let size = *Size::ALL.choose(rng).unwrap();
                let i = if !slots.is_empty() && rng.gen_bool(0.5) {
                    let slot = *slots.choose(rng).unwrap();
                    let off = slot + (rng.gen_range(0..(8 / size.bytes() as i16))) * size.bytes() as i16;
                    Instruction::ldx(size, dst, Reg::FP, off)
                } else {
                    let off = rng.gen_range(0..=(16 - size.bytes() as i16));
                    Instruction::ldx(size, dst, Reg::R1, off)
                };
                if certain && !regs.contains(&dst) {
                    regs.push(dst);
                }
                i
            }
            7 if cfg.allow_memory && !slots.is_empty() => {
                let slot = *slots.choose(rng).unwrap();
                if rng.gen_bool(0.5) {
                    Instruction::xadd(Size::DW, Reg::FP, slot, src)
                } else {
                    Instruction::xadd(Size::W, Reg::FP, slot + 4 * rng.gen_range(0..2), src)
                }
            }
            8 | 9 if cfg.allow_jumps && at + 1 < body => {
                let cond = *JmpCond::ALL[1..].choose(rng).unwrap();
                let max_off = (body - at - 1) as i16;
                let off = rng.gen_range(0..=max_off);
                guarded_until = guarded_until.max(at + 1 + off as usize);
                let lhs = *regs.choose(rng).unwrap();
                if rng.gen_bool(0.5) {
                    Instruction::jmp_imm(cond, lhs, small_imm(rng), off)
                } else {
                    Instruction::jmp_reg(cond, lhs, src, off)
                }
            }
            _ => Instruction::alu64_imm(AluOp::Add, Reg::R0, small_imm(rng)),
        };
        insns.push(insn);
    }
    insns.push(Instruction::EXIT);
    Program::new(insns)
}
