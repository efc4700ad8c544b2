//! Regenerates `data/latency.toml` by timing each opcode in the reference
//! interpreter:
//!
//!     cargo run --release -p bpfsynth-search --example latency_bench > crates/search/data/latency.toml
//!
//! Each opcode is repeated `REPS` times after a fixed prologue; its latency is
//! the run time minus the prologue-only run time, divided by `REPS`.

use std::time::Instant;

use bpfsynth_core::interpreter::{execute, MachineState};
use bpfsynth_core::isa::helpers;
use bpfsynth_core::{AluOp, Instruction, JmpCond, Opcode, Program, ProgramSpec, Reg, Size, Src};
use bpfsynth_search::latency::{all_opcodes, opcode_key};

const REPS: usize = 64;
const RUNS: usize = 4000;
const ROUNDS: usize = 7;

fn prologue() -> Vec<Instruction> {
    let mut v = vec![Instruction::st(Size::DW, Reg::FP, -8, 0)];
    for r in 0..6u8 {
        v.push(Instruction::alu64_imm(AluOp::Mov, Reg::new(r).unwrap(), 3 + r as i32));
    }
    v.push(Instruction::alu64_reg(AluOp::Mov, Reg::R6, Reg::FP));
    v
}

fn body(op: Opcode) -> Vec<Instruction> {
    let one = |i: Instruction| vec![i; REPS];
    match op {
        Opcode::Alu64(a, Src::Imm) => one(Instruction::alu64_imm(a, Reg::R1, 3)),
        Opcode::Alu32(a, Src::Imm) => one(Instruction::alu32_imm(a, Reg::R1, 3)),
        Opcode::Alu64(a, Src::Reg) => one(Instruction::alu64_reg(a, Reg::R1, Reg::R2)),
        Opcode::Alu32(a, Src::Reg) => one(Instruction::alu32_reg(a, Reg::R1, Reg::R2)),
        // exit cannot be repeated; it is charged as an unconditional jump
        Opcode::Jmp(JmpCond::Ja, _) | Opcode::Exit => {
            (0..REPS).flat_map(|_| [Instruction::ja(1), Instruction::NOP]).collect()
        }
        Opcode::Jmp(c, Src::Imm) => one(Instruction::jmp_imm(c, Reg::R1, 7, 0)),
        Opcode::Jmp(c, Src::Reg) => one(Instruction::jmp_reg(c, Reg::R1, Reg::R2, 0)),
        Opcode::Ldx(s) => one(Instruction::ldx(s, Reg::R1, Reg::R6, -8)),
        Opcode::Stx(s) => one(Instruction::stx(s, Reg::R6, -8, Reg::R2)),
        Opcode::St(s) => one(Instruction::st(s, Reg::R6, -8, 5)),
        Opcode::Xadd32 => one(Instruction::xadd(Size::W, Reg::R6, -8, Reg::R2)),
        Opcode::Xadd64 => one(Instruction::xadd(Size::DW, Reg::R6, -8, Reg::R2)),
        Opcode::Lddw => one(Instruction::lddw(Reg::R1, 0x1234_5678_9abc)),
        Opcode::LdMapFd => one(Instruction::ld_map_fd(Reg::R1, 0)),
        Opcode::Call => one(Instruction::call(helpers::GET_PRANDOM_U32)),
        Opcode::Nop => one(Instruction::NOP),
    }
}

fn time(p: &Program, spec: &ProgramSpec, input: &MachineState) -> f64 {
    let mut samples: Vec<f64> = (0..ROUNDS)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..RUNS {
                std::hint::black_box(execute(p, spec, input, p.len()).ok());
            }
            t.elapsed().as_nanos() as f64 / RUNS as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[ROUNDS / 2]
}

fn main() {
    let spec = ProgramSpec::ctx(0);
    let mut input = MachineState::new(&spec);
    input.oracle.random = vec![1; REPS];
    let build = |mid: Vec<Instruction>| {
        let mut v = prologue();
        v.extend(mid);
        v.push(Instruction::EXIT);
        Program::new(v)
    };
    let base = time(&build(Vec::new()), &spec, &input);
    println!("# Average interpreter time per opcode in nanoseconds.");
    println!("# Generated by `cargo run --release -p bpfsynth-search --example latency_bench`.");
    println!("# `exit` is charged as `jmp.ja`; values are floored at 0.05.");
    for op in all_opcodes() {
        let p = build(body(op));
        let ns = ((time(&p, &spec, &input) - base) / REPS as f64).max(0.05);
        println!("\"{}\" = {:.3}", opcode_key(op), ns);
    }
}
