use super::cfg::build_cfg;
use super::liveness::liveness;
use super::ssa::to_ssa;
use super::types::{infer_ptr_types, MemType};
use crate::isa::{Instruction, Opcode, Program};
use crate::progspec::ProgramSpec;

/// Replaces instructions in unreachable blocks with NOPs.
pub fn nop_unreachable(p: &Program) -> Program {
    let Ok(cfg) = build_cfg(p) else { return p.clone() };
    let reach = cfg.reachable_from_entry();
    let mut q = p.clone();
    for (b, blk) in cfg.blocks.iter().enumerate() {
        if !reach[b] {
            for i in blk.range() {
                q.insns[i] = Instruction::NOP;
            }
        }
    }
    q
}

/// Drops NOPs, retargeting jumps to the next remaining instruction.
pub fn strip_nops(p: &Program) -> Program {
    let n = p.len();
    // new index of the first kept instruction at or after i
    let mut next_kept = vec![0usize; n + 1];
    let mut kept = 0;
    for i in 0..n {
        next_kept[i] = kept;
        if !p.insns[i].is_nop() {
            kept += 1;
        }
    }
    next_kept[n] = kept;
    let mut out = Vec::with_capacity(kept);
    for (i, insn) in p.insns.iter().enumerate() {
        if insn.is_nop() {
            continue;
        }
        let mut insn = *insn;
        if let Some(t) = insn.jump_target(i) {
            let t = (t.clamp(0, n as i64)) as usize;
            insn.off = (next_kept[t] as i64 - next_kept[i] as i64 - 1) as i16;
        }
        out.push(insn);
    }
    Program::new(out)
}

fn dead_code_pass(p: &Program, spec: &ProgramSpec) -> Option<Program> {
    let ssa = to_ssa(p).ok()?;
    let info = infer_ptr_types(p, &ssa, spec);
    let live = liveness(p, &ssa, &info, spec);
    let mut q = p.clone();
    for (b, blk) in ssa.cfg.blocks.iter().enumerate() {
        for i in blk.range() {
            let insn = &p.insns[i];
            let dead = if !ssa.reachable[b] {
                true
            } else {
                match insn.op {
                    Opcode::Alu64(..) | Opcode::Alu32(..) | Opcode::Lddw | Opcode::LdMapFd | Opcode::Ldx(_) => {
                        !live.after[i].regs.contains(insn.dst)
                    }
                    Opcode::Stx(size) | Opcode::St(size) => match info.access(p, &ssa, i) {
                        Some(acc) if acc.ty == MemType::Stack => {
                            acc.off.is_some_and(|o| !live.after[i].stack_live(o, size.bytes()))
                        }
                        _ => false,
                    },
                    Opcode::Jmp(_, _) => insn.off == 0,
                    _ => false,
                }
            };
            if dead {
                q.insns[i] = Instruction::NOP;
            }
        }
    }
    Some(q)
}

/// Removes dead code and NOPs until nothing changes. Programs that differ
/// only in dead code map to the same result.
pub fn canonicalize(p: &Program, spec: &ProgramSpec) -> Program {
    let mut cur = strip_nops(p);
    for _ in 0..16 {
        let Some(next) = dead_code_pass(&cur, spec) else { break };
        let next = strip_nops(&next);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}
