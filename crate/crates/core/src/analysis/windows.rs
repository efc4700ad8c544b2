use super::cfg::AnalysisError;
use super::liveness::{liveness, ByteSet, RegSet};
use super::ssa::to_ssa;
use super::types::{infer_concrete_values, infer_ptr_types, MemType};
use crate::isa::{Opcode, Program, Reg};
use crate::progspec::ProgramSpec;

pub const DEFAULT_WINDOW_LEN: usize = 4;

/// A straight-line range of one basic block verified on its own.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub block: usize,
    pub start: usize,
    pub end: usize,
    /// Registers read in the window before being written.
    pub live_in: RegSet,
    /// Registers written in the window and live afterwards.
    pub live_out: RegSet,
    /// All registers live after the window.
    pub live_after: RegSet,
    /// Stack bytes live after the window (index = offset + 512).
    pub live_after_stack: ByteSet,
    /// Packet bytes live after the window.
    pub live_after_packet: ByteSet,
    /// Inferred constant sets for registers on entry.
    pub concrete_pre: Vec<(Reg, Vec<u64>)>,
    /// Pointer facts for registers on entry: type and offset.
    pub ptr_in: Vec<(Reg, MemType, Option<i64>)>,
}

impl WindowSpec {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Instructions a window may contain.
pub fn window_eligible(op: Opcode) -> bool {
    !matches!(op, Opcode::Jmp(..) | Opcode::Exit | Opcode::Call | Opcode::LdMapFd)
}

/// Splits every basic block into disjoint windows of at most `max_len`
/// eligible instructions.
pub fn select_windows(p: &Program, spec: &ProgramSpec, max_len: usize) -> Result<Vec<WindowSpec>, AnalysisError> {
    let max_len = max_len.max(1);
    let ssa = to_ssa(p)?;
    let info = infer_ptr_types(p, &ssa, spec);
    let live = liveness(p, &ssa, &info, spec);
    let values = infer_concrete_values(&ssa, &info);
    let mut out = Vec::new();
    for (b, blk) in ssa.cfg.blocks.iter().enumerate() {
        if !ssa.reachable[b] {
            continue;
        }
        let mut i = blk.start;
        while i < blk.end {
            if !window_eligible(p.insns[i].op) {
                i += 1;
                continue;
            }
            let mut end = i;
            while end < blk.end && end - i < max_len && window_eligible(p.insns[end].op) {
                end += 1;
            }
            let range = i..end;
            i = end;
            if p.insns[range.clone()].iter().all(|x| x.is_nop()) {
                continue;
            }
            let mut live_in = RegSet::EMPTY;
            let mut defs = RegSet::EMPTY;
            for insn in &p.insns[range.clone()] {
                let reads = [(insn.op.reads_dst(), insn.dst), (insn.op.reads_src(), insn.src)];
                for (yes, r) in reads {
                    if yes && !defs.contains(r) {
                        live_in.insert(r);
                    }
                }
                if insn.op.writes_dst() {
                    defs.insert(insn.dst);
                }
            }
            let after = &live.after[range.end - 1];
            let env = ssa.env_before(p, range.start);
            let mut concrete_pre = Vec::new();
            let mut ptr_in = Vec::new();
            for r in Reg::all() {
                let v = env[r.index()];
                if let Some(set) = values.get(&v) {
                    concrete_pre.push((r, set.iter().map(|(_, c)| *c).collect()));
                }
                let f = info.get(v);
                ptr_in.push((r, f.ty, f.off));
            }
            out.push(WindowSpec {
                block: b,
                start: range.start,
                end: range.end,
                live_in,
                live_out: after.regs.intersect(defs),
                live_after: after.regs,
                live_after_stack: after.stack.clone(),
                live_after_packet: after.packet.clone(),
                concrete_pre,
                ptr_in,
            });
        }
    }
    Ok(out)
}
