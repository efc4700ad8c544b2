use std::collections::BTreeSet;

use thiserror::Error;

use crate::isa::{Instruction, JmpCond, Opcode, Program};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("instruction {index} jumps outside the program")]
    OutOfBoundsJump { index: usize },
    #[error("control flow contains a cycle")]
    CycleDetected,
    #[error("program is empty")]
    Empty,
    #[error("control flow is not in forward order")]
    NotForward,
}

/// Instructions `start..end` of the program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub end: usize,
}

impl Block {
    pub fn last(&self) -> usize {
        self.end - 1
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// True for the branch-taken edge of a jump, false for fallthrough.
    pub taken: bool,
}

#[derive(Clone, Debug)]
pub struct Cfg {
    pub blocks: Vec<Block>,
    pub edges: Vec<Edge>,
    /// Blocks whose last instruction falls through past the end of the program.
    pub falls_off: Vec<usize>,
    block_of: Vec<usize>,
}

impl Cfg {
    pub fn block_of(&self, insn: usize) -> usize {
        self.block_of[insn]
    }

    pub fn preds(&self, b: usize) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.to == b)
    }

    pub fn succs(&self, b: usize) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.from == b)
    }

    /// True when every edge goes to a later block.
    pub fn is_forward(&self) -> bool {
        self.edges.iter().all(|e| e.to > e.from)
    }

    /// Blocks reachable from the entry.
    pub fn reachable_from_entry(&self) -> Vec<bool> {
        let mut seen = vec![false; self.blocks.len()];
        let mut stack = vec![0];
        while let Some(b) = stack.pop() {
            if std::mem::replace(&mut seen[b], true) {
                continue;
            }
            stack.extend(self.succs(b).map(|(_, e)| e.to));
        }
        seen
    }

    /// Whether the graph has a cycle among blocks reachable from anywhere.
    pub fn has_cycle(&self) -> bool {
        self.topo_order().is_none()
    }

    /// Kahn's algorithm, preferring the lowest-numbered ready block.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let n = self.blocks.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            indeg[e.to] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|b| indeg[*b] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(b) = ready.pop_first() {
            order.push(b);
            for e in self.edges.iter().filter(|e| e.from == b) {
                indeg[e.to] -= 1;
                if indeg[e.to] == 0 {
                    ready.insert(e.to);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Dominator sets, `dom[b][a]` is true when `a` dominates `b`. Requires a
    /// forward graph.
    pub fn dominators(&self) -> Vec<Vec<bool>> {
        let n = self.blocks.len();
        let mut dom = vec![vec![true; n]; n];
        dom[0] = vec![false; n];
        dom[0][0] = true;
        for b in 1..n {
            let mut acc: Option<Vec<bool>> = None;
            for (_, e) in self.preds(b) {
                let d = &dom[e.from];
                acc = Some(match acc {
                    None => d.clone(),
                    Some(a) => a.iter().zip(d).map(|(x, y)| *x && *y).collect(),
                });
            }
            let mut d = acc.unwrap_or_else(|| vec![false; n]);
            d[b] = true;
            dom[b] = d;
        }
        dom
    }

    /// `reach[a][b]` is true when `b` is reachable from `a` along one or more
    /// edges, or `a == b`.
    pub fn reachability(&self) -> Vec<Vec<bool>> {
        let n = self.blocks.len();
        let mut reach = vec![vec![false; n]; n];
        let order = self.topo_order().unwrap_or_else(|| (0..n).collect());
        for &a in order.iter().rev() {
            reach[a][a] = true;
            let succs: Vec<usize> = self.succs(a).map(|(_, e)| e.to).collect();
            for s in succs {
                let row = reach[s].clone();
                for (x, r) in reach[a].iter_mut().zip(row) {
                    *x |= r;
                }
            }
        }
        reach
    }
}

pub fn build_cfg(p: &Program) -> Result<Cfg, AnalysisError> {
    let n = p.len();
    if n == 0 {
        return Err(AnalysisError::Empty);
    }
    let mut leaders = BTreeSet::from([0usize]);
    for (i, insn) in p.insns.iter().enumerate() {
        if let Some(t) = insn.jump_target(i) {
            if t < 0 || t >= n as i64 {
                return Err(AnalysisError::OutOfBoundsJump { index: i });
            }
            leaders.insert(t as usize);
        }
        if insn.op.is_jump() || insn.op == Opcode::Exit {
            leaders.insert(i + 1);
        }
    }
    leaders.retain(|l| *l < n);
    let starts: Vec<usize> = leaders.into_iter().collect();
    let mut blocks = Vec::with_capacity(starts.len());
    let mut block_of = vec![0; n];
    for (bi, &s) in starts.iter().enumerate() {
        let e = starts.get(bi + 1).copied().unwrap_or(n);
        blocks.push(Block { start: s, end: e });
        block_of[s..e].iter_mut().for_each(|x| *x = bi);
    }
    let mut edges = Vec::new();
    let mut falls_off = Vec::new();
    for (bi, b) in blocks.iter().enumerate() {
        let last = b.last();
        let insn = &p.insns[last];
        let fall = |edges: &mut Vec<Edge>, falls_off: &mut Vec<usize>| {
            if last + 1 < n {
                edges.push(Edge { from: bi, to: block_of[last + 1], taken: false });
            } else {
                falls_off.push(bi);
            }
        };
        match insn.op {
            Opcode::Exit => {}
            Opcode::Jmp(JmpCond::Ja, _) => {
                let t = insn.jump_target(last).unwrap() as usize;
                edges.push(Edge { from: bi, to: block_of[t], taken: true });
            }
            Opcode::Jmp(..) => {
                let t = insn.jump_target(last).unwrap() as usize;
                edges.push(Edge { from: bi, to: block_of[t], taken: true });
                fall(&mut edges, &mut falls_off);
            }
            _ => fall(&mut edges, &mut falls_off),
        }
    }
    Ok(Cfg { blocks, edges, falls_off, block_of })
}

/// Reorders blocks topologically so every jump moves forward, inserting
/// unconditional jumps where a fallthrough successor moves away.
pub fn reorder_forward(p: &Program) -> Result<Program, AnalysisError> {
    let cfg = build_cfg(p)?;
    if cfg.is_forward() {
        return Ok(p.clone());
    }
    let order = cfg.topo_order().ok_or(AnalysisError::CycleDetected)?;

    // Lay out blocks, remembering where each lands and which jumps need fixing.
    enum Fix {
        Taken { at: usize, to_block: usize },
        Fall { at: usize, to_block: usize },
    }
    let mut out: Vec<Instruction> = Vec::new();
    let mut new_start = vec![0usize; cfg.blocks.len()];
    let mut fixes = Vec::new();
    for (pos, &b) in order.iter().enumerate() {
        new_start[b] = out.len();
        let blk = cfg.blocks[b];
        out.extend_from_slice(&p.insns[blk.range()]);
        let last = out.len() - 1;
        for (_, e) in cfg.succs(b) {
            if e.taken {
                fixes.push(Fix::Taken { at: last, to_block: e.to });
            } else if order.get(pos + 1) != Some(&e.to) {
                out.push(Instruction::ja(1));
                fixes.push(Fix::Fall { at: out.len() - 1, to_block: e.to });
            }
        }
    }
    for f in fixes {
        let (at, to) = match f {
            Fix::Taken { at, to_block } | Fix::Fall { at, to_block } => (at, to_block),
        };
        let off = new_start[to] as i64 - at as i64 - 1;
        out[at].off = off as i16;
    }
    let q = Program::new(out);
    let check = build_cfg(&q)?;
    debug_assert!(check.is_forward());
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_asm;

    #[test]
    fn straight_line_is_one_block() {
        let cfg = build_cfg(&parse_asm("bpf_mov64 r0 1\nbpf_add64 r0 1\nbpf_exit").unwrap()).unwrap();
        assert_eq!(cfg.blocks.len(), 1);
        assert!(cfg.edges.is_empty());
    }

    #[test]
    fn conditional_jump_splits_blocks() {
        let p = parse_asm("bpf_jeq r1 0 1\nbpf_mov64 r0 1\nbpf_mov64 r0 2\nbpf_exit").unwrap();
        let cfg = build_cfg(&p).unwrap();
        assert_eq!(cfg.blocks.len(), 3);
        assert_eq!(cfg.succs(0).count(), 2);
    }

    #[test]
    fn oob_jump_is_reported() {
        let p = Program { insns: vec![Instruction::ja(5), Instruction::EXIT] };
        assert_eq!(build_cfg(&p).unwrap_err(), AnalysisError::OutOfBoundsJump { index: 0 });
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let p = Program { insns: vec![Instruction::ja(-1), Instruction::EXIT] };
        assert_eq!(reorder_forward(&p).unwrap_err(), AnalysisError::CycleDetected);
    }

    #[test]
    fn dominators_and_reachability_of_a_diamond() {
        let p = parse_asm("bpf_jeq r1 0 2\nbpf_mov64 r0 1\nbpf_ja 1\nbpf_mov64 r0 2\nbpf_exit").unwrap();
        let cfg = build_cfg(&p).unwrap();
        assert_eq!(cfg.blocks.len(), 4);
        let dom = cfg.dominators();
        let reach = cfg.reachability();
        let join = cfg.block_of(4);
        assert!(dom[join][0]);
        assert!(!dom[join][1] && !dom[join][2]);
        assert!(reach[1][join] && reach[2][join]);
        assert!(!reach[1][2]);
    }
}
