//! Rewrite rules that propose a new candidate from the current program.
//!
//! Every rule picks a position uniformly among the positions it applies to and
//! then a replacement uniformly from pools fixed for the whole chain, so the
//! forward and backward probability of a move under one rule are equal.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use bpfsynth_core::{AluOp, Instruction, JmpCond, Opcode, Program, Reg, Size, Src};

use crate::params::{ProposalProbabilities, K_CONTIG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    ReplaceInsn,
    ReplaceOperand,
    ReplaceWithNop,
    MemExchange1,
    MemExchange2,
    ReplaceContiguous,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::ReplaceInsn,
        Rule::ReplaceOperand,
        Rule::ReplaceWithNop,
        Rule::MemExchange1,
        Rule::MemExchange2,
        Rule::ReplaceContiguous,
    ];
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::ReplaceInsn => "replace-insn",
            Rule::ReplaceOperand => "replace-operand",
            Rule::ReplaceWithNop => "replace-nop",
            Rule::MemExchange1 => "mem-exchange-1",
            Rule::MemExchange2 => "mem-exchange-2",
            Rule::ReplaceContiguous => "replace-contiguous",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Form {
    AluImm(bool, AluOp),
    AluReg(bool, AluOp),
    Neg(bool),
    Ldx(Size),
    Stx(Size),
    St(Size),
    Xadd(Size),
    Nop,
}

/// Operand pools and the instruction set new instructions are drawn from:
/// ALU, memory and NOP forms over registers, immediates and offsets taken
/// from the source program.
#[derive(Clone, Debug)]
pub struct Alphabet {
    /// Registers that may be written.
    pub dst: Vec<Reg>,
    /// Registers that may be read.
    pub src: Vec<Reg>,
    pub imms: Vec<i32>,
    /// Memory offsets.
    pub offs: Vec<i16>,
    forms: Vec<(Form, usize)>,
    total: usize,
}

impl Alphabet {
    pub fn from_source(p: &Program) -> Alphabet {
        let mut regs = BTreeSet::from([Reg::R0]);
        let mut imms = BTreeSet::from([0i32, 1, -1]);
        let mut offs = BTreeSet::from([0i16]);
        for i in &p.insns {
            if i.op.writes_dst() || i.op.reads_dst() {
                regs.insert(i.dst);
            }
            if i.op.reads_src() {
                regs.insert(i.src);
            }
            let has_imm = matches!(i.op, Opcode::Alu64(..) | Opcode::Alu32(..) | Opcode::Jmp(..) | Opcode::St(_));
            if has_imm && i.op.uses_imm() {
                if let Ok(v) = i32::try_from(i.imm) {
                    imms.insert(v);
                }
            }
            if i.op.is_mem() {
                offs.insert(i.off);
            }
        }
        let src: Vec<Reg> = regs.iter().copied().collect();
        let dst: Vec<Reg> = regs.iter().copied().filter(|r| *r != Reg::FP).collect();
        Alphabet::new(dst, src, imms.into_iter().collect(), offs.into_iter().collect())
    }

    pub fn new(dst: Vec<Reg>, src: Vec<Reg>, imms: Vec<i32>, offs: Vec<i16>) -> Alphabet {
        assert!(!dst.is_empty() && !src.is_empty() && !imms.is_empty() && !offs.is_empty());
        let (d, s, i, o) = (dst.len(), src.len(), imms.len(), offs.len());
        let mut forms = Vec::new();
        for wide in [true, false] {
            for op in AluOp::ALL {
                if op == AluOp::Neg {
                    forms.push((Form::Neg(wide), d));
                } else {
                    forms.push((Form::AluImm(wide, op), d * i));
                    forms.push((Form::AluReg(wide, op), d * s));
                }
            }
        }
        for sz in Size::ALL {
            forms.push((Form::Ldx(sz), d * s * o));
            forms.push((Form::Stx(sz), s * o * s));
            forms.push((Form::St(sz), s * o * i));
        }
        for sz in [Size::W, Size::DW] {
            forms.push((Form::Xadd(sz), s * o * s));
        }
        forms.push((Form::Nop, 1));
        let total = forms.iter().map(|f| f.1).sum();
        Alphabet { dst, src, imms, offs, forms, total }
    }

    /// Number of distinct instructions new instructions are drawn from.
    pub fn size(&self) -> usize {
        self.total
    }

    /// The `k`-th instruction, `k < size()`.
    pub fn nth(&self, mut k: usize) -> Instruction {
        for &(form, count) in &self.forms {
            if k >= count {
                k -= count;
                continue;
            }
            let mut digit = |n: usize| {
                let d = k % n;
                k /= n;
                d
            };
            let (d, s, i, o) = (self.dst.len(), self.src.len(), self.imms.len(), self.offs.len());
            return match form {
                Form::AluImm(wide, op) => {
                    let (dst, imm) = (self.dst[digit(d)], self.imms[digit(i)]);
                    if wide { Instruction::alu64_imm(op, dst, imm) } else { Instruction::alu32_imm(op, dst, imm) }
                }
                Form::AluReg(wide, op) => {
                    let (dst, src) = (self.dst[digit(d)], self.src[digit(s)]);
                    if wide { Instruction::alu64_reg(op, dst, src) } else { Instruction::alu32_reg(op, dst, src) }
                }
                Form::Neg(wide) => {
                    let dst = self.dst[digit(d)];
                    if wide { Instruction::alu64_imm(AluOp::Neg, dst, 0) } else { Instruction::alu32_imm(AluOp::Neg, dst, 0) }
                }
                Form::Ldx(sz) => {
                    let (dst, base, off) = (self.dst[digit(d)], self.src[digit(s)], self.offs[digit(o)]);
                    Instruction::ldx(sz, dst, base, off)
                }
                Form::Stx(sz) => {
                    let (base, off, src) = (self.src[digit(s)], self.offs[digit(o)], self.src[digit(s)]);
                    Instruction::stx(sz, base, off, src)
                }
                Form::St(sz) => {
                    let (base, off, imm) = (self.src[digit(s)], self.offs[digit(o)], self.imms[digit(i)]);
                    Instruction::st(sz, base, off, imm)
                }
                Form::Xadd(sz) => {
                    let (base, off, src) = (self.src[digit(s)], self.offs[digit(o)], self.src[digit(s)]);
                    Instruction::xadd(sz, base, off, src)
                }
                Form::Nop => Instruction::NOP,
            };
        }
        panic!("instruction index out of range");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Dst,
    Src,
    Imm,
    Off,
}

/// Proposal generator bound to one source program.
#[derive(Clone, Debug)]
pub struct Proposer {
    pub alphabet: Alphabet,
    /// When set, only positions inside these ranges are modified.
    windows: Option<Vec<Range<usize>>>,
}

/// A proposed candidate and the rule that produced it.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub program: Program,
    pub rule: Rule,
    /// Modified positions.
    pub at: Range<usize>,
}

impl Proposer {
    pub fn new(alphabet: Alphabet) -> Proposer {
        Proposer { alphabet, windows: None }
    }

    pub fn for_source(p: &Program) -> Proposer {
        Proposer::new(Alphabet::from_source(p))
    }

    /// Restricts modifications to the given position ranges.
    pub fn with_windows(mut self, windows: Vec<Range<usize>>) -> Proposer {
        self.windows = Some(windows);
        self
    }

    fn window_of(&self, pos: usize) -> Option<usize> {
        match &self.windows {
            None => Some(0),
            Some(ws) => ws.iter().position(|w| w.contains(&pos)),
        }
    }

    fn eligible(&self, p: &Program, pos: usize) -> bool {
        p.insns[pos].op != Opcode::Exit && self.window_of(pos).is_some()
    }

    /// Length of the run rule 6 replaces when starting at `pos`.
    fn run_len(&self, p: &Program, pos: usize) -> usize {
        let mut len = 1;
        while len < K_CONTIG
            && pos + len < p.len()
            && self.eligible(p, pos + len)
            && self.window_of(pos + len) == self.window_of(pos)
        {
            len += 1;
        }
        len
    }

    fn operand_pools(&self, p: &Program, pos: usize) -> Vec<(Field, Vec<i64>)> {
        let a = &self.alphabet;
        let insn = p.insns[pos];
        let regs = |rs: &[Reg]| rs.iter().map(|r| r.index() as i64).collect::<Vec<_>>();
        let (dst, src) = (regs(&a.dst), regs(&a.src));
        let imms: Vec<i64> = a.imms.iter().map(|v| *v as i64).collect();
        let offs: Vec<i64> = a.offs.iter().map(|v| *v as i64).collect();
        let last = p.len() as i64 - 2 - pos as i64;
        let jump_offs = |from: i64| (from..=last).collect::<Vec<_>>();
        let mut v = match insn.op {
            Opcode::Alu64(AluOp::Neg, _) | Opcode::Alu32(AluOp::Neg, _) => vec![(Field::Dst, dst)],
            Opcode::Alu64(_, Src::Imm) | Opcode::Alu32(_, Src::Imm) => vec![(Field::Dst, dst), (Field::Imm, imms)],
            Opcode::Alu64(_, Src::Reg) | Opcode::Alu32(_, Src::Reg) => vec![(Field::Dst, dst), (Field::Src, src)],
            Opcode::Jmp(JmpCond::Ja, _) => vec![(Field::Off, jump_offs(1))],
            Opcode::Jmp(_, Src::Imm) => vec![(Field::Dst, src), (Field::Imm, imms), (Field::Off, jump_offs(0))],
            Opcode::Jmp(_, Src::Reg) => vec![(Field::Dst, src.clone()), (Field::Src, src), (Field::Off, jump_offs(0))],
            Opcode::Ldx(_) => vec![(Field::Dst, dst), (Field::Src, src), (Field::Off, offs)],
            Opcode::Stx(_) | Opcode::Xadd32 | Opcode::Xadd64 => {
                vec![(Field::Dst, src.clone()), (Field::Off, offs), (Field::Src, src)]
            }
            Opcode::St(_) => vec![(Field::Dst, src), (Field::Off, offs), (Field::Imm, imms)],
            Opcode::Lddw | Opcode::LdMapFd => vec![(Field::Dst, dst)],
            Opcode::Call | Opcode::Exit | Opcode::Nop => Vec::new(),
        };
        v.retain(|(_, pool)| !pool.is_empty());
        v
    }

    fn mem_choices(&self, insn: Instruction) -> usize {
        let a = &self.alphabet;
        match insn.op {
            Opcode::Ldx(_) => 4 * a.dst.len(),
            Opcode::Stx(_) | Opcode::St(_) | Opcode::Xadd32 | Opcode::Xadd64 => 4 * a.src.len() + 4 * a.imms.len() + 2 * a.src.len(),
            _ => 0,
        }
    }

    fn widths(insn: Instruction) -> &'static [Size] {
        match insn.op {
            Opcode::Ldx(_) | Opcode::Stx(_) | Opcode::St(_) => &Size::ALL,
            Opcode::Xadd32 | Opcode::Xadd64 => &[Size::W, Size::DW],
            _ => &[],
        }
    }

    /// Positions at which `rule` can be applied to `p`.
    pub fn applicable(&self, p: &Program, rule: Rule) -> Vec<usize> {
        (0..p.len())
            .filter(|&pos| self.eligible(p, pos))
            .filter(|&pos| match rule {
                Rule::ReplaceInsn | Rule::ReplaceWithNop | Rule::ReplaceContiguous => true,
                Rule::ReplaceOperand => !self.operand_pools(p, pos).is_empty(),
                Rule::MemExchange1 | Rule::MemExchange2 => p.insns[pos].op.is_mem(),
            })
            .collect()
    }

    /// Rule-specific choices available at `pos`, each equally likely.
    /// Rule 2 is handled separately because its operand is drawn first.
    fn choices(&self, p: &Program, rule: Rule, pos: usize) -> usize {
        let n = self.alphabet.size();
        match rule {
            Rule::ReplaceInsn => n,
            Rule::ReplaceWithNop => 1,
            Rule::MemExchange1 => self.mem_choices(p.insns[pos]),
            Rule::MemExchange2 => Self::widths(p.insns[pos]).len(),
            Rule::ReplaceContiguous => n.pow(self.run_len(p, pos) as u32),
            Rule::ReplaceOperand => unreachable!("operand choices are per field"),
        }
    }

    fn apply(&self, p: &Program, rule: Rule, pos: usize, choice: usize) -> (Program, Range<usize>) {
        let mut insns = p.insns.clone();
        let insn = insns[pos];
        let a = &self.alphabet;
        let mut at = pos..pos + 1;
        match rule {
            Rule::ReplaceInsn => insns[pos] = a.nth(choice),
            Rule::ReplaceWithNop => insns[pos] = Instruction::NOP,
            Rule::ReplaceContiguous => {
                let len = self.run_len(p, pos);
                let mut c = choice;
                for slot in insns.iter_mut().skip(pos).take(len) {
                    *slot = a.nth(c % a.size());
                    c /= a.size();
                }
                at = pos..pos + len;
            }
            Rule::MemExchange1 => insns[pos] = self.exchange1(insn, choice),
            Rule::MemExchange2 => {
                let sz = Self::widths(insn)[choice];
                insns[pos] = match insn.op {
                    Opcode::Ldx(_) => Instruction::ldx(sz, insn.dst, insn.src, insn.off),
                    Opcode::Stx(_) => Instruction::stx(sz, insn.dst, insn.off, insn.src),
                    Opcode::St(_) => Instruction::st(sz, insn.dst, insn.off, insn.imm as i32),
                    _ => Instruction::xadd(sz, insn.dst, insn.off, insn.src),
                };
            }
            Rule::ReplaceOperand => unreachable!("operand moves use set_field"),
        }
        (Program::new(insns), at)
    }

    /// New width and new value operand; base and offset are kept.
    fn exchange1(&self, insn: Instruction, mut c: usize) -> Instruction {
        let a = &self.alphabet;
        let (base, off) = if insn.op.is_load() { (insn.src, insn.off) } else { (insn.dst, insn.off) };
        if insn.op.is_load() {
            let sz = Size::ALL[c / a.dst.len()];
            return Instruction::ldx(sz, a.dst[c % a.dst.len()], base, off);
        }
        let s = a.src.len();
        if c < 4 * s {
            return Instruction::stx(Size::ALL[c / s], base, off, a.src[c % s]);
        }
        c -= 4 * s;
        let i = a.imms.len();
        if c < 4 * i {
            return Instruction::st(Size::ALL[c / i], base, off, a.imms[c % i]);
        }
        c -= 4 * i;
        Instruction::xadd([Size::W, Size::DW][c / s], base, off, a.src[c % s])
    }

    fn set_field(p: &Program, pos: usize, field: Field, value: i64) -> Program {
        let mut insns = p.insns.clone();
        let i = &mut insns[pos];
        match field {
            Field::Dst => i.dst = Reg::new(value as u8).expect("register pool"),
            Field::Src => i.src = Reg::new(value as u8).expect("register pool"),
            Field::Imm => i.imm = value,
            Field::Off => i.off = value as i16,
        }
        Program::new(insns)
    }

    /// Draws one proposal. Rules that do not apply to `p` are redrawn; if no
    /// rule applies the program is returned unchanged.
    pub fn propose(&self, p: &Program, probs: &ProposalProbabilities, rng: &mut impl Rng) -> Proposal {
        let weights = probs.as_array();
        let Ok(dist) = WeightedIndex::new(weights) else {
            return Proposal { program: p.clone(), rule: Rule::ReplaceInsn, at: 0..0 };
        };
        for _ in 0..64 {
            let rule = Rule::ALL[dist.sample(rng)];
            let positions = self.applicable(p, rule);
            if positions.is_empty() {
                continue;
            }
            let pos = positions[rng.gen_range(0..positions.len())];
            if rule == Rule::ReplaceOperand {
                let pools = self.operand_pools(p, pos);
                let (field, pool) = &pools[rng.gen_range(0..pools.len())];
                let v = pool[rng.gen_range(0..pool.len())];
                return Proposal { program: Self::set_field(p, pos, *field, v), rule, at: pos..pos + 1 };
            }
            let choice = if rule == Rule::ReplaceContiguous {
                let n = self.alphabet.size();
                (0..self.run_len(p, pos)).rev().fold(0, |acc, _| acc * n + rng.gen_range(0..n))
            } else {
                rng.gen_range(0..self.choices(p, rule, pos))
            };
            let (program, at) = self.apply(p, rule, pos, choice);
            return Proposal { program, rule, at };
        }
        Proposal { program: p.clone(), rule: Rule::ReplaceInsn, at: 0..0 }
    }

    /// Exact distribution of the programs `rule` produces from `p`, by
    /// enumerating every position and choice. Intended for small alphabets.
    pub fn outcomes(&self, p: &Program, rule: Rule) -> HashMap<Program, f64> {
        let mut out: HashMap<Program, f64> = HashMap::new();
        let positions = self.applicable(p, rule);
        let pp = 1.0 / positions.len().max(1) as f64;
        for pos in positions {
            if rule == Rule::ReplaceOperand {
                let pools = self.operand_pools(p, pos);
                for (field, pool) in &pools {
                    let w = pp / pools.len() as f64 / pool.len() as f64;
                    for v in pool {
                        *out.entry(Self::set_field(p, pos, *field, *v)).or_default() += w;
                    }
                }
                continue;
            }
            let n = self.choices(p, rule, pos);
            for c in 0..n {
                *out.entry(self.apply(p, rule, pos, c).0).or_default() += pp / n as f64;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpfsynth_core::isa::parse_asm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Proposer {
        Proposer::new(Alphabet::new(vec![Reg::R0, Reg::R1], vec![Reg::R0, Reg::R1, Reg::FP], vec![0, 1], vec![-8, 0]))
    }

    #[test]
    fn alphabet_enumerates_distinct_instructions() {
        let a = tiny().alphabet;
        let all: BTreeSet<Instruction> = (0..a.size()).map(|k| a.nth(k)).collect();
        assert_eq!(all.len(), a.size());
        assert!(all.iter().all(|i| !(i.op.writes_dst() && i.dst == Reg::FP)));
    }

    #[test]
    fn operand_rule_example() {
        let p = parse_asm("bpf_add64 r1 4\nbpf_exit").unwrap();
        let pr = Proposer::for_source(&p);
        let out = pr.outcomes(&p, Rule::ReplaceOperand);
        assert!(out.contains_key(&parse_asm("bpf_add64 r1 1\nbpf_exit").unwrap()));
        assert!(out.keys().all(|q| q.insns[0].op == p.insns[0].op));
    }

    #[test]
    fn width_rule_example() {
        let p = parse_asm("bpf_ldx_16 r1 r2 -4\nbpf_exit").unwrap();
        let out = Proposer::for_source(&p).outcomes(&p, Rule::MemExchange2);
        assert!(out.contains_key(&parse_asm("bpf_ldx_32 r1 r2 -4\nbpf_exit").unwrap()));
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn exchange1_keeps_address() {
        let p = parse_asm("bpf_ldx_16 r1 r2 -4\nbpf_stx_32 r10 -8 r1\nbpf_exit").unwrap();
        let pr = Proposer::for_source(&p);
        for q in pr.outcomes(&p, Rule::MemExchange1).keys() {
            let changed: Vec<_> = (0..2).filter(|&k| q.insns[k] != p.insns[k]).collect();
            for k in changed {
                let (a, b) = (p.insns[k], q.insns[k]);
                assert_eq!(a.op.is_load(), b.op.is_load());
                let base = |i: Instruction| if i.op.is_load() { i.src } else { i.dst };
                assert_eq!((base(a), a.off), (base(b), b.off));
            }
        }
        let coalesced = parse_asm("bpf_ldx_16 r1 r2 -4\nbpf_st_imm64 r10 -8 0\nbpf_exit").unwrap();
        assert!(pr.outcomes(&p, Rule::MemExchange1).contains_key(&coalesced));
    }

    #[test]
    fn nop_rule_adds_one_nop() {
        let p = parse_asm("bpf_mov64 r0 1\nbpf_add64 r0 2\nbpf_exit").unwrap();
        for q in Proposer::for_source(&p).outcomes(&p, Rule::ReplaceWithNop).keys() {
            assert_eq!(q.len(), p.len());
            assert_eq!(q.insns.iter().filter(|i| i.is_nop()).count(), 1);
        }
    }

    #[test]
    fn rules_never_write_fp_or_jump_backwards() {
        let p = parse_asm("bpf_mov64 r0 0\nbpf_jeq r1 0 1\nbpf_mov64 r0 r10\nbpf_stx_64 r10 -8 r0\nbpf_exit").unwrap();
        let pr = Proposer::for_source(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = crate::params::shipped_sets()[1].probs;
        for _ in 0..5000 {
            let q = pr.propose(&p, &probs, &mut rng).program;
            assert!(q.validate().is_ok(), "{q}");
            for (at, i) in q.insns.iter().enumerate() {
                if let Some(t) = i.jump_target(at) {
                    assert!(t > at as i64);
                }
            }
            assert_eq!(q.insns.last(), Some(&Instruction::EXIT));
        }
    }

    #[test]
    fn window_mode_stays_in_windows() {
        let p = parse_asm("bpf_mov64 r0 0\nbpf_mov64 r1 1\nbpf_mov64 r2 2\nbpf_mov64 r3 3\nbpf_exit").unwrap();
        let pr = Proposer::for_source(&p).with_windows(vec![1..3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs = crate::params::shipped_sets()[1].probs;
        for _ in 0..2000 {
            let prop = pr.propose(&p, &probs, &mut rng);
            assert!(prop.at.start >= 1 && prop.at.end <= 3);
            assert_eq!(prop.program.insns[0], p.insns[0]);
            assert_eq!(prop.program.insns[3], p.insns[3]);
        }
    }
}
