use bpfsynth_core::analysis::{
    build_cfg, canonicalize, infer_ptr_types, reorder_forward, resolve_at_read, to_ssa, MemType, WriteEntry,
};
use bpfsynth_core::interpreter::{default_fuel, execute, execute_traced, gen_tests, random_input, MachineState, Region};
use bpfsynth_core::isa::{parse_asm, Instruction};
use bpfsynth_core::random::{random_program, random_program_spec, RandomProgramConfig};
use bpfsynth_core::{InputKind, Program, ProgramSpec, Reg};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lays blocks out in a random order, keeping the entry first and patching
/// fallthroughs with unconditional jumps.
fn scramble(p: &Program, rng: &mut ChaCha8Rng) -> Program {
    let cfg = build_cfg(p).unwrap();
    let mut order: Vec<usize> = (1..cfg.blocks.len()).collect();
    order.shuffle(rng);
    order.insert(0, 0);
    let mut out: Vec<Instruction> = Vec::new();
    let mut start = vec![0; cfg.blocks.len()];
    let mut fixes = Vec::new();
    for (pos, &b) in order.iter().enumerate() {
        start[b] = out.len();
        out.extend_from_slice(&p.insns[cfg.blocks[b].range()]);
        let last = out.len() - 1;
        for (_, e) in cfg.succs(b) {
            if e.taken {
                fixes.push((last, e.to));
            } else if order.get(pos + 1) != Some(&e.to) {
                out.push(Instruction::ja(1));
                fixes.push((out.len() - 1, e.to));
            }
        }
    }
    for (at, to) in fixes {
        out[at].off = (start[to] as i64 - at as i64 - 1) as i16;
    }
    Program::new(out)
}

#[test]
fn reorder_preserves_semantics_on_scrambled_programs() {
    let spec = random_program_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut backward = 0;
    for _ in 0..300 {
        let p = random_program(&mut rng, RandomProgramConfig::default());
        let s = scramble(&p, &mut rng);
        if !build_cfg(&s).unwrap().is_forward() {
            backward += 1;
        }
        let r = reorder_forward(&s).unwrap();
        assert!(build_cfg(&r).unwrap().is_forward());
        for _ in 0..5 {
            let input = random_input(&spec, &mut rng);
            let want = execute(&p, &spec, &input, 4 * p.len());
            let got = execute(&r, &spec, &input, 4 * r.len());
            assert_eq!(got.is_ok(), want.is_ok());
            if let (Ok(a), Ok(b)) = (got, want) {
                assert_eq!(a, b);
            }
        }
    }
    assert!(backward > 50, "scrambling produced only {backward} backward programs");
}

#[test]
fn backward_jump_without_cycle_is_reordered_exhaustively() {
    let spec = ProgramSpec::ctx(0).with_input(Reg::R2, InputKind::Scalar);
    let p = parse_asm(
        "
        bpf_ja 3
        mid: bpf_mov64 r0 r2
        bpf_add64 r0 7
        bpf_exit
        bpf_and64 r2 0xff
        bpf_jgt r2 100 mid
        bpf_ja mid
        ",
    )
    .unwrap();
    assert!(!build_cfg(&p).unwrap().is_forward());
    let r = reorder_forward(&p).unwrap();
    assert!(build_cfg(&r).unwrap().is_forward());
    for v in 0..256u64 {
        let mut s = MachineState::new(&spec);
        s.regs[2] = v;
        assert_eq!(execute(&p, &spec, &s, 32), execute(&r, &spec, &s, 32));
    }
}

#[test]
fn pointer_types_and_offsets_match_runtime() {
    let spec = random_program_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..1000 {
        let p = random_program(&mut rng, RandomProgramConfig::default());
        let ssa = to_ssa(&p).unwrap();
        let info = infer_ptr_types(&p, &ssa, &spec);
        let input = random_input(&spec, &mut rng);
        let mut trace = Vec::new();
        let _ = execute_traced(&p, &spec, &input, p.len(), Some(&mut trace));
        for acc in trace {
            let claimed = info.access(&p, &ssa, acc.at).unwrap();
            let region_ok = match claimed.ty {
                MemType::Stack => acc.region == Region::Stack,
                MemType::Packet | MemType::Ctx => acc.region == Region::Packet,
                MemType::MapValue(_) => acc.region == Region::MapValue,
                MemType::Unknown => true,
                other => panic!("dereference through {other} at {}", acc.at),
            };
            assert!(region_ok, "{p}: insn {} claimed {} got {:?}", acc.at, claimed.ty, acc.region);
            if let Some(off) = claimed.off {
                assert_eq!(off, acc.offset, "{p}: insn {}", acc.at);
            }
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn dead_code_shares_cache_key() {
    let spec = ProgramSpec::xdp(8);
    let p = parse_asm("bpf_load_8 r0 r1 0\nbpf_exit").unwrap();
    let q = parse_asm("bpf_mov64 r4 9\nbpf_load_8 r0 r1 0\nbpf_mov64 r5 r0\nbpf_exit").unwrap();
    assert_eq!(canonicalize(&p, &spec), canonicalize(&q, &spec));
}

#[test]
fn canonical_form_preserves_semantics() {
    let spec = random_program_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let p = random_program(&mut rng, RandomProgramConfig::default());
        let Ok(suite) = gen_tests(&p, &spec, 4, 1) else { continue };
        let c = canonicalize(&p, &spec);
        for t in &suite {
            let got = execute(&c, &spec, &t.input, default_fuel(&c)).unwrap();
            assert!(got.same_as(&t.expected, &spec), "{p}\n=>\n{c}");
        }
    }
}

#[test]
fn example_one_suite_stores_zero() {
    let spec = ProgramSpec::xdp(0);
    let p = parse_asm("bpf_mov64 r1 0\nbpf_stx_32 r10 -4 r1\nbpf_stx_32 r10 -8 r1\nbpf_mov64 r0 0\nbpf_exit").unwrap();
    let suite = gen_tests(&p, &spec, 16, 9).unwrap();
    let mut probe = p.clone();
    probe.insns.insert(4, Instruction::ldx(bpfsynth_core::Size::DW, Reg::R0, Reg::FP, -8));
    for t in &suite {
        assert_eq!(execute(&probe, &spec, &t.input, 16).unwrap().r0, 0);
    }
}

proptest! {
    #[test]
    fn dominating_latest_write_needs_no_clauses(n in 2usize..6, off in -64i64..0) {
        // a chain of blocks: every earlier block dominates later ones
        let body: String = (0..n).map(|_| "bpf_jeq r1 0 0\n").collect();
        let p = parse_asm(&format!("{body}bpf_exit")).unwrap();
        let cfg = build_cfg(&p).unwrap();
        let (dom, reach) = (cfg.dominators(), cfg.reachability());
        let reader = cfg.blocks.len() - 1;
        let entries = [WriteEntry { block: reader - 1, offset: off }, WriteEntry { block: 0, offset: off - 8 }];
        let r = resolve_at_read(reader, &entries, &dom, &reach);
        prop_assert_eq!(r.concrete, Some(off));
        prop_assert!(r.clauses.is_empty());
    }
}
