use bpfsynth_core::analysis::{select_windows, ByteSet, RegSet, WindowSpec};
use bpfsynth_core::interpreter::{default_fuel, execute, random_input};
use bpfsynth_core::isa::{parse_asm, Program};
use bpfsynth_core::random::{random_program, random_program_spec, RandomProgramConfig};
use bpfsynth_core::{InputKind, MapDef, ProgramSpec, Reg};
use bpfsynth_verify::solver::{differs, solver_outputs, Equivalence, EquivalenceChecker, Solver, SolverConfig, Verdict};
use bpfsynth_verify::vcgen::{equivalence_query, window_query, window_query_with, VcOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn solver() -> Solver {
    Solver::new(SolverConfig::default())
}

fn asm(s: &str) -> Program {
    parse_asm(s).unwrap()
}

fn equiv(a: &Program, b: &Program, spec: &ProgramSpec) -> Equivalence {
    let mut c = EquivalenceChecker::new(a, spec, SolverConfig::default());
    c.check(b).unwrap()
}

#[test]
fn solver_model_matches_interpreter() {
    let spec = random_program_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut s = solver();
    let mut checked = 0;
    for _ in 0..60 {
        let p = random_program(&mut rng, RandomProgramConfig::default());
        for _ in 0..3 {
            let input = random_input(&spec, &mut rng);
            let Ok(out) = execute(&p, &spec, &input, default_fuel(&p)) else { continue };
            let (r0, packet) = solver_outputs(&mut s, &p, &spec, &input).unwrap().expect("model");
            assert_eq!(r0, out.r0, "{p}");
            assert_eq!(packet, out.packet, "{p}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn identical_programs_are_equivalent() {
    let spec = random_program_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let p = random_program(&mut rng, RandomProgramConfig::default());
        assert_eq!(equiv(&p, &p, &spec), Equivalence::Equivalent, "{p}");
    }
}

#[test]
fn coalesced_zero_stores_are_equivalent() {
    let spec = ProgramSpec::xdp(0);
    let a = asm("bpf_mov64 r1 0\nbpf_stx_32 r10 -4 r1\nbpf_stx_32 r10 -8 r1\nbpf_ldx_64 r0 r10 -8\nbpf_exit");
    let b = asm("bpf_st_imm64 r10 -8 0\nbpf_ldx_64 r0 r10 -8\nbpf_exit");
    assert_eq!(equiv(&a, &b, &spec), Equivalence::Equivalent);
    let c = asm("bpf_st_imm32 r10 -8 0\nbpf_ldx_64 r0 r10 -8\nbpf_exit");
    assert!(matches!(equiv(&a, &c, &spec), Equivalence::Unknown(_) | Equivalence::Different | Equivalence::Counterexample(_)));
}

#[test]
fn different_constants_give_replayable_counterexample() {
    let spec = ProgramSpec::xdp(4);
    let a = asm("bpf_mov64 r0 1\nbpf_exit");
    let b = asm("bpf_mov64 r0 2\nbpf_exit");
    match equiv(&a, &b, &spec) {
        Equivalence::Counterexample(input) => assert!(differs(&a, &b, &spec, &input)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn counterexample_distinguishes_input_dependent_programs() {
    let spec = ProgramSpec::ctx(0).with_input(Reg::R2, InputKind::Scalar);
    let a = asm("bpf_mov64 r0 r2\nbpf_and64 r0 0xff\nbpf_exit");
    let b = asm("bpf_mov64 r0 r2\nbpf_and64 r0 0x7f\nbpf_exit");
    let Equivalence::Counterexample(input) = equiv(&a, &b, &spec) else { panic!() };
    assert_ne!(input.regs[2] & 0x80, 0);
}

#[test]
fn packet_writes_are_compared_for_xdp() {
    let spec = ProgramSpec::xdp(8);
    let a = asm("bpf_mov64 r0 0\nbpf_st_imm8 r1 3 7\nbpf_exit");
    let b = asm("bpf_mov64 r0 0\nbpf_exit");
    let Equivalence::Counterexample(input) = equiv(&a, &b, &spec) else { panic!() };
    assert_ne!(input.packet[3], 7);
    let c = asm("bpf_st_imm8 r1 3 7\nbpf_mov64 r0 0\nbpf_exit");
    assert_eq!(equiv(&a, &c, &spec), Equivalence::Equivalent);
}

#[test]
fn packet_loads_merge_into_wider_load() {
    let spec = ProgramSpec::xdp(8);
    let a = asm("bpf_ldx_8 r0 r1 0\nbpf_ldx_8 r2 r1 1\nbpf_lsh64 r2 8\nbpf_or64 r0 r2\nbpf_exit");
    let b = asm("bpf_ldx_16 r0 r1 0\nbpf_exit");
    assert_eq!(equiv(&a, &b, &spec), Equivalence::Equivalent);
}

#[test]
fn xadd_matches_load_add_store() {
    let spec = ProgramSpec::ctx(0).with_input(Reg::R2, InputKind::Scalar);
    let a = asm(
        "bpf_stx_64 r10 -8 r2\nbpf_ldx_64 r3 r10 -8\nbpf_add64 r3 5\nbpf_stx_64 r10 -8 r3\nbpf_ldx_64 r0 r10 -8\nbpf_exit",
    );
    let b = asm("bpf_stx_64 r10 -8 r2\nbpf_mov64 r3 5\nbpf_xadd64 r10 -8 r3\nbpf_ldx_64 r0 r10 -8\nbpf_exit");
    assert_eq!(equiv(&a, &b, &spec), Equivalence::Equivalent);
}

fn map_spec() -> ProgramSpec {
    ProgramSpec::ctx(0)
        .with_input(Reg::R2, InputKind::Scalar)
        .with_map(MapDef { map_id: 0, key_size: 4, value_size: 8, max_entries: 16 })
}

const LOOKUP_PREFIX: &str = "bpf_stx_32 r10 -4 r2\nbpf_ld_map_fd r1 0\nbpf_mov64 r2 r10\nbpf_add64 r2 -4\n";

#[test]
fn map_lookup_through_equal_keys_is_shared() {
    let spec = map_spec();
    let a = asm(&format!(
        "{LOOKUP_PREFIX}bpf_call map_lookup_elem\nbpf_mov64 r6 r0\nbpf_mov64 r0 0\nbpf_jeq r6 0 1\nbpf_ldx_64 r0 r6 0\nbpf_exit"
    ));
    // same key built differently
    let b = asm(&format!(
        "bpf_mov64 r3 r2\nbpf_stx_32 r10 -4 r3\nbpf_ld_map_fd r1 0\nbpf_mov64 r2 r10\nbpf_add64 r2 -4\nbpf_call map_lookup_elem\nbpf_mov64 r6 r0\nbpf_mov64 r0 0\nbpf_jeq r6 0 1\nbpf_ldx_64 r0 r6 0\nbpf_exit"
    ));
    assert_eq!(equiv(&a, &b, &spec), Equivalence::Equivalent);
    let c = asm(&format!(
        "bpf_add64 r2 1\n{LOOKUP_PREFIX}bpf_call map_lookup_elem\nbpf_mov64 r6 r0\nbpf_mov64 r0 0\nbpf_jeq r6 0 1\nbpf_ldx_64 r0 r6 0\nbpf_exit"
    ));
    match equiv(&a, &c, &spec) {
        Equivalence::Counterexample(input) => assert!(differs(&a, &c, &spec, &input)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn map_update_then_lookup_reads_new_value() {
    let spec = map_spec();
    let a = asm(
        "bpf_stx_32 r10 -4 r2\nbpf_st_imm64 r10 -16 42\nbpf_ld_map_fd r1 0\nbpf_mov64 r2 r10\nbpf_add64 r2 -4\nbpf_mov64 r3 r10\nbpf_add64 r3 -16\nbpf_mov64 r4 0\nbpf_call map_update_elem\n\
         bpf_ld_map_fd r1 0\nbpf_mov64 r2 r10\nbpf_add64 r2 -4\nbpf_call map_lookup_elem\nbpf_mov64 r6 r0\nbpf_mov64 r0 0\nbpf_jeq r6 0 1\nbpf_ldx_64 r0 r6 0\nbpf_exit",
    );
    let b = asm(
        "bpf_stx_32 r10 -4 r2\nbpf_st_imm64 r10 -16 42\nbpf_ld_map_fd r1 0\nbpf_mov64 r2 r10\nbpf_add64 r2 -4\nbpf_mov64 r3 r10\nbpf_add64 r3 -16\nbpf_mov64 r4 0\nbpf_call map_update_elem\nbpf_mov64 r0 42\nbpf_exit",
    );
    assert_eq!(equiv(&a, &b, &spec), Equivalence::Equivalent);
    // the map state differs if the update is dropped
    let c = asm("bpf_mov64 r0 42\nbpf_exit");
    assert!(!matches!(equiv(&b, &c, &spec), Equivalence::Equivalent));
}

#[test]
fn map_delete_then_lookup_misses() {
    let spec = map_spec();
    let a = asm(&format!(
        "{LOOKUP_PREFIX}bpf_call map_delete_elem\nbpf_ld_map_fd r1 0\nbpf_mov64 r2 r10\nbpf_add64 r2 -4\nbpf_call map_lookup_elem\n\
         bpf_mov64 r6 r0\nbpf_mov64 r0 1\nbpf_jeq r6 0 1\nbpf_mov64 r0 2\nbpf_exit"
    ));
    let b = asm(&format!("{LOOKUP_PREFIX}bpf_call map_delete_elem\nbpf_mov64 r0 1\nbpf_exit"));
    assert_eq!(equiv(&a, &b, &spec), Equivalence::Equivalent);
}

#[test]
fn delete_return_value_depends_on_presence() {
    let spec = map_spec();
    let a = asm(&format!("{LOOKUP_PREFIX}bpf_call map_delete_elem\nbpf_exit"));
    let b = asm(&format!("{LOOKUP_PREFIX}bpf_call map_delete_elem\nbpf_mov64 r0 0\nbpf_exit"));
    match equiv(&a, &b, &spec) {
        Equivalence::Counterexample(input) => {
            assert!(differs(&a, &b, &spec, &input));
            assert!(input.maps[&0].is_empty() || input.maps[&0].keys().all(|k| k[..] != (input.regs[2] as u32).to_le_bytes()));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn helper_results_are_consistent_across_programs() {
    let spec = ProgramSpec::ctx(0);
    let a = asm("bpf_call get_prandom_u32\nbpf_mov64 r6 r0\nbpf_call get_prandom_u32\nbpf_add64 r0 r6\nbpf_exit");
    let b = asm("bpf_call get_prandom_u32\nbpf_mov64 r6 r0\nbpf_call get_prandom_u32\nbpf_add64 r6 r0\nbpf_mov64 r0 r6\nbpf_exit");
    assert_eq!(equiv(&a, &b, &spec), Equivalence::Equivalent);
    let c = asm("bpf_call get_prandom_u32\nbpf_add64 r0 r0\nbpf_exit");
    match equiv(&a, &c, &spec) {
        Equivalence::Counterexample(input) => assert!(differs(&a, &c, &spec, &input)),
        other => panic!("{other:?}"),
    }
}

fn manual_window(start: usize, end: usize, live_after: &[Reg]) -> WindowSpec {
    let mut la = RegSet::default();
    for r in live_after {
        la.insert(*r);
    }
    WindowSpec {
        block: 0,
        start,
        end,
        live_in: RegSet::default(),
        live_out: la,
        live_after: la,
        live_after_stack: ByteSet::new(0),
        live_after_packet: ByteSet::new(0),
        concrete_pre: Vec::new(),
        ptr_in: Vec::new(),
    }
}

#[test]
fn arsh_window_needs_mask_precondition() {
    let spec = ProgramSpec::ctx(0).with_input(Reg::R2, InputKind::Scalar).with_input(Reg::R3, InputKind::Scalar);
    let p = asm("bpf_mov64 r0 r2\nbpf_and64 r0 r3\nbpf_rsh64 r0 21\nbpf_exit");
    let w2 = asm("bpf_mov32 r0 r2\nbpf_arsh64 r0 21").insns;
    let mut ws = manual_window(0, 3, &[Reg::R0]);
    let mut s = solver();
    let q = window_query(&p, &w2, &ws, &spec, VcOptions::default()).unwrap();
    assert!(matches!(s.check(&q).unwrap(), Verdict::Sat(_)));
    ws.concrete_pre = vec![(Reg::R3, vec![0x0000_0000_ffe0_0000])];
    let q = window_query(&p, &w2, &ws, &spec, VcOptions::default()).unwrap();
    assert_eq!(s.check(&q).unwrap(), Verdict::Unsat);
}

#[test]
fn inferred_constant_enables_window_rewrite() {
    let spec = ProgramSpec::ctx(0).with_input(Reg::R1, InputKind::Scalar);
    let p = asm("bpf_mov64 r3 4\nbpf_ja 0\nbpf_mul64 r1 r3\nbpf_mov64 r0 r1\nbpf_exit");
    let windows = select_windows(&p, &spec, 1).unwrap();
    let ws = windows.iter().find(|w| w.start == 2).unwrap();
    assert!(ws.concrete_pre.contains(&(Reg::R3, vec![4])));
    let w2 = asm("bpf_lsh64 r1 2").insns;
    let mut s = solver();
    let q = window_query(&p, &w2, ws, &spec, VcOptions::default()).unwrap();
    assert_eq!(s.check(&q).unwrap(), Verdict::Unsat);
    let q = window_query_with(&p, &w2, ws, &spec, VcOptions::default(), false).unwrap();
    assert!(matches!(s.check(&q).unwrap(), Verdict::Sat(_)));
}

#[test]
fn window_unsat_implies_program_equivalence() {
    let spec = random_program_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = solver();
    let mut proven = 0;
    for _ in 0..150 {
        let p = random_program(&mut rng, RandomProgramConfig { allow_jumps: false, ..Default::default() });
        for ws in select_windows(&p, &spec, 4).unwrap() {
            // candidate: delete one instruction of the window
            for drop in ws.start..ws.end {
                let w2: Vec<_> = (ws.start..ws.end).filter(|i| *i != drop).map(|i| p.insns[i]).collect();
                let Ok(q) = window_query(&p, &w2, &ws, &spec, VcOptions::default()) else { continue };
                if s.check(&q).unwrap() != Verdict::Unsat {
                    continue;
                }
                proven += 1;
                let p2 = bpfsynth_verify::vcgen::splice(&p, &ws, &w2).unwrap();
                assert_eq!(equiv(&p, &p2, &spec), Equivalence::Equivalent, "{p}\nvs\n{p2}");
            }
        }
    }
    assert!(proven > 20, "only {proven} window rewrites proven");
}

#[test]
fn offset_concretization_preserves_verdicts() {
    let spec = random_program_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut s = solver();
    let off = VcOptions { offset_concretize: false, ..VcOptions::default() };
    for _ in 0..40 {
        let a = random_program(&mut rng, RandomProgramConfig::default());
        let b = if rng_bool(&mut rng) { a.clone() } else { random_program(&mut rng, RandomProgramConfig::default()) };
        let qa = equivalence_query(&a, &b, &spec, VcOptions::default()).unwrap();
        let qb = equivalence_query(&a, &b, &spec, off).unwrap();
        let va = s.check(&qa).unwrap().is_unsat();
        let vb = s.check(&qb).unwrap().is_unsat();
        assert_eq!(va, vb, "{a}\nvs\n{b}");
    }
}

fn rng_bool(rng: &mut ChaCha8Rng) -> bool {
    use rand::Rng;
    rng.gen_bool(0.5)
}

#[test]
fn type_tables_ignore_cross_region_aliasing() {
    let spec = ProgramSpec::xdp(8);
    let a = asm("bpf_st_imm64 r10 -8 5\nbpf_ldx_8 r0 r1 0\nbpf_ldx_64 r2 r10 -8\nbpf_add64 r0 r2\nbpf_exit");
    let b = asm("bpf_ldx_8 r0 r1 0\nbpf_add64 r0 5\nbpf_exit");
    for opts in [VcOptions::default(), VcOptions::NONE] {
        let q = equivalence_query(&a, &b, &spec, opts).unwrap();
        assert_eq!(solver().check(&q).unwrap(), Verdict::Unsat);
    }
}
