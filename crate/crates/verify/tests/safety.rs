use std::path::{Path, PathBuf};

use bpfsynth_core::isa::{parse_asm, parse_asm_unchecked, Program};
use bpfsynth_core::{InputKind, MapDef, ProgramSpec, Reg};
use bpfsynth_verify::safety::{check_safety, replays, SafetyReport, ViolationKind};
use bpfsynth_verify::solver::{Solver, SolverConfig};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus/safety")
}

fn check(p: &Program, spec: &ProgramSpec) -> SafetyReport {
    let mut s = Solver::new(SolverConfig::default());
    check_safety(p, spec, Some(&mut s)).unwrap()
}

fn map_spec() -> ProgramSpec {
    ProgramSpec::ctx(16)
        .with_input(Reg::R2, InputKind::Scalar)
        .with_map(MapDef { map_id: 0, key_size: 4, value_size: 8, max_entries: 16 })
}

fn first_kind(r: &SafetyReport) -> ViolationKind {
    r.violations.first().map(|v| v.kind).expect("a violation")
}

#[test]
fn unsafe_corpus_reports_expected_kind_and_replays() {
    let dir = corpus();
    let spec = ProgramSpec::load(&dir.join("spec.toml")).unwrap();
    let mut n = 0;
    for entry in std::fs::read_dir(dir.join("unsafe")).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let expect = text.lines().find_map(|l| l.strip_prefix("// expect: ")).unwrap().trim().to_string();
        let p = parse_asm_unchecked(&text).unwrap();
        let r = check(&p, &spec);
        assert!(!r.is_safe(), "{}", path.display());
        assert_eq!(first_kind(&r).to_string(), expect, "{}: {r}", path.display());
        for c in &r.counterexamples {
            assert!(c.replayed, "{}: counterexample did not replay", path.display());
        }
        n += 1;
    }
    assert_eq!(n, 20);
}

#[test]
fn safe_twins_are_safe() {
    let dir = corpus();
    let spec = ProgramSpec::load(&dir.join("spec.toml")).unwrap();
    for entry in std::fs::read_dir(dir.join("safe")).unwrap() {
        let path = entry.unwrap().path();
        let p = parse_asm(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let r = check(&p, &spec);
        assert!(r.is_safe(), "{}: {r}", path.display());
    }
}

#[test]
fn guarded_lookup_is_safe_and_unguarded_has_null_counterexample() {
    let spec = map_spec();
    let lookup = "bpf_stx_32 r10 -4 r2\nbpf_ld_map_fd r1 0\nbpf_mov64 r2 r10\nbpf_add64 r2 -4\nbpf_call map_lookup_elem\n";
    let bad = parse_asm(&format!("{lookup}bpf_ldx_64 r1 r0 0\nbpf_mov64 r0 0\nbpf_exit")).unwrap();
    let r = check(&bad, &spec);
    assert_eq!(first_kind(&r), ViolationKind::NullDeref);
    let cex = &r.counterexamples[0];
    let key = (cex.input.regs[2] as u32).to_le_bytes().to_vec();
    assert!(!cex.input.maps.get(&0).is_some_and(|m| m.contains_key(&key)));
    assert!(replays(&bad, &spec, &cex.input, ViolationKind::NullDeref));
    let good = parse_asm(&format!("{lookup}bpf_jeq r0 0 1\nbpf_ldx_64 r1 r0 0\nbpf_mov64 r0 0\nbpf_exit")).unwrap();
    assert!(check(&good, &spec).is_safe());
}

#[test]
fn stack_bounds_are_enforced() {
    let spec = ProgramSpec::ctx(0);
    let p = parse_asm("bpf_st_imm32 r10 -516 0\nbpf_mov64 r0 0\nbpf_exit").unwrap();
    assert_eq!(first_kind(&check(&p, &spec)), ViolationKind::OutOfBounds);
    let p = parse_asm("bpf_st_imm32 r10 0 0\nbpf_mov64 r0 0\nbpf_exit").unwrap();
    assert_eq!(first_kind(&check(&p, &spec)), ViolationKind::OutOfBounds);
    let p = parse_asm("bpf_st_imm32 r10 -512 0\nbpf_mov64 r0 0\nbpf_exit").unwrap();
    assert!(check(&p, &spec).is_safe());
}

#[test]
fn symbolic_packet_offset_needs_bounds_check() {
    let spec = ProgramSpec::xdp(32).with_input(Reg::R2, InputKind::Scalar);
    let p = parse_asm("bpf_and64 r2 0x3f\nbpf_add64 r1 r2\nbpf_ldx_8 r0 r1 0\nbpf_exit").unwrap();
    let r = check(&p, &spec);
    assert_eq!(first_kind(&r), ViolationKind::OutOfBounds);
    assert!(r.counterexamples[0].replayed);
    let p = parse_asm("bpf_and64 r2 0x1f\nbpf_add64 r1 r2\nbpf_ldx_8 r0 r1 0\nbpf_exit").unwrap();
    assert!(check(&p, &spec).is_safe());
}

#[test]
fn width_specific_alignment() {
    let spec = ProgramSpec::ctx(0);
    let four = parse_asm("bpf_st_imm32 r10 -12 0\nbpf_mov64 r0 0\nbpf_exit").unwrap();
    assert!(check(&four, &spec).is_safe());
    let eight = parse_asm("bpf_st_imm64 r10 -12 0\nbpf_mov64 r0 0\nbpf_exit").unwrap();
    assert_eq!(first_kind(&check(&eight, &spec)), ViolationKind::Misaligned);
}

#[test]
fn loop_is_rejected_without_solver() {
    let spec = ProgramSpec::ctx(0);
    let p = parse_asm("bpf_mov64 r0 0\nl: bpf_add64 r0 1\nbpf_jlt r0 4 l\nbpf_exit").unwrap();
    let r = check_safety(&p, &spec, None).unwrap();
    assert_eq!(first_kind(&r), ViolationKind::Loop);
    assert_eq!(r.solver_calls, 0);
}

#[test]
fn pointer_rules() {
    let spec = ProgramSpec::xdp(8);
    let leak = parse_asm("bpf_mov64 r0 r10\nbpf_exit").unwrap();
    assert_eq!(first_kind(&check(&leak, &spec)), ViolationKind::PointerLeak);
    let alias = parse_asm("bpf_mov64 r3 r10\nbpf_add64 r3 r1\nbpf_mov64 r0 0\nbpf_exit").unwrap();
    assert_eq!(first_kind(&check(&alias, &spec)), ViolationKind::PointerAlias);
    let cmp = parse_asm("bpf_mov64 r0 0\nbpf_jgt r1 5 1\nbpf_mov64 r0 1\nbpf_exit").unwrap();
    assert_eq!(first_kind(&check(&cmp, &spec)), ViolationKind::PointerCompare);
    let scalar_base = parse_asm("bpf_mov64 r3 4096\nbpf_ldx_8 r0 r3 0\nbpf_exit").unwrap();
    assert_eq!(first_kind(&check(&scalar_base, &spec)), ViolationKind::InvalidBase);
}

#[test]
fn undefined_register_on_one_path() {
    let spec = ProgramSpec::ctx(0).with_input(Reg::R2, InputKind::Scalar);
    let p = parse_asm("bpf_jeq r2 0 1\nbpf_mov64 r3 1\nbpf_mov64 r0 r3\nbpf_exit").unwrap();
    let r = check(&p, &spec);
    assert_eq!(first_kind(&r), ViolationKind::UninitRegister);
    assert!(r.counterexamples[0].replayed);
    assert_eq!(r.counterexamples[0].input.regs[2], 0);
}
