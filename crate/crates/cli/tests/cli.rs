use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bpfsynth_core::isa::{decode, parse_asm};
use tempfile::TempDir;

const CTX_SPEC: &str = "prog_type = \"ctx\"\npacket_size = 16\n\n[input_registers]\nr1 = \"ctx\"\nr2 = \"scalar\"\n";
const XDP_SPEC: &str = "prog_type = \"xdp\"\npacket_size = 16\n\n[input_registers]\nr1 = \"packet\"\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bpfsynth"));
    for (k, _) in std::env::vars() {
        if k.starts_with("BPFSYNTH_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(c: &mut Command) -> (i32, String) {
    let Output { status, stdout, stderr } = c.output().unwrap();
    let mut text = String::from_utf8_lossy(&stdout).into_owned();
    text.push_str(&String::from_utf8_lossy(&stderr));
    (status.code().unwrap_or(-1), text)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn corpus(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(rel)
}

#[test]
fn verify_program_against_itself() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_mov64 r0 r2\nbpf_add64 r0 7\nbpf_exit\n");
    let (code, out) = run(bin().arg("verify").arg(&a).arg(&a).arg("--spec").arg(&spec).arg("--safety"));
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("EQUIVALENT") && out.contains("SAFE"), "{out}");
}

#[test]
fn verify_coalesced_stores() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", XDP_SPEC);
    let a = write(d.path(), "a.asm", "bpf_mov64 r1 0\nbpf_stx_32 r10 -4 r1\nbpf_stx_32 r10 -8 r1\nbpf_ldx_64 r0 r10 -8\nbpf_exit\n");
    let b = write(d.path(), "b.asm", "bpf_st_imm64 r10 -8 0\nbpf_ldx_64 r0 r10 -8\nbpf_exit\n");
    let (code, out) = run(bin().arg("verify").arg(&a).arg(&b).arg("--spec").arg(&spec));
    assert_eq!(code, 0, "{out}");
    assert!(out.starts_with("EQUIVALENT"), "{out}");
}

#[test]
fn counterexample_replays_through_interpret() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_mov64 r0 1\nbpf_exit\n");
    let b = write(d.path(), "b.asm", "bpf_mov64 r0 2\nbpf_exit\n");
    let cex = d.path().join("cex.toml");
    let (code, out) = run(bin().arg("verify").arg(&a).arg(&b).arg("--spec").arg(&spec).arg("--cex").arg(&cex));
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("NOT_EQUIVALENT"), "{out}");
    let (ca, oa) = run(bin().arg("interpret").arg(&a).arg("--spec").arg(&spec).arg("--state").arg(&cex));
    let (cb, ob) = run(bin().arg("interpret").arg(&b).arg("--spec").arg(&spec).arg("--state").arg(&cex));
    assert_eq!((ca, cb), (0, 0));
    assert!(oa.contains("r0 = 0x1"), "{oa}");
    assert!(ob.contains("r0 = 0x2"), "{ob}");
}

#[test]
fn default_counterexample_path_is_next_to_second_program() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_mov64 r0 r2\nbpf_exit\n");
    let b = write(d.path(), "b.asm", "bpf_mov32 r0 r2\nbpf_exit\n");
    let (code, _) = run(bin().arg("verify").arg(&a).arg(&b).arg("--spec").arg(&spec));
    assert_eq!(code, 1);
    let state = std::fs::read_to_string(d.path().join("b.cex.toml")).unwrap();
    assert!(state.contains("regs"), "{state}");
}

#[test]
fn unsafe_second_program_is_reported() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_mov64 r0 0\nbpf_exit\n");
    let b = write(d.path(), "b.asm", "bpf_ldx_64 r0 r10 -8\nbpf_mov64 r0 0\nbpf_exit\n");
    let (code, out) = run(bin().arg("verify").arg(&a).arg(&b).arg("--spec").arg(&spec).arg("--safety"));
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("UNSAFE"), "{out}");
}

#[test]
fn missing_spec_is_an_input_error() {
    let d = TempDir::new().unwrap();
    let a = write(d.path(), "a.asm", "bpf_mov64 r0 0\nbpf_exit\n");
    let (code, out) = run(bin().arg("verify").arg(&a).arg(&a).arg("--spec").arg(d.path().join("nope.toml")));
    assert_eq!(code, 2, "{out}");
}

#[test]
fn malformed_program_is_an_input_error() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_frobnicate r0\nbpf_exit\n");
    let (code, _) = run(bin().arg("interpret").arg(&a).arg("--spec").arg(&spec));
    assert_eq!(code, 2);
}

#[test]
fn missing_solver_is_an_environment_error() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_mov64 r0 0\nbpf_exit\n");
    let (code, out) = run(bin().arg("verify").arg(&a).arg(&a).arg("--spec").arg(&spec).env("BPFSYNTH_SOLVER", "/nonexistent/z3"));
    assert_eq!(code, 3, "{out}");
}

#[test]
fn interpret_reports_faults() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_ldx_64 r0 r10 -8\nbpf_exit\n");
    let (code, out) = run(bin().arg("interpret").arg(&a).arg("--spec").arg(&spec));
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("FAULT"), "{out}");
}

#[test]
fn interpret_dumped_state_reproduces_output() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_mov64 r0 r2\nbpf_mul64 r0 3\nbpf_exit\n");
    let state = d.path().join("state.toml");
    let (c1, o1) = run(bin().arg("interpret").arg(&a).arg("--spec").arg(&spec).arg("--seed").arg("9").arg("--dump-state").arg(&state));
    let (c2, o2) = run(bin().arg("interpret").arg(&a).arg("--spec").arg(&spec).arg("--state").arg(&state));
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(o1, o2);
}

#[test]
fn analyze_shows_windows_and_safety() {
    let (code, out) = run(bin()
        .arg("analyze")
        .arg(corpus("regress/ctx_arsh/before.asm"))
        .arg("--spec")
        .arg(corpus("regress/ctx_arsh/spec.toml"))
        .args(["--window-len", "2"]));
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("window 2..4"), "{out}");
    assert!(out.contains("pre r3 in {0xffe00000}"), "{out}");
    assert!(out.contains("SAFE"), "{out}");
}

#[test]
fn compile_with_zero_budget_emits_the_source() {
    let d = TempDir::new().unwrap();
    let out_dir = d.path().join("out");
    let src = corpus("regress/ctx_arsh/before.asm");
    let (code, out) = run(bin()
        .arg("compile")
        .arg(&src)
        .arg("--spec")
        .arg(corpus("regress/ctx_arsh/spec.toml"))
        .arg("-o")
        .arg(&out_dir)
        .env("BPFSYNTH_BUDGET_ITERS", "0"));
    assert_eq!(code, 1, "{out}");
    let emitted = parse_asm(&std::fs::read_to_string(out_dir.join("before.1.asm")).unwrap()).unwrap();
    let source = parse_asm(&std::fs::read_to_string(&src).unwrap()).unwrap();
    assert_eq!(emitted, source);
    let report = std::fs::read_to_string(out_dir.join("before.report.txt")).unwrap();
    assert!(report.contains("compression: 0.00%"), "{report}");
    assert!(out_dir.join("before.report.csv").is_file());
}

#[test]
fn compile_coalesces_stores_and_binary_matches_asm() {
    let d = TempDir::new().unwrap();
    let out_dir = d.path().join("out");
    let src = corpus("regress/coalesce_stores/before.asm");
    let (code, out) = run(bin()
        .arg("compile")
        .arg(&src)
        .arg("--spec")
        .arg(corpus("regress/coalesce_stores/spec.toml"))
        .arg("-o")
        .arg(&out_dir)
        .args(["--budget-iters", "20000", "--seed", "1"]));
    assert_eq!(code, 0, "{out}");
    let asm = parse_asm(&std::fs::read_to_string(out_dir.join("before.1.asm")).unwrap()).unwrap();
    let decoded = decode(&std::fs::read(out_dir.join("before.1.bin")).unwrap()).unwrap();
    assert_eq!(asm, decoded);
    let source = parse_asm(&std::fs::read_to_string(&src).unwrap()).unwrap();
    assert!(asm.instruction_count() + 2 <= source.instruction_count(), "{asm}");

    let (vc, vo) = run(bin()
        .arg("verify")
        .arg(&src)
        .arg(out_dir.join("before.1.asm"))
        .arg("--spec")
        .arg(corpus("regress/coalesce_stores/spec.toml"))
        .arg("--safety"));
    assert_eq!(vc, 0, "{vo}");
}

#[test]
fn rejecting_post_filter_falls_back_to_source() {
    let d = TempDir::new().unwrap();
    let out_dir = d.path().join("out");
    let src = corpus("regress/ctx_arsh/before.asm");
    let (code, out) = run(bin()
        .arg("compile")
        .arg(&src)
        .arg("--spec")
        .arg(corpus("regress/ctx_arsh/spec.toml"))
        .arg("-o")
        .arg(&out_dir)
        .args(["--budget-iters", "3000", "--post-filter", "false", "--emit", "asm"]));
    assert_eq!(code, 1, "{out}");
    let emitted = parse_asm(&std::fs::read_to_string(out_dir.join("before.1.asm")).unwrap()).unwrap();
    let source = parse_asm(&std::fs::read_to_string(&src).unwrap()).unwrap();
    assert_eq!(emitted, source);
    assert!(!out_dir.join("before.1.bin").exists());
}

#[test]
fn compile_rejects_unsafe_source() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "spec.toml", CTX_SPEC);
    let a = write(d.path(), "a.asm", "bpf_ldx_64 r0 r10 -8\nbpf_exit\n");
    let (code, out) = run(bin().arg("compile").arg(&a).arg("--spec").arg(&spec).arg("-o").arg(d.path().join("out")));
    assert_eq!(code, 2, "{out}");
}

#[test]
fn bench_on_empty_corpus_prints_header_only() {
    let d = TempDir::new().unwrap();
    let (code, out) = run(bin().arg("bench").arg(d.path()).arg("--no-ablation"));
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("benchmark"), "{out}");
}

#[test]
fn bench_tabulates_every_benchmark() {
    let d = TempDir::new().unwrap();
    let bodies = [
        "bpf_mov64 r0 r2\nbpf_mov64 r0 r2\nbpf_exit\n",
        "bpf_mov64 r0 r2\nbpf_add64 r0 0\nbpf_exit\n",
        "bpf_mov64 r0 r2\nbpf_mul64 r0 1\nbpf_exit\n",
        "bpf_mov64 r3 5\nbpf_mov64 r0 r2\nbpf_exit\n",
        "bpf_mov64 r0 r2\nbpf_or64 r0 0\nbpf_exit\n",
        "bpf_mov64 r0 0\nbpf_mov64 r0 r2\nbpf_exit\n",
    ];
    for (i, body) in bodies.iter().enumerate() {
        let b = d.path().join(format!("b{i}"));
        std::fs::create_dir(&b).unwrap();
        write(&b, "spec.toml", CTX_SPEC);
        write(&b, "before.asm", body);
    }
    let csv = d.path().join("rows.csv");
    let (code, out) = run(bin().arg("bench").arg(d.path()).args(["--budget-iters", "2000", "--chains", "1"]).arg("--csv").arg(&csv));
    assert_eq!(code, 0, "{out}");
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + bodies.len(), "{rows}");
    for i in 0..bodies.len() {
        assert!(out.contains(&format!("b{i}")), "{out}");
    }
}
