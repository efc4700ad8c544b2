//! `verify`, `interpret` and `analyze`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bpfsynth_core::analysis::{build_cfg, select_windows, to_ssa, DEFAULT_WINDOW_LEN};
use bpfsynth_core::interpreter::{default_fuel, execute, random_input, MachineState};
use bpfsynth_core::isa::parse_asm_unchecked;
use bpfsynth_core::{Program, ProgramSpec};
use bpfsynth_verify::safety::check_safety;
use bpfsynth_verify::solver::{Equivalence, EquivalenceChecker, Solver, SolverConfig};

use crate::state::{load_state, state_to_toml};
use crate::{exit, load_program, load_spec};

/// Printed output and exit code of a command.
pub struct Outcome {
    pub text: String,
    pub code: u8,
}

pub struct VerifyOptions {
    pub a: PathBuf,
    pub b: PathBuf,
    pub spec: PathBuf,
    pub window: bool,
    pub window_len: usize,
    pub safety: bool,
    /// Where to write a counterexample; defaults to `<b>.cex.toml`.
    pub cex: Option<PathBuf>,
    pub solver: SolverConfig,
}

fn verify_windows(a: &Program, b: &Program, spec: &ProgramSpec, len: usize, checker: &mut EquivalenceChecker, out: &mut String) -> Result<bool> {
    if a.len() != b.len() {
        bail!("window verification needs programs of equal length ({} vs {})", a.len(), b.len());
    }
    let windows = select_windows(a, spec, len)?;
    let changed: Vec<usize> = (0..a.len()).filter(|&i| a.insns[i] != b.insns[i]).collect();
    if let Some(&i) = changed.iter().find(|&&i| !windows.iter().any(|w| (w.start..w.end).contains(&i))) {
        bail!("instruction {i} differs outside every window");
    }
    let mut all = true;
    for ws in windows.iter().filter(|w| changed.iter().any(|i| (w.start..w.end).contains(i))) {
        let ok = checker.check_window(a, &b.insns[ws.start..ws.end], ws)?;
        let pre: Vec<String> = ws
            .concrete_pre
            .iter()
            .map(|(r, vs)| format!("{r} in {{{}}}", vs.iter().map(|v| format!("{v:#x}")).collect::<Vec<_>>().join(", ")))
            .collect();
        let _ = writeln!(
            out,
            "window {}..{}: {} (live-in {}, live-out {}{})",
            ws.start,
            ws.end,
            if ok { "UNSAT" } else { "SAT" },
            ws.live_in,
            ws.live_out,
            if pre.is_empty() { String::new() } else { format!(", pre {}", pre.join("; ")) }
        );
        all &= ok;
    }
    Ok(all)
}

pub fn verify(o: &VerifyOptions) -> Result<Outcome> {
    let spec = load_spec(&o.spec)?;
    let a = load_program(&o.a)?;
    let b = load_program(&o.b)?;
    let mut checker = EquivalenceChecker::new(&a, &spec, o.solver.clone());
    let mut text = String::new();
    let mut code = exit::OK;
    if o.window {
        if verify_windows(&a, &b, &spec, o.window_len, &mut checker, &mut text)? {
            text.push_str("EQUIVALENT\n");
        } else {
            text.push_str("NOT_EQUIVALENT\n");
            code = exit::NOTHING_BETTER;
        }
    } else {
        match checker.check(&b)? {
            Equivalence::Equivalent => text.push_str("EQUIVALENT\n"),
            Equivalence::Counterexample(input) => {
                let path = o.cex.clone().unwrap_or_else(|| o.b.with_extension("cex.toml"));
                std::fs::write(&path, state_to_toml(&input)).with_context(|| format!("cannot write {}", path.display()))?;
                let fuel = default_fuel(&a).max(default_fuel(&b));
                let show = |p: &Program| match execute(p, &spec, &input, fuel) {
                    Ok(out) => format!("r0 = {:#x}", out.r0),
                    Err(f) => format!("fault {f}"),
                };
                let _ = writeln!(text, "NOT_EQUIVALENT\ncounterexample: {}\n  {}: {}\n  {}: {}", path.display(), o.a.display(), show(&a), o.b.display(), show(&b));
                code = exit::NOTHING_BETTER;
            }
            Equivalence::Different => {
                text.push_str("NOT_EQUIVALENT\n(solver model did not replay concretely; no counterexample written)\n");
                code = exit::NOTHING_BETTER;
            }
            Equivalence::Unknown(reason) => {
                let _ = writeln!(text, "UNKNOWN\n{reason}");
                code = exit::NOTHING_BETTER;
            }
        }
    }
    if o.safety {
        let report = check_safety(&b, &spec, Some(&mut checker.solver))?;
        if report.is_safe() {
            text.push_str("SAFE\n");
        } else {
            text.push_str("UNSAFE\n");
            for v in &report.violations {
                let _ = writeln!(text, "  {v}");
            }
            code = exit::NOTHING_BETTER;
        }
    }
    Ok(Outcome { text, code })
}

pub struct InterpretOptions {
    pub program: PathBuf,
    pub spec: PathBuf,
    pub state: Option<PathBuf>,
    pub seed: u64,
    /// Write the input state used, e.g. a randomly drawn one.
    pub dump_state: Option<PathBuf>,
    pub fuel: Option<usize>,
}

pub fn interpret(o: &InterpretOptions) -> Result<Outcome> {
    let spec = load_spec(&o.spec)?;
    let p = load_program(&o.program)?;
    let input = match &o.state {
        Some(path) => load_state(path)?,
        None => random_input(&spec, &mut ChaCha8Rng::seed_from_u64(o.seed)),
    };
    if let Some(path) = &o.dump_state {
        std::fs::write(path, state_to_toml(&input)).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(run_on(&p, &spec, &input, o.fuel.unwrap_or_else(|| default_fuel(&p))))
}

fn run_on(p: &Program, spec: &ProgramSpec, input: &MachineState, fuel: usize) -> Outcome {
    let mut text = String::new();
    match execute(p, spec, input, fuel) {
        Ok(out) => {
            let _ = writeln!(text, "r0 = {:#x} ({})", out.r0, out.r0 as i64);
            if spec.packet_is_output() {
                let _ = writeln!(text, "packet = {}", hex::encode(&out.packet));
            }
            for (id, m) in &out.maps {
                let _ = writeln!(text, "map {id}: {} entries", m.len());
                for (k, v) in m {
                    let _ = writeln!(text, "  {} => {}", hex::encode(k), hex::encode(v));
                }
            }
            Outcome { text, code: exit::OK }
        }
        Err(f) => {
            let _ = writeln!(text, "FAULT {} at instruction {}", f.kind, f.at);
            Outcome { text, code: exit::NOTHING_BETTER }
        }
    }
}

pub fn analyze(program: &Path, spec_path: &Path, window_len: usize, solver: Option<SolverConfig>) -> Result<Outcome> {
    let spec = load_spec(spec_path)?;
    let text = std::fs::read_to_string(program).with_context(|| format!("cannot read {}", program.display()))?;
    let p = parse_asm_unchecked(&text).with_context(|| format!("cannot parse {}", program.display()))?;
    let mut out = String::new();
    let _ = writeln!(out, "instructions: {} ({} slots)", p.instruction_count(), p.len());
    match build_cfg(&p) {
        Ok(cfg) => {
            let _ = writeln!(out, "blocks: {}", cfg.blocks.len());
            if let Ok(ssa) = to_ssa(&p) {
                out.push_str(&ssa.listing(&p));
            }
            if let Ok(ws) = select_windows(&p, &spec, window_len) {
                for w in ws {
                    let _ = writeln!(out, "window {}..{} (block {}): live-in {} live-out {}", w.start, w.end, w.block, w.live_in, w.live_out);
                    for (r, vs) in &w.concrete_pre {
                        let vals: Vec<String> = vs.iter().map(|v| format!("{v:#x}")).collect();
                        let _ = writeln!(out, "  pre {r} in {{{}}}", vals.join(", "));
                    }
                }
            }
        }
        Err(e) => {
            let _ = writeln!(out, "control flow: {e}");
        }
    }
    let mut solver = solver.map(Solver::new);
    let report = check_safety(&p, &spec, solver.as_mut())?;
    let code = if report.is_safe() {
        out.push_str("SAFE\n");
        exit::OK
    } else {
        out.push_str("UNSAFE\n");
        for v in &report.violations {
            let _ = writeln!(out, "  {v}");
        }
        exit::NOTHING_BETTER
    };
    Ok(Outcome { text: out, code })
}

pub const WINDOW_LEN: usize = DEFAULT_WINDOW_LEN;
