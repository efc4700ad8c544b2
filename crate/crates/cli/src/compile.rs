//! `bpfsynth compile`: search, re-check, filter and emit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{Context, Result};
use log::{info, warn};
use serde::Serialize;

use bpfsynth_core::analysis::strip_nops;
use bpfsynth_core::isa::{encode, print_asm};
use bpfsynth_core::Program;
use bpfsynth_search::parallel::{default_top_k, Candidate};
use bpfsynth_search::{run_parallel, LatencyTable};

use crate::{load_program, load_spec, SearchSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Emit {
    Asm,
    Bin,
    Both,
}

#[derive(Clone, Debug)]
pub struct CompileOptions {
    pub input: PathBuf,
    pub spec: PathBuf,
    pub out_dir: PathBuf,
    pub settings: SearchSettings,
    /// Shell command run on each candidate's asm file; nonzero exit rejects it.
    pub post_filter: Option<String>,
    pub emit: Emit,
}

/// One emitted program.
#[derive(Clone, Debug, Serialize)]
pub struct ProgramRow {
    pub rank: usize,
    pub insns_before: usize,
    pub insns_after: usize,
    pub latency_before_ns: f64,
    pub latency_after_ns: f64,
    /// Empty for the unchanged source.
    pub chain: Option<usize>,
    pub iteration: u64,
    pub found_after_secs: f64,
    pub asm: Option<String>,
    pub bin: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CompileReport {
    pub source: String,
    pub programs: Vec<ProgramRow>,
    pub emitted: Vec<Program>,
    pub iterations: u64,
    pub solver_calls: usize,
    pub cache_lookups: usize,
    pub cache_hits: usize,
    pub rejected_by_recheck: usize,
    pub rejected_by_filter: usize,
    pub wall_secs: f64,
}

impl CompileReport {
    /// The best emitted program is smaller or faster than the source.
    pub fn improved(&self) -> bool {
        self.programs.first().is_some_and(|r| r.chain.is_some())
    }

    pub fn compression_pct(&self) -> f64 {
        match self.programs.first() {
            Some(r) if r.insns_before > 0 => 100.0 * (r.insns_before as f64 - r.insns_after as f64) / r.insns_before as f64,
            _ => 0.0,
        }
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "source: {}", self.source);
        let _ = writeln!(s, "{:>4} {:>7} {:>6} {:>11} {:>10} {:>6} {:>10} {:>9}", "rank", "insns", "after", "lat_ns", "lat_after", "chain", "iteration", "found_s");
        for r in &self.programs {
            let chain = r.chain.map_or("src".to_string(), |c| c.to_string());
            let _ = writeln!(
                s,
                "{:>4} {:>7} {:>6} {:>11.1} {:>10.1} {:>6} {:>10} {:>9.2}",
                r.rank, r.insns_before, r.insns_after, r.latency_before_ns, r.latency_after_ns, chain, r.iteration, r.found_after_secs
            );
        }
        let rate = if self.cache_lookups == 0 { 0.0 } else { self.cache_hits as f64 / self.cache_lookups as f64 };
        let _ = writeln!(s, "compression: {:.2}%", self.compression_pct());
        let _ = writeln!(
            s,
            "iterations: {}  solver calls: {}  cache hit rate: {:.1}%  wall: {:.2}s",
            self.iterations,
            self.solver_calls,
            100.0 * rate,
            self.wall_secs
        );
        if self.rejected_by_recheck + self.rejected_by_filter > 0 {
            let _ = writeln!(s, "rejected: {} by final re-check, {} by post filter", self.rejected_by_recheck, self.rejected_by_filter);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
        for r in &self.programs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `cmd` with the candidate's asm file as its only argument.
fn passes_filter(cmd: &str, p: &Program) -> Result<bool> {
    let mut f = tempfile::Builder::new().suffix(".asm").tempfile()?;
    std::io::Write::write_all(&mut f, print_asm(p).as_bytes())?;
    let status = Command::new("sh")
        .arg("-c")
        .arg(format!("{cmd} \"$1\""))
        .arg("bpfsynth-post-filter")
        .arg(f.path())
        .status()
        .with_context(|| format!("cannot run post filter `{cmd}`"))?;
    Ok(status.success())
}

fn row(rank: usize, c: &Candidate, src: &Program, lat: &LatencyTable) -> ProgramRow {
    ProgramRow {
        rank,
        insns_before: src.instruction_count(),
        insns_after: c.insns,
        latency_before_ns: lat.program(src),
        latency_after_ns: c.latency,
        chain: c.chain,
        iteration: c.iteration,
        found_after_secs: c.elapsed.as_secs_f64(),
        asm: None,
        bin: None,
    }
}

pub fn compile(opts: &CompileOptions) -> Result<CompileReport> {
    let spec = load_spec(&opts.spec)?;
    let src = load_program(&opts.input)?;
    let lat = LatencyTable::bundled();
    let s = &opts.settings;
    let top_k = s.top_k.unwrap_or_else(|| default_top_k(s.goal));
    let start = Instant::now();
    let out = run_parallel(s.chain_configs(None), &src, &spec, &lat, s.goal, top_k)?;
    let wall_secs = start.elapsed().as_secs_f64();

    let mut kept: Vec<&Candidate> = Vec::new();
    let mut rejected_by_filter = 0;
    for c in &out.ranked {
        match &opts.post_filter {
            Some(cmd) if !passes_filter(cmd, &c.program)? => {
                info!("post filter rejected a candidate from chain {:?}", c.chain);
                rejected_by_filter += 1;
            }
            _ => kept.push(c),
        }
    }
    let source = Candidate {
        program: src.clone(),
        insns: src.instruction_count(),
        perf: 0.0,
        latency: lat.program(&src),
        chain: None,
        iteration: 0,
        elapsed: Default::default(),
    };
    if kept.is_empty() {
        warn!("every candidate was rejected; emitting the source");
        kept.push(&source);
    }

    std::fs::create_dir_all(&opts.out_dir).with_context(|| format!("cannot create {}", opts.out_dir.display()))?;
    let stem = opts.input.file_stem().map_or("program".into(), |s| s.to_string_lossy().into_owned());
    let mut programs = Vec::new();
    let mut emitted = Vec::new();
    for (rank, c) in kept.iter().enumerate() {
        let p = strip_nops(&c.program);
        let mut r = row(rank + 1, c, &src, &lat);
        if matches!(opts.emit, Emit::Asm | Emit::Both) {
            let path = opts.out_dir.join(format!("{stem}.{}.asm", rank + 1));
            std::fs::write(&path, print_asm(&p)).with_context(|| format!("cannot write {}", path.display()))?;
            r.asm = Some(path.display().to_string());
        }
        if matches!(opts.emit, Emit::Bin | Emit::Both) {
            let path = opts.out_dir.join(format!("{stem}.{}.bin", rank + 1));
            std::fs::write(&path, encode(&p)).with_context(|| format!("cannot write {}", path.display()))?;
            r.bin = Some(path.display().to_string());
        }
        programs.push(r);
        emitted.push(p);
    }
    let stats = out.chains.iter().map(|c| &c.stats);
    let report = CompileReport {
        source: opts.input.display().to_string(),
        programs,
        emitted,
        iterations: stats.clone().map(|s| s.iterations).sum(),
        solver_calls: stats.clone().map(|s| s.solver_calls()).sum(),
        cache_lookups: stats.clone().map(|s| s.cache_lookups).sum(),
        cache_hits: stats.map(|s| s.cache_hits).sum(),
        rejected_by_recheck: out.rejected,
        rejected_by_filter,
        wall_secs,
    };
    std::fs::write(opts.out_dir.join(format!("{stem}.report.txt")), report.text())?;
    report.write_csv(&opts.out_dir.join(format!("{stem}.report.csv")))?;
    Ok(report)
}
