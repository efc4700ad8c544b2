//! `bpfsynth bench`: search every program of a corpus and tabulate
//! compression, search effort and equivalence-query cost.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::warn;
use serde::Serialize;

use bpfsynth_core::{Program, ProgramSpec};
use bpfsynth_search::parallel::SearchOutcome;
use bpfsynth_search::{run_parallel, LatencyTable};
use bpfsynth_verify::solver::{Solver, SolverConfig, Verdict};
use bpfsynth_verify::vcgen::{equivalence_query, VcOptions};

use crate::{load_program, load_spec, SearchSettings};

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub corpus: PathBuf,
    pub settings: SearchSettings,
    /// Require each benchmark with an `after.asm` to reach its size.
    pub regress: bool,
    /// Seeded attempts per benchmark in regression mode.
    pub attempts: usize,
    /// Time equivalence queries with formula optimizations toggled.
    pub ablation: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BenchRow {
    pub benchmark: String,
    pub status: String,
    pub insns_before: usize,
    pub insns_after: usize,
    pub compression_pct: f64,
    pub time_to_best_s: f64,
    pub iterations: u64,
    pub solver_calls: usize,
    pub cache_hit_rate: f64,
    /// Mean wall time of the source-vs-best query with every optimization on.
    pub eq_query_ms: Option<f64>,
    /// Slowdown with memory-type tables off.
    pub slowdown_no_types: Option<f64>,
    /// Slowdown with map-id concretization off.
    pub slowdown_no_maps: Option<f64>,
    /// Slowdown with offset concretization off.
    pub slowdown_no_offsets: Option<f64>,
    pub slowdown_no_types_offsets: Option<f64>,
    pub regress_target: Option<usize>,
    pub regress_pass: Option<bool>,
    pub attempts: usize,
    pub error: String,
}

/// Benchmark directories under `corpus`: each holds `spec.toml` and
/// `before.asm`, optionally `after.asm`.
pub fn discover(corpus: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for e in std::fs::read_dir(corpus).with_context(|| format!("cannot read corpus {}", corpus.display()))? {
        let p = e?.path();
        if p.join("before.asm").is_file() && p.join("spec.toml").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[derive(Clone, Debug)]
pub struct QueryTiming {
    pub mean_secs: f64,
    pub unsat: bool,
    /// At least one run ended without a verdict.
    pub unknown: bool,
}

/// Mean wall time of the equivalence query between `a` and `b` under
/// `opts`, over `reps` runs on a fresh solver.
pub fn time_equivalence(a: &Program, b: &Program, spec: &ProgramSpec, opts: VcOptions, solver: &SolverConfig, reps: usize) -> Result<QueryTiming> {
    let q = equivalence_query(a, b, spec, opts).context("cannot encode equivalence query")?;
    let mut s = Solver::new(solver.clone());
    let mut total = 0.0;
    let mut unsat = true;
    let mut unknown = false;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let v = s.check(&q)?;
        total += t.elapsed().as_secs_f64();
        unsat &= v.is_unsat();
        unknown |= matches!(v, Verdict::Unknown(_));
    }
    Ok(QueryTiming { mean_secs: total / reps.max(1) as f64, unsat, unknown })
}

fn fill_search(row: &mut BenchRow, out: &SearchOutcome, src: &Program) {
    let best = out.best();
    row.insns_before = src.instruction_count();
    row.insns_after = best.insns;
    row.compression_pct = 100.0 * (row.insns_before as f64 - best.insns as f64) / row.insns_before.max(1) as f64;
    row.time_to_best_s = best.elapsed.as_secs_f64();
    row.iterations = out.chains.iter().map(|c| c.stats.iterations).sum();
    row.solver_calls = out.chains.iter().map(|c| c.stats.solver_calls()).sum();
    let lookups: usize = out.chains.iter().map(|c| c.stats.cache_lookups).sum();
    let hits: usize = out.chains.iter().map(|c| c.stats.cache_hits).sum();
    row.cache_hit_rate = if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 };
}

fn fill_ablation(row: &mut BenchRow, src: &Program, best: &Program, spec: &ProgramSpec, solver: &SolverConfig) -> Result<()> {
    let on = VcOptions::default();
    let base = time_equivalence(src, best, spec, on, solver, 3)?;
    row.eq_query_ms = Some(1e3 * base.mean_secs);
    let slow = |o: VcOptions| -> Result<Option<f64>> {
        let t = time_equivalence(src, best, spec, o, solver, 1)?;
        Ok(Some(t.mean_secs / base.mean_secs.max(1e-9)))
    };
    row.slowdown_no_types = slow(VcOptions { type_tables: false, ..on })?;
    row.slowdown_no_maps = slow(VcOptions { map_concretize: false, ..on })?;
    row.slowdown_no_offsets = slow(VcOptions { offset_concretize: false, ..on })?;
    row.slowdown_no_types_offsets = slow(VcOptions { type_tables: false, offset_concretize: false, ..on })?;
    Ok(())
}

fn bench_one(dir: &Path, opts: &BenchOptions, lat: &LatencyTable) -> Result<BenchRow> {
    let spec = load_spec(&dir.join("spec.toml"))?;
    let src = load_program(&dir.join("before.asm"))?;
    let target = if opts.regress && dir.join("after.asm").is_file() {
        Some(load_program(&dir.join("after.asm"))?.instruction_count())
    } else {
        None
    };
    let mut row = BenchRow { benchmark: dir.file_name().unwrap_or_default().to_string_lossy().into_owned(), ..Default::default() };
    let attempts = if target.is_some() { opts.attempts.max(1) } else { 1 };
    let mut out = None;
    for k in 0..attempts {
        let mut s = opts.settings.clone();
        s.seed = s.seed.wrapping_add(1000 * k as u64);
        let o = run_parallel(s.chain_configs(target), &src, &spec, lat, s.goal, 1)?;
        row.attempts = k + 1;
        let done = target.is_none_or(|t| o.best().insns <= t);
        out = Some(o);
        if done {
            break;
        }
    }
    let out = out.expect("at least one attempt");
    fill_search(&mut row, &out, &src);
    if let Some(t) = target {
        row.regress_target = Some(t);
        row.regress_pass = Some(out.best().insns <= t);
    }
    if opts.ablation {
        fill_ablation(&mut row, &src, &out.best().program, &spec, &opts.settings.solver)?;
    }
    row.status = "ok".into();
    Ok(row)
}

/// Runs every benchmark; a failing benchmark is recorded and the run
/// continues.
pub fn bench(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let lat = LatencyTable::bundled();
    let mut rows = Vec::new();
    for dir in discover(&opts.corpus)? {
        let row = bench_one(&dir, opts, &lat).unwrap_or_else(|e| {
            warn!("{}: {e:#}", dir.display());
            BenchRow {
                benchmark: dir.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                status: "error".into(),
                error: format!("{e:#}"),
                ..Default::default()
            }
        });
        rows.push(row);
    }
    Ok(rows)
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.prec$}"))
}

pub fn table(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>6} {:>6} {:>7} {:>8} {:>9} {:>7} {:>6} {:>9} {:>8} {:>8} {:>8} {:>8} {:>7}",
        "benchmark", "before", "after", "comp%", "best_s", "iters", "solver", "hit%", "eq_ms", "x_noI", "x_noII", "x_noIII", "x_noI+III", "regress"
    );
    for r in rows {
        if r.status != "ok" {
            let _ = writeln!(s, "{:<24} error: {}", r.benchmark, r.error);
            continue;
        }
        let regress = match r.regress_pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "-",
        };
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>6} {:>7.2} {:>8.2} {:>9} {:>7} {:>6.1} {:>9} {:>8} {:>8} {:>8} {:>8} {:>7}",
            r.benchmark,
            r.insns_before,
            r.insns_after,
            r.compression_pct,
            r.time_to_best_s,
            r.iterations,
            r.solver_calls,
            100.0 * r.cache_hit_rate,
            opt(r.eq_query_ms, 2),
            opt(r.slowdown_no_types, 1),
            opt(r.slowdown_no_maps, 1),
            opt(r.slowdown_no_offsets, 1),
            opt(r.slowdown_no_types_offsets, 1),
            regress
        );
    }
    let ok: Vec<&BenchRow> = rows.iter().filter(|r| r.status == "ok").collect();
    if !ok.is_empty() {
        let mean = ok.iter().map(|r| r.compression_pct).sum::<f64>() / ok.len() as f64;
        let _ = writeln!(s, "mean compression: {mean:.2}% over {} benchmarks", ok.len());
    }
    s
}

pub fn write_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
