use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use bpfsynth_cli::bench::{self, BenchOptions};
use bpfsynth_cli::compile::{compile, CompileOptions, Emit};
use bpfsynth_cli::inspect::{self, InterpretOptions, Outcome, VerifyOptions, WINDOW_LEN};
use bpfsynth_cli::{exit, exit_code, probe_solver, solver_config, SearchSettings};
use bpfsynth_search::PerfGoal;
use bpfsynth_verify::solver::SolverConfig;

/// Stochastic superoptimizer for BPF programs.
#[derive(Parser)]
#[command(name = "bpfsynth", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search for a smaller or faster equivalent program and emit the best ones.
    Compile {
        input: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, short, default_value = "bpfsynth-out", env = "BPFSYNTH_OUT")]
        out: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        /// Command run on each candidate's asm file; a nonzero exit rejects it.
        #[arg(long, env = "BPFSYNTH_POST_FILTER")]
        post_filter: Option<String>,
        #[arg(long, value_enum, default_value = "both", env = "BPFSYNTH_EMIT")]
        emit: Emit,
    },
    /// Check two programs for equivalence.
    Verify {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Verify each modified window under its inferred context.
        #[arg(long)]
        window: bool,
        #[arg(long, default_value_t = WINDOW_LEN)]
        window_len: usize,
        /// Also check the second program's safety.
        #[arg(long)]
        safety: bool,
        /// Counterexample state file (default: next to B with `.cex.toml`).
        #[arg(long)]
        cex: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run a program on a state file or a random input.
    Interpret {
        program: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dump_state: Option<PathBuf>,
        #[arg(long)]
        fuel: Option<usize>,
    },
    /// Print control flow, SSA, windows and the safety report.
    Analyze {
        program: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = WINDOW_LEN)]
        window_len: usize,
        /// Skip solver-backed safety checks.
        #[arg(long)]
        no_solver: bool,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Search every benchmark directory of a corpus and tabulate results.
    Bench {
        corpus: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
        /// Require benchmarks with an `after.asm` to reach its instruction count.
        #[arg(long)]
        regress: bool,
        /// Seeded attempts per benchmark with --regress.
        #[arg(long, default_value_t = 3)]
        attempts: usize,
        /// Skip equivalence-query timing with optimizations toggled.
        #[arg(long)]
        no_ablation: bool,
        #[arg(long, env = "BPFSYNTH_CSV")]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// SMT solver executable (SMT-LIB 2 over stdin).
    #[arg(long, default_value = "z3", env = "BPFSYNTH_SOLVER")]
    solver: PathBuf,
    /// Per-query timeout in milliseconds.
    #[arg(long, default_value_t = 10_000, env = "BPFSYNTH_SOLVER_TIMEOUT")]
    solver_timeout: u64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        solver_config(&self.solver, self.solver_timeout)
    }
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, value_enum, default_value = "inst", env = "BPFSYNTH_GOAL")]
    goal: Goal,
    /// Number of chains (default: one per parameter set).
    #[arg(long, env = "BPFSYNTH_CHAINS")]
    chains: Option<usize>,
    /// TOML file of parameter sets (default: the five shipped sets).
    #[arg(long, env = "BPFSYNTH_PARAMS")]
    params: Option<PathBuf>,
    /// Iterations per chain.
    #[arg(long, default_value_t = 20_000, env = "BPFSYNTH_BUDGET_ITERS")]
    budget_iters: u64,
    /// Wall-clock seconds per chain.
    #[arg(long, env = "BPFSYNTH_BUDGET_SECS")]
    budget_secs: Option<f64>,
    #[arg(long, default_value_t = 1, env = "BPFSYNTH_SEED")]
    seed: u64,
    /// Programs to emit (default 1 for inst, 5 for lat).
    #[arg(long, env = "BPFSYNTH_TOP_K")]
    top_k: Option<usize>,
    /// Verify candidates window by window during the search.
    #[arg(long, env = "BPFSYNTH_WINDOW")]
    window: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Goal {
    Inst,
    Lat,
}

impl SearchArgs {
    fn settings(&self) -> Result<SearchSettings> {
        let goal = match self.goal {
            Goal::Inst => PerfGoal::Inst,
            Goal::Lat => PerfGoal::Lat,
        };
        let mut s = SearchSettings::new(goal, self.solver.config()).with_params_file(self.params.as_deref())?;
        s.chains = self.chains.unwrap_or(s.params.len());
        s.budget_iters = self.budget_iters;
        s.budget_secs = self.budget_secs;
        s.seed = self.seed;
        s.top_k = self.top_k;
        s.window = self.window;
        Ok(s)
    }
}

fn print(o: Outcome) -> u8 {
    print!("{}", o.text);
    o.code
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Compile { input, spec, out, search, post_filter, emit } => {
            let settings = search.settings()?;
            probe_solver(&settings.solver)?;
            let report = compile(&CompileOptions { input, spec, out_dir: out, settings, post_filter, emit })?;
            print!("{}", report.text());
            Ok(if report.improved() { exit::OK } else { exit::NOTHING_BETTER })
        }
        Cmd::Verify { a, b, spec, window, window_len, safety, cex, solver } => {
            let solver = solver.config();
            probe_solver(&solver)?;
            Ok(print(inspect::verify(&VerifyOptions { a, b, spec, window, window_len, safety, cex, solver })?))
        }
        Cmd::Interpret { program, spec, state, seed, dump_state, fuel } => {
            Ok(print(inspect::interpret(&InterpretOptions { program, spec, state, seed, dump_state, fuel })?))
        }
        Cmd::Analyze { program, spec, window_len, no_solver, solver } => {
            let solver = if no_solver {
                None
            } else {
                let s = solver.config();
                probe_solver(&s)?;
                Some(s)
            };
            Ok(print(inspect::analyze(&program, &spec, window_len, solver)?))
        }
        Cmd::Bench { corpus, search, regress, attempts, no_ablation, csv } => {
            let settings = search.settings()?;
            probe_solver(&settings.solver)?;
            let rows = bench::bench(&BenchOptions { corpus, settings, regress, attempts, ablation: !no_ablation })?;
            print!("{}", bench::table(&rows));
            if let Some(path) = csv {
                bench::write_csv(&rows, &path)?;
            }
            let failed = rows.iter().any(|r| r.regress_pass == Some(false) || (regress && r.status != "ok"));
            Ok(if failed { exit::NOTHING_BETTER } else { exit::OK })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
