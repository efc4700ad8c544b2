//! SMT solver driver: a persistent `z3 -in` process fed over a pipe.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use bpfsynth_core::analysis::{canonicalize, WindowSpec};
use bpfsynth_core::interpreter::{default_fuel, execute, MachineState};
use bpfsynth_core::isa::{encode, Instruction, Program};
use bpfsynth_core::ProgramSpec;
use log::{debug, warn};
use thiserror::Error;

use crate::model::BvValue;
use crate::vcgen::{concrete_query, equivalence_query, window_query, Query, VcError, VcOptions};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
const RESTART_EVERY: usize = 1000;
/// Extra wall-clock time granted past the solver's own timeout.
const GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("failed to start solver `{path}`")]
    Spawn { path: String, source: std::io::Error },
    #[error("solver pipe closed")]
    Closed,
    #[error("malformed solver output: {0}")]
    Parse(String),
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub path: PathBuf,
    pub timeout: Duration,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { path: PathBuf::from("z3"), timeout: DEFAULT_TIMEOUT }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Unsat,
    /// Values of the query's watch list, in order.
    Sat(Vec<Option<BvValue>>),
    Unknown(String),
}

impl Verdict {
    pub fn is_unsat(&self) -> bool {
        matches!(self, Verdict::Unsat)
    }
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Process {
    fn spawn(path: &PathBuf) -> Result<Process, SolverError> {
        let mut child = Command::new(path)
            .arg("-in")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|source| SolverError::Spawn { path: path.display().to_string(), source })?;
        let stdin = child.stdin.take().ok_or(SolverError::Closed)?;
        let stdout = child.stdout.take().ok_or(SolverError::Closed)?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Process { child, stdin, lines: rx })
    }

    fn send(&mut self, text: &str) -> Result<(), SolverError> {
        self.stdin.write_all(text.as_bytes()).map_err(|_| SolverError::Closed)?;
        self.stdin.flush().map_err(|_| SolverError::Closed)
    }

    /// Reads one complete s-expression or atom.
    fn read_sexp(&mut self, deadline: Instant) -> Result<Option<String>, SolverError> {
        let mut buf = String::new();
        let mut depth = 0i64;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(left) {
                Ok(l) => l,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(SolverError::Closed),
            };
            let mut in_str = false;
            for c in line.chars() {
                match c {
                    '"' => in_str = !in_str,
                    '(' if !in_str => depth += 1,
                    ')' if !in_str => depth -= 1,
                    _ => {}
                }
            }
            buf.push_str(&line);
            buf.push('\n');
            if depth <= 0 && !buf.trim().is_empty() {
                return Ok(Some(buf.trim().to_string()));
            }
        }
    }
}

impl Drop for Process {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One solver process, reused across queries.
pub struct Solver {
    config: SolverConfig,
    process: Option<Process>,
    served: usize,
}

impl Solver {
    pub fn new(config: SolverConfig) -> Solver {
        Solver { config, process: None, served: 0 }
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Checks that the solver binary can be started.
    pub fn probe(&mut self) -> Result<(), SolverError> {
        self.process()?;
        Ok(())
    }

    fn process(&mut self) -> Result<&mut Process, SolverError> {
        if self.served >= RESTART_EVERY {
            self.process = None;
            self.served = 0;
        }
        if self.process.is_none() {
            self.process = Some(Process::spawn(&self.config.path)?);
        }
        Ok(self.process.as_mut().unwrap())
    }

    /// Runs `query`. Timeouts and solver failures come back as
    /// [`Verdict::Unknown`]; only a missing binary is an error.
    pub fn check(&mut self, query: &Query) -> Result<Verdict, SolverError> {
        match self.run(query) {
            Ok(v) => Ok(v),
            Err(e @ SolverError::Spawn { .. }) => Err(e),
            Err(e) => {
                warn!("solver failure: {e}");
                self.process = None;
                Ok(Verdict::Unknown(e.to_string()))
            }
        }
    }

    fn run(&mut self, query: &Query) -> Result<Verdict, SolverError> {
        let timeout = self.config.timeout;
        self.served += 1;
        let proc = self.process()?;
        let ms = timeout.as_millis().max(1);
        let mut text = String::with_capacity(query.text.len() + 128);
        text.push_str("(reset)\n(set-option :produce-models true)\n");
        text.push_str(&format!("(set-option :timeout {ms})\n"));
        text.push_str(&query.text);
        text.push_str("\n(check-sat)\n");
        let deadline = Instant::now() + timeout + GRACE;
        proc.send(&text)?;
        let mut errors = Vec::new();
        let answer = loop {
            match proc.read_sexp(deadline)? {
                None => {
                    self.process = None;
                    return Ok(Verdict::Unknown("timeout".into()));
                }
                Some(s) if s.starts_with("(error") => {
                    errors.push(s);
                    continue;
                }
                Some(s) => break s,
            }
        };
        if let Some(e) = errors.first() {
            debug!("solver rejected query: {e}");
            return Ok(Verdict::Unknown(e.clone()));
        }
        match answer.as_str() {
            "unsat" => Ok(Verdict::Unsat),
            "unknown" => Ok(Verdict::Unknown("solver returned unknown".into())),
            "sat" => {
                if query.watch.is_empty() {
                    return Ok(Verdict::Sat(Vec::new()));
                }
                let mut req = String::from("(get-value (");
                for w in &query.watch {
                    req.push_str(w);
                    req.push(' ');
                }
                req.push_str("))\n");
                proc.send(&req)?;
                let deadline = Instant::now() + timeout + GRACE;
                let resp = match proc.read_sexp(deadline)? {
                    Some(r) => r,
                    None => {
                        self.process = None;
                        return Ok(Verdict::Unknown("timeout reading model".into()));
                    }
                };
                if resp.starts_with("(error") {
                    return Ok(Verdict::Unknown(resp));
                }
                let values = parse_values(&resp)?;
                if values.len() != query.watch.len() {
                    return Err(SolverError::Parse(format!("expected {} values, got {}", query.watch.len(), values.len())));
                }
                Ok(Verdict::Sat(values))
            }
            other => Err(SolverError::Parse(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '(' | ')' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
            '|' => {
                cur.push(c);
                for d in chars.by_ref() {
                    cur.push(d);
                    if d == '|' {
                        break;
                    }
                }
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn parse_sexp(tokens: &[String], pos: &mut usize) -> Result<Sexp, SolverError> {
    let t = tokens.get(*pos).ok_or_else(|| SolverError::Parse("unexpected end".into()))?;
    *pos += 1;
    match t.as_str() {
        "(" => {
            let mut items = Vec::new();
            while tokens.get(*pos).map(String::as_str) != Some(")") {
                if *pos >= tokens.len() {
                    return Err(SolverError::Parse("unbalanced".into()));
                }
                items.push(parse_sexp(tokens, pos)?);
            }
            *pos += 1;
            Ok(Sexp::List(items))
        }
        ")" => Err(SolverError::Parse("unexpected )".into())),
        _ => Ok(Sexp::Atom(t.clone())),
    }
}

fn parse_value(s: &Sexp) -> Option<BvValue> {
    match s {
        Sexp::Atom(a) if a == "true" => Some(BvValue::boolean(true)),
        Sexp::Atom(a) if a == "false" => Some(BvValue::boolean(false)),
        Sexp::Atom(a) if a.starts_with("#x") => {
            let hex = &a[2..];
            let width = 4 * hex.len() as u32;
            let mut bytes = Vec::new();
            let digits: Vec<u8> = hex.bytes().rev().map(|d| (d as char).to_digit(16).unwrap_or(0) as u8).collect();
            for pair in digits.chunks(2) {
                bytes.push(pair[0] | pair.get(1).map(|h| h << 4).unwrap_or(0));
            }
            Some(BvValue { width, bytes })
        }
        Sexp::Atom(a) if a.starts_with("#b") => {
            let bits: Vec<u8> = a[2..].bytes().rev().map(|b| b - b'0').collect();
            let width = bits.len() as u32;
            let bytes = bits
                .chunks(8)
                .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, b)| acc | (b << i)))
                .collect();
            Some(BvValue { width, bytes })
        }
        Sexp::List(items) => match items.as_slice() {
            [Sexp::Atom(u), Sexp::Atom(v), Sexp::Atom(w)] if u == "_" && v.starts_with("bv") => {
                let width: u32 = w.parse().ok()?;
                let digits = &v[2..];
                let mut bytes = vec![0u8; width.div_ceil(8) as usize];
                for d in digits.bytes() {
                    let mut carry = (d - b'0') as u32;
                    for b in bytes.iter_mut() {
                        let x = *b as u32 * 10 + carry;
                        *b = x as u8;
                        carry = x >> 8;
                    }
                }
                Some(BvValue { width, bytes })
            }
            _ => None,
        },
        _ => None,
    }
}

/// Parses a `get-value` response into the value of each entry.
fn parse_values(text: &str) -> Result<Vec<Option<BvValue>>, SolverError> {
    let tokens = tokenize(text);
    let mut pos = 0;
    let Sexp::List(pairs) = parse_sexp(&tokens, &mut pos)? else {
        return Err(SolverError::Parse(text.chars().take(80).collect()));
    };
    Ok(pairs
        .iter()
        .map(|p| match p {
            Sexp::List(kv) if kv.len() == 2 => parse_value(&kv[1]),
            _ => None,
        })
        .collect())
}

/// Outcome of a full equivalence check.
#[derive(Clone, Debug, PartialEq)]
pub enum Equivalence {
    Equivalent,
    /// Replayed input on which the programs differ.
    Counterexample(Box<MachineState>),
    /// The solver found a difference that could not be replayed concretely.
    Different,
    Unknown(String),
}

/// Cache key: the canonical form's encoding.
pub fn cache_key(p: &Program, spec: &ProgramSpec) -> Vec<u8> {
    encode(&canonicalize(p, spec))
}

#[derive(Default)]
pub struct VerificationCache {
    map: HashMap<Vec<u8>, Equivalence>,
    pub lookups: usize,
    pub hits: usize,
}

impl VerificationCache {
    pub fn get(&mut self, key: &[u8]) -> Option<Equivalence> {
        self.lookups += 1;
        let r = self.map.get(key).cloned();
        if r.is_some() {
            self.hits += 1;
        }
        r
    }

    pub fn insert(&mut self, key: Vec<u8>, v: Equivalence) {
        self.map.insert(key, v);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }
}

/// Checks candidates against one source program.
pub struct EquivalenceChecker {
    pub solver: Solver,
    pub spec: ProgramSpec,
    pub source: Program,
    pub options: VcOptions,
    pub cache: VerificationCache,
    pub use_cache: bool,
    pub queries: usize,
}

impl EquivalenceChecker {
    pub fn new(source: &Program, spec: &ProgramSpec, config: SolverConfig) -> EquivalenceChecker {
        EquivalenceChecker {
            solver: Solver::new(config),
            spec: spec.clone(),
            source: source.clone(),
            options: VcOptions::default(),
            cache: VerificationCache::default(),
            use_cache: true,
            queries: 0,
        }
    }

    /// Full-program equivalence with caching and counterexample replay.
    pub fn check(&mut self, cand: &Program) -> Result<Equivalence, SolverError> {
        if !self.use_cache {
            return self.check_uncached(cand);
        }
        let key = cache_key(cand, &self.spec);
        if let Some(v) = self.cache.get(&key) {
            return Ok(v);
        }
        let r = self.check_uncached(cand)?;
        if !matches!(r, Equivalence::Unknown(_)) {
            self.cache.insert(key, r.clone());
        }
        Ok(r)
    }

    fn check_uncached(&mut self, cand: &Program) -> Result<Equivalence, SolverError> {
        let q = match equivalence_query(&self.source, cand, &self.spec, self.options) {
            Ok(q) => q,
            Err(e @ VcError::Refused { .. }) | Err(e @ VcError::Analysis(_)) => return Ok(Equivalence::Unknown(e.to_string())),
        };
        self.queries += 1;
        Ok(match self.solver.check(&q)? {
            Verdict::Unsat => Equivalence::Equivalent,
            Verdict::Unknown(r) => Equivalence::Unknown(r),
            Verdict::Sat(values) => match q.template.as_ref().map(|t| t.build(&values).0) {
                Some(input) if differs(&self.source, cand, &self.spec, &input) => Equivalence::Counterexample(Box::new(input)),
                _ => {
                    debug!("counterexample did not replay");
                    Equivalence::Different
                }
            },
        })
    }

    /// Window check: `true` only when the solver proves the replacement
    /// equivalent under the window's context.
    pub fn check_window(&mut self, p: &Program, w2: &[Instruction], ws: &WindowSpec) -> Result<bool, SolverError> {
        let Ok(q) = window_query(p, w2, ws, &self.spec, self.options) else {
            return Ok(false);
        };
        self.queries += 1;
        Ok(self.solver.check(&q)?.is_unsat())
    }
}

/// Outputs of `p` on `input` as computed by the solver from the encoding:
/// r0 and the final packet bytes.
pub fn solver_outputs(solver: &mut Solver, p: &Program, spec: &ProgramSpec, input: &MachineState) -> Result<Option<(u64, Vec<u8>)>, SolverError> {
    let Ok(q) = concrete_query(p, spec, input, VcOptions::default()) else {
        return Ok(None);
    };
    match solver.check(&q)? {
        Verdict::Sat(values) => {
            let get = |i: usize| values[q.outputs[i]].as_ref().map(BvValue::as_u64);
            let Some(r0) = get(0) else { return Ok(None) };
            let packet: Option<Vec<u8>> = (1..q.outputs.len()).map(|i| get(i).map(|b| b as u8)).collect();
            Ok(packet.map(|pk| (r0, pk)))
        }
        _ => Ok(None),
    }
}

/// Whether `a` and `b` produce different outputs (or fault differently) on `input`.
pub fn differs(a: &Program, b: &Program, spec: &ProgramSpec, input: &MachineState) -> bool {
    let x = execute(a, spec, input, default_fuel(a));
    let y = execute(b, spec, input, default_fuel(b));
    match (x, y) {
        (Ok(x), Ok(y)) => !x.same_as(&y, spec),
        (Err(_), Err(_)) => false,
        _ => true,
    }
}
