//! Bit-vector and boolean terms with light constant folding, emitted as
//! SMT-LIB2.
//!
//! Terms are reference-counted trees; shared subterms are emitted once via
//! `define-fun`, so building formulas as DAGs stays linear in size.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::rc::Rc;

use bpfsynth_core::semantics::BitVec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sort {
    Bool,
    Bv(u32),
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sort::Bool => f.write_str("Bool"),
            Sort::Bv(w) => write!(f, "(_ BitVec {w})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BvOp {
    Add,
    Sub,
    Mul,
    Udiv,
    Or,
    And,
    Xor,
    Shl,
    Lshr,
    Ashr,
}

impl BvOp {
    fn smt(self) -> &'static str {
        match self {
            BvOp::Add => "bvadd",
            BvOp::Sub => "bvsub",
            BvOp::Mul => "bvmul",
            BvOp::Udiv => "bvudiv",
            BvOp::Or => "bvor",
            BvOp::And => "bvand",
            BvOp::Xor => "bvxor",
            BvOp::Shl => "bvshl",
            BvOp::Lshr => "bvlshr",
            BvOp::Ashr => "bvashr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Ult,
    Ule,
    Slt,
    Sle,
}

impl CmpOp {
    fn smt(self) -> &'static str {
        match self {
            CmpOp::Ult => "bvult",
            CmpOp::Ule => "bvule",
            CmpOp::Slt => "bvslt",
            CmpOp::Sle => "bvsle",
        }
    }
}

#[derive(Debug)]
enum Kind {
    Const(u64),
    BoolConst(bool),
    Var(Rc<str>),
    Bin(BvOp, Term, Term),
    Neg(Term),
    BvNot(Term),
    Extract(u32, u32, Term),
    Concat(Term, Term),
    ZeroExt(u32, Term),
    SignExt(u32, Term),
    Eq(Term, Term),
    Cmp(CmpOp, Term, Term),
    Not(Term),
    And(Vec<Term>),
    Or(Vec<Term>),
    Implies(Term, Term),
    Ite(Term, Term, Term),
    App(Rc<str>, Vec<Term>),
}

#[derive(Debug)]
struct Node {
    kind: Kind,
    sort: Sort,
}

/// An immutable term. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Term(Rc<Node>);

fn mask(w: u32) -> u64 {
    if w >= 64 { u64::MAX } else { (1u64 << w) - 1 }
}

fn to_signed(v: u64, w: u32) -> i64 {
    let s = 64 - w;
    ((v << s) as i64) >> s
}

impl Term {
    fn mk(kind: Kind, sort: Sort) -> Term {
        Term(Rc::new(Node { kind, sort }))
    }

    pub fn bv(v: u64, w: u32) -> Term {
        assert!((1..=64).contains(&w), "constant width {w}");
        Term::mk(Kind::Const(v & mask(w)), Sort::Bv(w))
    }

    pub fn bv64(v: u64) -> Term {
        Term::bv(v, 64)
    }

    pub fn bool(b: bool) -> Term {
        Term::mk(Kind::BoolConst(b), Sort::Bool)
    }

    /// A free variable. Names must be valid SMT-LIB simple symbols.
    pub fn var(name: &str, sort: Sort) -> Term {
        Term::mk(Kind::Var(name.into()), sort)
    }

    /// Uninterpreted function application.
    pub fn app(name: &str, args: Vec<Term>, sort: Sort) -> Term {
        Term::mk(Kind::App(name.into(), args), sort)
    }

    pub fn sort(&self) -> Sort {
        self.0.sort
    }

    pub fn width(&self) -> u32 {
        match self.0.sort {
            Sort::Bv(w) => w,
            Sort::Bool => panic!("width of a boolean term"),
        }
    }

    pub fn same(&self, o: &Term) -> bool {
        Rc::ptr_eq(&self.0, &o.0)
    }

    pub fn as_const(&self) -> Option<u64> {
        match self.0.kind {
            Kind::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self.0.kind {
            Kind::BoolConst(b) => Some(b),
            _ => None,
        }
    }

    pub fn var_name(&self) -> Option<&str> {
        match &self.0.kind {
            Kind::Var(n) => Some(n),
            _ => None,
        }
    }

    fn bin(op: BvOp, a: &Term, b: &Term) -> Term {
        let w = a.width();
        assert_eq!(w, b.width(), "width mismatch in {op:?}");
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            let m = mask(w);
            let v = match op {
                BvOp::Add => x.wrapping_add(y),
                BvOp::Sub => x.wrapping_sub(y),
                BvOp::Mul => x.wrapping_mul(y),
                BvOp::Udiv => x.checked_div(y).unwrap_or(m),
                BvOp::Or => x | y,
                BvOp::And => x & y,
                BvOp::Xor => x ^ y,
                BvOp::Shl => if y >= w as u64 { 0 } else { x << y },
                BvOp::Lshr => if y >= w as u64 { 0 } else { x >> y },
                BvOp::Ashr => (to_signed(x, w) >> y.min(w as u64 - 1)) as u64,
            };
            return Term::bv(v, w);
        }
        let zero = |t: &Term| t.as_const() == Some(0);
        let ones = |t: &Term| t.as_const() == Some(mask(w));
        match op {
            BvOp::Add | BvOp::Or | BvOp::Xor if zero(b) => return a.clone(),
            BvOp::Add | BvOp::Or | BvOp::Xor if zero(a) => return b.clone(),
            BvOp::Sub | BvOp::Shl | BvOp::Lshr | BvOp::Ashr if zero(b) => return a.clone(),
            BvOp::And | BvOp::Mul if zero(a) || zero(b) => return Term::bv(0, w),
            BvOp::And if ones(b) => return a.clone(),
            BvOp::And if ones(a) => return b.clone(),
            BvOp::Mul if b.as_const() == Some(1) => return a.clone(),
            BvOp::Mul if a.as_const() == Some(1) => return b.clone(),
            BvOp::Sub | BvOp::Xor if a.same(b) => return Term::bv(0, w),
            _ => {}
        }
        // (x + c1) + c2 => x + (c1 + c2)
        if let (BvOp::Add, Some(c2), Kind::Bin(BvOp::Add, x, c1)) = (op, b.as_const(), &a.0.kind) {
            if let Some(c1) = c1.as_const() {
                return Term::bin(BvOp::Add, x, &Term::bv(c1.wrapping_add(c2), w));
            }
        }
        Term::mk(Kind::Bin(op, a.clone(), b.clone()), Sort::Bv(w))
    }

    pub fn bvadd(&self, o: &Term) -> Term {
        Term::bin(BvOp::Add, self, o)
    }
    pub fn bvsub(&self, o: &Term) -> Term {
        Term::bin(BvOp::Sub, self, o)
    }
    pub fn bvmul(&self, o: &Term) -> Term {
        Term::bin(BvOp::Mul, self, o)
    }
    /// SMT-LIB unsigned division (division by zero yields all ones).
    pub fn bvudiv(&self, o: &Term) -> Term {
        Term::bin(BvOp::Udiv, self, o)
    }
    pub fn bvor(&self, o: &Term) -> Term {
        Term::bin(BvOp::Or, self, o)
    }
    pub fn bvand(&self, o: &Term) -> Term {
        Term::bin(BvOp::And, self, o)
    }
    pub fn bvxor(&self, o: &Term) -> Term {
        Term::bin(BvOp::Xor, self, o)
    }
    pub fn bvshl(&self, o: &Term) -> Term {
        Term::bin(BvOp::Shl, self, o)
    }
    pub fn bvlshr(&self, o: &Term) -> Term {
        Term::bin(BvOp::Lshr, self, o)
    }
    pub fn bvashr(&self, o: &Term) -> Term {
        Term::bin(BvOp::Ashr, self, o)
    }

    pub fn bvneg(&self) -> Term {
        match self.as_const() {
            Some(v) => Term::bv(v.wrapping_neg(), self.width()),
            None => Term::mk(Kind::Neg(self.clone()), self.sort()),
        }
    }

    pub fn bvnot(&self) -> Term {
        match self.as_const() {
            Some(v) => Term::bv(!v, self.width()),
            None => Term::mk(Kind::BvNot(self.clone()), self.sort()),
        }
    }

    /// Bits `hi..=lo`.
    pub fn extract(&self, hi: u32, lo: u32) -> Term {
        let w = self.width();
        assert!(lo <= hi && hi < w, "extract {hi}..{lo} of width {w}");
        if lo == 0 && hi == w - 1 {
            return self.clone();
        }
        let nw = hi - lo + 1;
        match &self.0.kind {
            Kind::Const(v) => return Term::bv(v >> lo, nw),
            Kind::Extract(_, l2, x) => return x.extract(hi + l2, lo + l2),
            Kind::Concat(a, b) => {
                let bw = b.width();
                if hi < bw {
                    return b.extract(hi, lo);
                }
                if lo >= bw {
                    return a.extract(hi - bw, lo - bw);
                }
            }
            Kind::ZeroExt(_, x) => {
                let xw = x.width();
                if hi < xw {
                    return x.extract(hi, lo);
                }
                if lo >= xw {
                    return Term::bv(0, nw);
                }
            }
            _ => {}
        }
        Term::mk(Kind::Extract(hi, lo, self.clone()), Sort::Bv(nw))
    }

    /// `self` in the high bits, `lo` in the low bits.
    pub fn concat(&self, lo: &Term) -> Term {
        let w = self.width() + lo.width();
        if let (Some(a), Some(b)) = (self.as_const(), lo.as_const()) {
            if w <= 64 {
                return Term::bv((a << lo.width()) | b, w);
            }
        }
        if let (Kind::Extract(h1, l1, x), Kind::Extract(h2, l2, y)) = (&self.0.kind, &lo.0.kind) {
            if x.same(y) && *l1 == h2 + 1 {
                return x.extract(*h1, *l2);
            }
        }
        // (x[h..m] ++ (x[m-1..l] ++ rest)) => x[h..l] ++ rest
        if let (Kind::Extract(h1, l1, x), Kind::Concat(mid, rest)) = (&self.0.kind, &lo.0.kind) {
            if let Kind::Extract(h2, l2, y) = &mid.0.kind {
                if x.same(y) && *l1 == h2 + 1 {
                    return x.extract(*h1, *l2).concat(rest);
                }
            }
        }
        if self.as_const() == Some(0) {
            return lo.zext(self.width());
        }
        Term::mk(Kind::Concat(self.clone(), lo.clone()), Sort::Bv(w))
    }

    pub fn zext(&self, by: u32) -> Term {
        if by == 0 {
            return self.clone();
        }
        let w = self.width() + by;
        if let Some(v) = self.as_const() {
            if w <= 64 {
                return Term::bv(v, w);
            }
        }
        Term::mk(Kind::ZeroExt(by, self.clone()), Sort::Bv(w))
    }

    pub fn sext(&self, by: u32) -> Term {
        if by == 0 {
            return self.clone();
        }
        let w = self.width() + by;
        if let Some(v) = self.as_const() {
            if w <= 64 {
                return Term::bv(to_signed(v, self.width()) as u64, w);
            }
        }
        Term::mk(Kind::SignExt(by, self.clone()), Sort::Bv(w))
    }

    pub fn equals(&self, o: &Term) -> Term {
        assert_eq!(self.sort(), o.sort(), "sort mismatch in =");
        if self.same(o) {
            return Term::bool(true);
        }
        if let (Some(a), Some(b)) = (self.as_const(), o.as_const()) {
            return Term::bool(a == b);
        }
        if let (Some(a), Some(b)) = (self.as_bool(), o.as_bool()) {
            return Term::bool(a == b);
        }
        Term::mk(Kind::Eq(self.clone(), o.clone()), Sort::Bool)
    }

    fn cmp(op: CmpOp, a: &Term, b: &Term) -> Term {
        let w = a.width();
        assert_eq!(w, b.width());
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            let (sx, sy) = (to_signed(x, w), to_signed(y, w));
            return Term::bool(match op {
                CmpOp::Ult => x < y,
                CmpOp::Ule => x <= y,
                CmpOp::Slt => sx < sy,
                CmpOp::Sle => sx <= sy,
            });
        }
        if a.same(b) {
            return Term::bool(matches!(op, CmpOp::Ule | CmpOp::Sle));
        }
        Term::mk(Kind::Cmp(op, a.clone(), b.clone()), Sort::Bool)
    }

    pub fn bvult(&self, o: &Term) -> Term {
        Term::cmp(CmpOp::Ult, self, o)
    }
    pub fn bvule(&self, o: &Term) -> Term {
        Term::cmp(CmpOp::Ule, self, o)
    }
    pub fn bvslt(&self, o: &Term) -> Term {
        Term::cmp(CmpOp::Slt, self, o)
    }
    pub fn bvsle(&self, o: &Term) -> Term {
        Term::cmp(CmpOp::Sle, self, o)
    }

    pub fn not(&self) -> Term {
        match &self.0.kind {
            Kind::BoolConst(b) => Term::bool(!b),
            Kind::Not(x) => x.clone(),
            _ => Term::mk(Kind::Not(self.clone()), Sort::Bool),
        }
    }

    pub fn and_all(items: impl IntoIterator<Item = Term>) -> Term {
        let mut out = Vec::new();
        for t in items {
            match &t.0.kind {
                Kind::BoolConst(true) => {}
                Kind::BoolConst(false) => return Term::bool(false),
                Kind::And(xs) => out.extend(xs.iter().cloned()),
                _ => out.push(t),
            }
        }
        match out.len() {
            0 => Term::bool(true),
            1 => out.pop().unwrap(),
            _ => Term::mk(Kind::And(out), Sort::Bool),
        }
    }

    pub fn or_all(items: impl IntoIterator<Item = Term>) -> Term {
        let mut out = Vec::new();
        for t in items {
            match &t.0.kind {
                Kind::BoolConst(false) => {}
                Kind::BoolConst(true) => return Term::bool(true),
                Kind::Or(xs) => out.extend(xs.iter().cloned()),
                _ => out.push(t),
            }
        }
        match out.len() {
            0 => Term::bool(false),
            1 => out.pop().unwrap(),
            _ => Term::mk(Kind::Or(out), Sort::Bool),
        }
    }

    pub fn and(&self, o: &Term) -> Term {
        Term::and_all([self.clone(), o.clone()])
    }

    pub fn or(&self, o: &Term) -> Term {
        Term::or_all([self.clone(), o.clone()])
    }

    pub fn implies(&self, o: &Term) -> Term {
        match (self.as_bool(), o.as_bool()) {
            (Some(false), _) | (_, Some(true)) => Term::bool(true),
            (Some(true), _) => o.clone(),
            (_, Some(false)) => self.not(),
            _ => Term::mk(Kind::Implies(self.clone(), o.clone()), Sort::Bool),
        }
    }

    /// `if self then a else b`.
    pub fn ite(&self, a: &Term, b: &Term) -> Term {
        assert_eq!(a.sort(), b.sort(), "ite branch sorts differ");
        match self.as_bool() {
            Some(true) => return a.clone(),
            Some(false) => return b.clone(),
            None => {}
        }
        if a.same(b) {
            return a.clone();
        }
        if let (Some(x), Some(y)) = (a.as_bool(), b.as_bool()) {
            return match (x, y) {
                (true, false) => self.clone(),
                (false, true) => self.not(),
                _ => a.clone(),
            };
        }
        Term::mk(Kind::Ite(self.clone(), a.clone(), b.clone()), a.sort())
    }

    fn children(&self) -> Vec<&Term> {
        match &self.0.kind {
            Kind::Const(_) | Kind::BoolConst(_) | Kind::Var(_) => vec![],
            Kind::Bin(_, a, b) | Kind::Concat(a, b) | Kind::Eq(a, b) | Kind::Cmp(_, a, b) | Kind::Implies(a, b) => {
                vec![a, b]
            }
            Kind::Neg(a) | Kind::BvNot(a) | Kind::Extract(_, _, a) | Kind::ZeroExt(_, a) | Kind::SignExt(_, a) | Kind::Not(a) => {
                vec![a]
            }
            Kind::And(xs) | Kind::Or(xs) | Kind::App(_, xs) => xs.iter().collect(),
            Kind::Ite(c, a, b) => vec![c, a, b],
        }
    }

    /// Evaluates a term whose variables and function applications are all
    /// supplied by `env` (keyed by variable name, or by the emitted
    /// application text for uninterpreted functions). Widths above 64 are
    /// unsupported.
    pub fn eval(&self, env: &dyn Fn(&str) -> Option<u64>) -> Option<u64> {
        let s = self.sort();
        let b = |x: bool| Some(x as u64);
        let r = match &self.0.kind {
            Kind::Const(v) => Some(*v),
            Kind::BoolConst(x) => b(*x),
            Kind::Var(n) => env(n),
            Kind::App(..) => None,
            Kind::Bin(op, x, y) => {
                let (x, y) = (Term::bv(x.eval(env)?, x.width()), Term::bv(y.eval(env)?, y.width()));
                Term::bin(*op, &x, &y).as_const()
            }
            Kind::Neg(x) => Some(x.eval(env)?.wrapping_neg()),
            Kind::BvNot(x) => Some(!x.eval(env)?),
            Kind::Extract(_, lo, x) => Some(x.eval(env)? >> lo),
            Kind::Concat(x, y) => Some(x.eval(env)?.checked_shl(y.width()).unwrap_or(0) | y.eval(env)?),
            Kind::ZeroExt(_, x) => x.eval(env),
            Kind::SignExt(_, x) => Some(to_signed(x.eval(env)?, x.width()) as u64),
            Kind::Eq(x, y) => b(x.eval(env)? == y.eval(env)?),
            Kind::Cmp(op, x, y) => {
                let (x, y) = (Term::bv(x.eval(env)?, x.width()), Term::bv(y.eval(env)?, y.width()));
                Term::cmp(*op, &x, &y).as_bool().map(|v| v as u64)
            }
            Kind::Not(x) => b(x.eval(env)? == 0),
            Kind::And(xs) => {
                let mut all = true;
                for x in xs {
                    all &= x.eval(env)? != 0;
                }
                b(all)
            }
            Kind::Or(xs) => {
                let mut any = false;
                for x in xs {
                    any |= x.eval(env)? != 0;
                }
                b(any)
            }
            Kind::Implies(x, y) => b(x.eval(env)? == 0 || y.eval(env)? != 0),
            Kind::Ite(c, x, y) => {
                if c.eval(env)? != 0 {
                    x.eval(env)
                } else {
                    y.eval(env)
                }
            }
        }?;
        match s {
            Sort::Bv(w) if w <= 64 => Some(r & mask(w)),
            Sort::Bv(_) => None,
            Sort::Bool => Some(r),
        }
    }
}

/// The BPF-level semantics over symbolic 64-bit terms.
impl BitVec for Term {
    type Bool = Term;

    fn constant(v: u64) -> Term {
        Term::bv64(v)
    }
    fn add(&self, o: &Term) -> Term {
        self.bvadd(o)
    }
    fn sub(&self, o: &Term) -> Term {
        self.bvsub(o)
    }
    fn mul(&self, o: &Term) -> Term {
        self.bvmul(o)
    }
    fn udiv(&self, o: &Term) -> Term {
        let z = Term::bv(0, o.width());
        o.equals(&z).ite(&z, &self.bvudiv(o))
    }
    fn or(&self, o: &Term) -> Term {
        self.bvor(o)
    }
    fn and(&self, o: &Term) -> Term {
        self.bvand(o)
    }
    fn xor(&self, o: &Term) -> Term {
        self.bvxor(o)
    }
    fn shl(&self, o: &Term) -> Term {
        self.bvshl(o)
    }
    fn lshr(&self, o: &Term) -> Term {
        self.bvlshr(o)
    }
    fn ashr(&self, o: &Term) -> Term {
        self.bvashr(o)
    }
    fn neg(&self) -> Term {
        self.bvneg()
    }
    fn low32(&self) -> Term {
        self.extract(31, 0).zext(32)
    }
    fn sext32(&self) -> Term {
        self.extract(31, 0).sext(32)
    }
    fn eq(&self, o: &Term) -> Term {
        self.equals(o)
    }
    fn ne(&self, o: &Term) -> Term {
        self.equals(o).not()
    }
    fn ult(&self, o: &Term) -> Term {
        self.bvult(o)
    }
    fn ule(&self, o: &Term) -> Term {
        self.bvule(o)
    }
    fn slt(&self, o: &Term) -> Term {
        self.bvslt(o)
    }
    fn sle(&self, o: &Term) -> Term {
        self.bvsle(o)
    }
    fn bool_const(b: bool) -> Term {
        Term::bool(b)
    }
}

/// Accumulates declarations, shared definitions and assertions.
#[derive(Default)]
pub struct Script {
    decls: String,
    defs: String,
    asserts: String,
    names: HashMap<*const Node, String>,
    keep: Vec<Term>,
    vars: HashMap<Rc<str>, Sort>,
    funs: HashMap<Rc<str>, (Vec<Sort>, Sort)>,
    next: usize,
}

impl Script {
    pub fn new() -> Script {
        Script::default()
    }

    fn literal(t: &Term) -> Option<String> {
        match &t.0.kind {
            Kind::Const(v) => Some(format!("(_ bv{} {})", v, t.width())),
            Kind::BoolConst(b) => Some(b.to_string()),
            Kind::Var(n) => Some(n.to_string()),
            _ => None,
        }
    }

    fn lookup(&self, t: &Term) -> String {
        Script::literal(t).unwrap_or_else(|| self.names[&Rc::as_ptr(&t.0)].clone())
    }

    fn declare_var(&mut self, name: &Rc<str>, sort: Sort) {
        match self.vars.get(name) {
            Some(s) => assert_eq!(*s, sort, "variable {name} declared with two sorts"),
            None => {
                self.vars.insert(name.clone(), sort);
                let _ = writeln!(self.decls, "(declare-fun {name} () {sort})");
            }
        }
    }

    fn declare_fun(&mut self, name: &Rc<str>, args: &[Term], sort: Sort) {
        let sig: Vec<Sort> = args.iter().map(Term::sort).collect();
        match self.funs.get(name) {
            Some((a, s)) => assert!(*a == sig && *s == sort, "function {name} used with two signatures"),
            None => {
                let list: Vec<String> = sig.iter().map(|s| s.to_string()).collect();
                let _ = writeln!(self.decls, "(declare-fun {name} ({}) {sort})", list.join(" "));
                self.funs.insert(name.clone(), (sig, sort));
            }
        }
    }

    /// Emits `t` and its subterms if needed; returns an expression naming it.
    pub fn name_of(&mut self, t: &Term) -> String {
        let mut stack: Vec<(Term, bool)> = vec![(t.clone(), false)];
        while let Some((cur, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&cur.0);
            if self.names.contains_key(&key) {
                continue;
            }
            if let Kind::Var(n) = &cur.0.kind {
                self.declare_var(n, cur.sort());
                continue;
            }
            if Script::literal(&cur).is_some() {
                continue;
            }
            if !expanded {
                stack.push((cur.clone(), true));
                for c in cur.children() {
                    stack.push((c.clone(), false));
                }
                continue;
            }
            let a = |s: &Script, i: usize| s.lookup(cur.children()[i]);
            let body = match &cur.0.kind {
                Kind::Bin(op, ..) => format!("({} {} {})", op.smt(), a(self, 0), a(self, 1)),
                Kind::Neg(_) => format!("(bvneg {})", a(self, 0)),
                Kind::BvNot(_) => format!("(bvnot {})", a(self, 0)),
                Kind::Extract(h, l, _) => format!("((_ extract {h} {l}) {})", a(self, 0)),
                Kind::Concat(..) => format!("(concat {} {})", a(self, 0), a(self, 1)),
                Kind::ZeroExt(n, _) => format!("((_ zero_extend {n}) {})", a(self, 0)),
                Kind::SignExt(n, _) => format!("((_ sign_extend {n}) {})", a(self, 0)),
                Kind::Eq(..) => format!("(= {} {})", a(self, 0), a(self, 1)),
                Kind::Cmp(op, ..) => format!("({} {} {})", op.smt(), a(self, 0), a(self, 1)),
                Kind::Not(_) => format!("(not {})", a(self, 0)),
                Kind::Implies(..) => format!("(=> {} {})", a(self, 0), a(self, 1)),
                Kind::Ite(..) => format!("(ite {} {} {})", a(self, 0), a(self, 1), a(self, 2)),
                Kind::And(xs) | Kind::Or(xs) => {
                    let op = if matches!(cur.0.kind, Kind::And(_)) { "and" } else { "or" };
                    let parts: Vec<String> = xs.iter().map(|x| self.lookup(x)).collect();
                    format!("({op} {})", parts.join(" "))
                }
                Kind::App(f, xs) => {
                    self.declare_fun(f, xs, cur.sort());
                    if xs.is_empty() {
                        f.to_string()
                    } else {
                        let parts: Vec<String> = xs.iter().map(|x| self.lookup(x)).collect();
                        format!("({f} {})", parts.join(" "))
                    }
                }
                Kind::Const(_) | Kind::BoolConst(_) | Kind::Var(_) => unreachable!(),
            };
            let name = format!("t{}", self.next);
            self.next += 1;
            let _ = writeln!(self.defs, "(define-fun {name} () {} {body})", cur.sort());
            self.names.insert(key, name);
            self.keep.push(cur);
        }
        self.lookup(t)
    }

    pub fn assert(&mut self, t: &Term) {
        assert_eq!(t.sort(), Sort::Bool, "asserting a bit-vector term");
        if t.as_bool() == Some(true) {
            return;
        }
        let n = self.name_of(t);
        let _ = writeln!(self.asserts, "(assert {n})");
    }

    /// Declarations, definitions and assertions, without `check-sat`.
    pub fn text(&self) -> String {
        let mut s = String::with_capacity(self.decls.len() + self.defs.len() + self.asserts.len() + 32);
        s.push_str("(set-logic QF_UFBV)\n");
        s.push_str(&self.decls);
        s.push_str(&self.defs);
        s.push_str(&self.asserts);
        s
    }

    pub fn assertion_count(&self) -> usize {
        self.asserts.lines().count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpfsynth_core::semantics::{alu32, alu64};
    use bpfsynth_core::AluOp;

    #[test]
    fn constants_fold_like_the_interpreter() {
        for op in AluOp::ALL {
            for (a, b) in [(5u64, 3u64), (u64::MAX, 65), (0x8000_0000, 4), (7, 0), (1 << 63, 63)] {
                let t = alu64(op, &Term::bv64(a), &Term::bv64(b));
                assert_eq!(t.as_const(), Some(alu64(op, &a, &b)), "{op:?} {a} {b}");
                let t = alu32(op, &Term::bv64(a), &Term::bv64(b));
                assert_eq!(t.as_const(), Some(alu32(op, &a, &b)), "{op:?}32 {a} {b}");
            }
        }
    }

    #[test]
    fn byte_split_and_rejoin_folds() {
        let x = Term::var("x", Sort::Bv(64));
        let bytes: Vec<Term> = (0..4).map(|i| x.extract(8 * i + 7, 8 * i)).collect();
        let joined = bytes[3].concat(&bytes[2].concat(&bytes[1].concat(&bytes[0])));
        let direct = x.extract(31, 0);
        assert!(matches!(joined.0.kind, Kind::Extract(31, 0, _)));
        assert_eq!(joined.eval(&|_| Some(0x1122_3344_5566_7788)), direct.eval(&|_| Some(0x1122_3344_5566_7788)));
    }

    #[test]
    fn constant_offsets_accumulate() {
        let fp = Term::var("fp", Sort::Bv(64));
        let b = fp.bvadd(&Term::bv64(-4i64 as u64)).bvadd(&Term::bv64(-4i64 as u64));
        assert!(matches!(&b.0.kind, Kind::Bin(BvOp::Add, x, c) if x.same(&fp) && c.as_const() == Some(-8i64 as u64)));
    }

    #[test]
    fn script_shares_subterms() {
        let x = Term::var("x", Sort::Bv(64));
        let y = x.bvadd(&Term::bv64(1));
        let z = y.bvmul(&y);
        let mut s = Script::new();
        s.assert(&z.equals(&Term::bv64(4)));
        let text = s.text();
        assert_eq!(text.matches("bvadd").count(), 1);
        assert_eq!(text.matches("declare-fun x").count(), 1);
    }

    #[test]
    fn eval_matches_fold() {
        let x = Term::var("x", Sort::Bv(64));
        let t = alu32(AluOp::Arsh, &x, &Term::bv64(4));
        assert_eq!(t.eval(&|_| Some(0x8000_0000)), Some(0xf800_0000));
        let c = x.bvult(&Term::bv64(10)).ite(&Term::bv64(1), &Term::bv64(2));
        assert_eq!(c.eval(&|_| Some(3)), Some(1));
    }
}
