//! ALU and branch semantics written once over an abstract 64-bit value.
//!
//! The interpreter instantiates [`BitVec`] with `u64`; the verifier
//! instantiates it with symbolic terms. Both therefore agree by construction
//! on wraparound, shift masking, division by zero and 32-bit truncation.

use crate::isa::{AluOp, JmpCond};

pub trait BitVec: Clone {
    type Bool: Clone;

    fn constant(v: u64) -> Self;

    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    /// Unsigned division; division by zero yields zero.
    fn udiv(&self, o: &Self) -> Self;
    fn or(&self, o: &Self) -> Self;
    fn and(&self, o: &Self) -> Self;
    fn xor(&self, o: &Self) -> Self;
    /// Shifts take the amount as-is; callers mask it first.
    fn shl(&self, o: &Self) -> Self;
    fn lshr(&self, o: &Self) -> Self;
    fn ashr(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    /// Keeps the low 32 bits, zeroing the rest.
    fn low32(&self) -> Self;
    /// Sign-extends the low 32 bits.
    fn sext32(&self) -> Self;

    fn eq(&self, o: &Self) -> Self::Bool;
    fn ne(&self, o: &Self) -> Self::Bool;
    fn ult(&self, o: &Self) -> Self::Bool;
    fn ule(&self, o: &Self) -> Self::Bool;
    fn slt(&self, o: &Self) -> Self::Bool;
    fn sle(&self, o: &Self) -> Self::Bool;
    fn bool_const(b: bool) -> Self::Bool;
}

/// 64-bit ALU operation `dst op src`.
pub fn alu64<V: BitVec>(op: AluOp, dst: &V, src: &V) -> V {
    match op {
        AluOp::Add => dst.add(src),
        AluOp::Sub => dst.sub(src),
        AluOp::Mul => dst.mul(src),
        AluOp::Div => dst.udiv(src),
        AluOp::Or => dst.or(src),
        AluOp::And => dst.and(src),
        AluOp::Xor => dst.xor(src),
        AluOp::Lsh => dst.shl(&src.and(&V::constant(63))),
        AluOp::Rsh => dst.lshr(&src.and(&V::constant(63))),
        AluOp::Arsh => dst.ashr(&src.and(&V::constant(63))),
        AluOp::Neg => dst.neg(),
        AluOp::Mov => src.clone(),
    }
}

/// 32-bit ALU operation: operands truncated, result zero-extended.
pub fn alu32<V: BitVec>(op: AluOp, dst: &V, src: &V) -> V {
    let a = dst.low32();
    let b = src.low32();
    let amt = || b.and(&V::constant(31));
    let r = match op {
        AluOp::Add => a.add(&b),
        AluOp::Sub => a.sub(&b),
        AluOp::Mul => a.mul(&b),
        AluOp::Div => a.udiv(&b),
        AluOp::Or => return a.or(&b),
        AluOp::And => return a.and(&b),
        AluOp::Xor => return a.xor(&b),
        AluOp::Lsh => a.shl(&amt()),
        AluOp::Rsh => return a.lshr(&amt()),
        AluOp::Arsh => a.sext32().ashr(&amt()),
        AluOp::Neg => a.neg(),
        AluOp::Mov => return b,
    };
    r.low32()
}

/// Branch condition `dst cond src` on 64-bit operands.
pub fn branch<V: BitVec>(cond: JmpCond, dst: &V, src: &V) -> V::Bool {
    match cond {
        JmpCond::Ja => V::bool_const(true),
        JmpCond::Jeq => dst.eq(src),
        JmpCond::Jne => dst.ne(src),
        JmpCond::Jgt => src.ult(dst),
        JmpCond::Jge => src.ule(dst),
        JmpCond::Jlt => dst.ult(src),
        JmpCond::Jle => dst.ule(src),
        JmpCond::Jsgt => src.slt(dst),
        JmpCond::Jsge => src.sle(dst),
    }
}

impl BitVec for u64 {
    type Bool = bool;

    fn constant(v: u64) -> u64 {
        v
    }
    fn add(&self, o: &u64) -> u64 {
        self.wrapping_add(*o)
    }
    fn sub(&self, o: &u64) -> u64 {
        self.wrapping_sub(*o)
    }
    fn mul(&self, o: &u64) -> u64 {
        self.wrapping_mul(*o)
    }
    fn udiv(&self, o: &u64) -> u64 {
        self.checked_div(*o).unwrap_or(0)
    }
    fn or(&self, o: &u64) -> u64 {
        self | o
    }
    fn and(&self, o: &u64) -> u64 {
        self & o
    }
    fn xor(&self, o: &u64) -> u64 {
        self ^ o
    }
    fn shl(&self, o: &u64) -> u64 {
        if *o >= 64 { 0 } else { self << o }
    }
    fn lshr(&self, o: &u64) -> u64 {
        if *o >= 64 { 0 } else { self >> o }
    }
    fn ashr(&self, o: &u64) -> u64 {
        ((*self as i64) >> (*o).min(63)) as u64
    }
    fn neg(&self) -> u64 {
        self.wrapping_neg()
    }
    fn low32(&self) -> u64 {
        *self as u32 as u64
    }
    fn sext32(&self) -> u64 {
        *self as u32 as i32 as i64 as u64
    }
    fn eq(&self, o: &u64) -> bool {
        self == o
    }
    fn ne(&self, o: &u64) -> bool {
        self != o
    }
    fn ult(&self, o: &u64) -> bool {
        self < o
    }
    fn ule(&self, o: &u64) -> bool {
        self <= o
    }
    fn slt(&self, o: &u64) -> bool {
        (*self as i64) < (*o as i64)
    }
    fn sle(&self, o: &u64) -> bool {
        (*self as i64) <= (*o as i64)
    }
    fn bool_const(b: bool) -> bool {
        b
    }
}
