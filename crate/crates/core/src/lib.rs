//! Instruction set, concrete interpreter and static analyses for the BPF
//! subset handled by the superoptimizer.

pub mod analysis;
pub mod interpreter;
pub mod isa;
pub mod layout;
pub mod progspec;
pub mod random;
pub mod semantics;

pub use isa::{AluOp, Instruction, JmpCond, Opcode, Program, Reg, Size, Src};
pub use progspec::{InputKind, MapDef, ProgType, ProgramSpec};
