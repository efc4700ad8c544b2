//! Static analyses over loop-free programs.

mod canon;
mod cfg;
mod liveness;
mod ssa;
mod types;
mod windows;

pub use canon::{canonicalize, nop_unreachable, strip_nops};
pub use cfg::{build_cfg, reorder_forward, AnalysisError, Block, Cfg, Edge};
pub use liveness::{liveness, ByteSet, LiveSet, Liveness, RegSet};
pub use ssa::{to_ssa, EdgeCond, Operand, Phi, Ssa, SsaInsn, Var, VarDef};
pub use types::{
    MemAccess,
    infer_concrete_values, infer_ptr_types, resolve_at_read, ConcreteValues, MemType, PtrFact, PtrInfo,
    Resolution, WriteEntry, MAX_VALUE_SET,
};
pub use windows::{select_windows, window_eligible, WindowSpec, DEFAULT_WINDOW_LEN};
