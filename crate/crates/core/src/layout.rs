//! Address-space layout shared by the interpreter and the verifier.
//!
//! Regions live in disjoint ranges so an address identifies its region. The
//! verifier constrains its symbolic base addresses to the same ranges.

/// Addresses below this are never mapped.
pub const NULL_GUARD: u64 = 0x1000;

/// Inclusive range of the frame pointer (one past the top of the stack).
pub const FP_MIN: u64 = 0x1_0000_1000;
pub const FP_MAX: u64 = 0x1_ffff_f000;
/// Frame pointer alignment.
pub const FP_ALIGN: u64 = 8;

/// Inclusive range of the packet / context buffer base.
pub const PKT_MIN: u64 = 0x2_0000_0000;
pub const PKT_MAX: u64 = 0x2_ffff_0000;

/// Map values live in slots of this size above [`MAP_VALUE_MIN`].
pub const SLOT: u64 = 0x1000;
pub const MAP_VALUE_MIN: u64 = 0x3_0000_0000;
pub const MAP_VALUE_MAX: u64 = 0x3_ffff_f000;

/// Opaque map handles loaded by `ld_map_fd`.
pub const MAP_HANDLE_BASE: u64 = 0x4_0000_0000;

pub const DEFAULT_FP: u64 = 0x1_0000_2000;
pub const DEFAULT_PKT: u64 = 0x2_0000_0000;

pub fn map_handle(map_id: u32) -> u64 {
    MAP_HANDLE_BASE + map_id as u64
}

pub fn map_of_handle(handle: u64) -> Option<u32> {
    handle
        .checked_sub(MAP_HANDLE_BASE)
        .filter(|d| *d <= u32::MAX as u64)
        .map(|d| d as u32)
}
