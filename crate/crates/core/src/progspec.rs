//! Program input/output description loaded from TOML.
//!
//! ```toml
//! prog_type = "xdp"
//! packet_size = 64
//! stack_size = 512
//! output_register = "r0"
//!
//! [input_registers]
//! r1 = "packet"
//!
//! [[maps]]
//! map_id = 0
//! key_size = 4
//! value_size = 8
//! max_entries = 16
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Reg, STACK_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProgType {
    /// Packet processing: r0, packet bytes and maps are outputs.
    Xdp,
    /// Context-argument programs (tracing, socket filters): r0 and maps are outputs.
    Ctx,
}

/// What an input register holds on entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// Pointer to the start of the packet buffer.
    Packet,
    /// Pointer to a read-only context buffer of `packet_size` bytes.
    Ctx,
    /// Arbitrary 64-bit value.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapDef {
    pub map_id: u32,
    pub key_size: u32,
    pub value_size: u32,
    pub max_entries: u32,
}

/// Largest supported map value, one heap slot.
pub const MAX_VALUE_SIZE: u32 = 4096;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramSpec {
    pub prog_type: ProgType,
    #[serde(default)]
    pub packet_size: u32,
    #[serde(default = "default_stack_size")]
    pub stack_size: u32,
    #[serde(default)]
    pub input_registers: BTreeMap<String, InputKind>,
    #[serde(default)]
    pub maps: Vec<MapDef>,
    #[serde(default = "default_output")]
    pub output_register: String,
}

fn default_stack_size() -> u32 {
    STACK_SIZE as u32
}

fn default_output() -> String {
    "r0".into()
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read {path}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed program description: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("stack_size must be {STACK_SIZE}, found {0}")]
    StackSize(u32),
    #[error("duplicate map id {0}")]
    DuplicateMap(u32),
    #[error("map {0}: key and value sizes must be in 1..={MAX_VALUE_SIZE}")]
    MapSize(u32),
    #[error("unknown input register `{0}`")]
    BadRegister(String),
    #[error("output register must be r0")]
    Output,
    #[error("r10 is the frame pointer and cannot be an input")]
    FramePointerInput,
}

impl ProgramSpec {
    pub fn xdp(packet_size: u32) -> ProgramSpec {
        ProgramSpec {
            prog_type: ProgType::Xdp,
            packet_size,
            stack_size: default_stack_size(),
            input_registers: BTreeMap::from([("r1".to_string(), InputKind::Packet)]),
            maps: Vec::new(),
            output_register: default_output(),
        }
    }

    pub fn ctx(ctx_size: u32) -> ProgramSpec {
        ProgramSpec {
            prog_type: ProgType::Ctx,
            packet_size: ctx_size,
            input_registers: BTreeMap::from([("r1".to_string(), InputKind::Ctx)]),
            ..ProgramSpec::xdp(ctx_size)
        }
    }

    pub fn with_map(mut self, map: MapDef) -> ProgramSpec {
        self.maps.push(map);
        self
    }

    pub fn with_input(mut self, reg: Reg, kind: InputKind) -> ProgramSpec {
        self.input_registers.insert(reg.to_string(), kind);
        self
    }

    pub fn parse(text: &str) -> Result<ProgramSpec, SpecError> {
        let spec: ProgramSpec = toml::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<ProgramSpec, SpecError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SpecError::Io { path: path.display().to_string(), source })?;
        ProgramSpec::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn check(&self) -> Result<(), SpecError> {
        if self.stack_size as i64 != STACK_SIZE {
            return Err(SpecError::StackSize(self.stack_size));
        }
        if self.output_register != "r0" {
            return Err(SpecError::Output);
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.maps {
            if !seen.insert(m.map_id) {
                return Err(SpecError::DuplicateMap(m.map_id));
            }
            let ok = |v: u32| (1..=MAX_VALUE_SIZE).contains(&v);
            if !ok(m.key_size) || !ok(m.value_size) {
                return Err(SpecError::MapSize(m.map_id));
            }
        }
        for name in self.input_registers.keys() {
            let reg = parse_reg_name(name).ok_or_else(|| SpecError::BadRegister(name.clone()))?;
            if reg == Reg::FP {
                return Err(SpecError::FramePointerInput);
            }
        }
        Ok(())
    }

    /// Input registers with their kinds, in register order.
    pub fn inputs(&self) -> Vec<(Reg, InputKind)> {
        let mut v: Vec<_> = self
            .input_registers
            .iter()
            .filter_map(|(name, kind)| Some((parse_reg_name(name)?, *kind)))
            .collect();
        v.sort_by_key(|(r, _)| *r);
        v
    }

    pub fn input_kind(&self, reg: Reg) -> Option<InputKind> {
        self.inputs().into_iter().find(|(r, _)| *r == reg).map(|(_, k)| k)
    }

    pub fn map(&self, map_id: u32) -> Option<&MapDef> {
        self.maps.iter().find(|m| m.map_id == map_id)
    }

    /// Whether the packet buffer is an output.
    pub fn packet_is_output(&self) -> bool {
        self.prog_type == ProgType::Xdp
    }

    /// Whether the program may write the input buffer at all.
    pub fn packet_writable(&self) -> bool {
        self.prog_type == ProgType::Xdp
    }
}

fn parse_reg_name(name: &str) -> Option<Reg> {
    Reg::new(name.strip_prefix('r')?.parse().ok()?)
}
