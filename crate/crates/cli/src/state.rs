//! Machine states as TOML files, so counterexamples can be replayed by
//! `bpfsynth interpret`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bpfsynth_core::interpreter::{HelperOracle, MachineState};
use bpfsynth_core::isa::NUM_REGS;

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    /// r0 through r10 as hex strings.
    regs: Vec<String>,
    frame_pointer: String,
    packet_base: String,
    packet: String,
    #[serde(default)]
    maps: Vec<MapFile>,
    #[serde(default)]
    oracle: OracleFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct MapFile {
    map_id: u32,
    #[serde(default)]
    entries: Vec<EntryFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryFile {
    key: String,
    value: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct OracleFile {
    #[serde(default)]
    random: Vec<u32>,
    #[serde(default)]
    ktime: Vec<String>,
    #[serde(default)]
    cpu: Vec<u32>,
    #[serde(default)]
    unknown: Vec<String>,
}

fn word(v: u64) -> String {
    format!("{v:#x}")
}

fn parse_word(s: &str) -> Result<u64> {
    let t = s.trim();
    let v = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => t.parse::<u64>(),
    };
    v.with_context(|| format!("bad 64-bit value `{s}`"))
}

fn bytes(s: &str) -> Result<Vec<u8>> {
    hex::decode(s.trim()).with_context(|| format!("bad hex bytes `{s}`"))
}

pub fn state_to_toml(s: &MachineState) -> String {
    let f = StateFile {
        regs: s.regs.iter().map(|r| word(*r)).collect(),
        frame_pointer: word(s.frame_pointer),
        packet_base: word(s.packet_base),
        packet: hex::encode(&s.packet),
        maps: s
            .maps
            .iter()
            .map(|(id, m)| MapFile {
                map_id: *id,
                entries: m.iter().map(|(k, v)| EntryFile { key: hex::encode(k), value: hex::encode(v) }).collect(),
            })
            .collect(),
        oracle: OracleFile {
            random: s.oracle.random.clone(),
            ktime: s.oracle.ktime.iter().map(|v| word(*v)).collect(),
            cpu: s.oracle.cpu.clone(),
            unknown: s.oracle.unknown.iter().map(|v| word(*v)).collect(),
        },
    };
    toml::to_string(&f).expect("state serializes")
}

pub fn state_from_toml(text: &str) -> Result<MachineState> {
    let f: StateFile = toml::from_str(text).context("malformed state file")?;
    if f.regs.len() != NUM_REGS {
        bail!("state file lists {} registers, expected {NUM_REGS}", f.regs.len());
    }
    let mut regs = [0u64; NUM_REGS];
    for (r, s) in regs.iter_mut().zip(&f.regs) {
        *r = parse_word(s)?;
    }
    let mut maps = BTreeMap::new();
    for m in f.maps {
        let mut contents = BTreeMap::new();
        for e in m.entries {
            contents.insert(bytes(&e.key)?, bytes(&e.value)?);
        }
        maps.insert(m.map_id, contents);
    }
    Ok(MachineState {
        regs,
        frame_pointer: parse_word(&f.frame_pointer)?,
        packet_base: parse_word(&f.packet_base)?,
        packet: bytes(&f.packet)?,
        maps,
        oracle: HelperOracle {
            random: f.oracle.random,
            ktime: f.oracle.ktime.iter().map(|s| parse_word(s)).collect::<Result<_>>()?,
            cpu: f.oracle.cpu,
            unknown: f.oracle.unknown.iter().map(|s| parse_word(s)).collect::<Result<_>>()?,
        },
    })
}

pub fn load_state(path: &Path) -> Result<MachineState> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    state_from_toml(&text).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpfsynth_core::interpreter::random_input;
    use bpfsynth_core::{MapDef, ProgramSpec};
    use rand::SeedableRng;

    #[test]
    fn round_trip() {
        let spec = ProgramSpec::xdp(32).with_map(MapDef { map_id: 3, key_size: 4, value_size: 8, max_entries: 8 });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = random_input(&spec, &mut rng);
            assert_eq!(state_from_toml(&state_to_toml(&s)).unwrap(), s);
        }
    }
}
