use std::fmt;

/// A bit-vector or boolean value read back from a solver model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BvValue {
    pub width: u32,
    /// Little-endian bytes, `ceil(width / 8)` of them.
    pub bytes: Vec<u8>,
}

impl BvValue {
    pub fn from_u64(v: u64, width: u32) -> BvValue {
        let n = width.div_ceil(8) as usize;
        let mut bytes = v.to_le_bytes().to_vec();
        bytes.resize(n, 0);
        BvValue { width, bytes }
    }

    pub fn boolean(b: bool) -> BvValue {
        BvValue { width: 1, bytes: vec![b as u8] }
    }

    /// Low 64 bits.
    pub fn as_u64(&self) -> u64 {
        let mut buf = [0u8; 8];
        let n = self.bytes.len().min(8);
        buf[..n].copy_from_slice(&self.bytes[..n]);
        u64::from_le_bytes(buf)
    }

    pub fn is_true(&self) -> bool {
        self.bytes.iter().any(|b| *b != 0)
    }
}

impl fmt::Display for BvValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#x")?;
        for b in self.bytes.iter().rev() {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}
