//! Versioned binary container shared by encoder weight files, training
//! checkpoints and prior checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     16 bytes  "SPAST-CONTAINER\0"
//! version   u32
//! kind      u32       1 = encoder weights, 2 = training checkpoint, 3 = prior checkpoint
//! length    u64       payload length in bytes
//! checksum  32 bytes  SHA-256 of the payload
//! payload   sections: u32 count, then per section
//!           u32 name length, name, u64 data length, data
//! ```
//!
//! Sections are written in name order, so identical contents always
//! serialise to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, SpastError};

pub const MAGIC: &[u8; 16] = b"SPAST-CONTAINER\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16 + 4 + 4 + 8 + 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    EncoderWeights = 1,
    TrainingCheckpoint = 2,
    PriorCheckpoint = 3,
}

impl ContainerKind {
    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Self::EncoderWeights),
            2 => Some(Self::TrainingCheckpoint),
            3 => Some(Self::PriorCheckpoint),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::EncoderWeights => "encoder-weights",
            Self::TrainingCheckpoint => "training-checkpoint",
            Self::PriorCheckpoint => "prior-checkpoint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub kind: ContainerKind,
    sections: BTreeMap<String, Vec<u8>>,
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Container {
            kind,
            sections: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: &str, data: Vec<u8>) {
        self.sections.insert(name.to_string(), data);
    }

    pub fn put_str(&mut self, name: &str, value: &str) {
        self.put(name, value.as_bytes().to_vec());
    }

    pub fn put_u64(&mut self, name: &str, value: u64) {
        self.put(name, value.to_le_bytes().to_vec());
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| SpastError::Malformed(format!("missing section `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn get_str(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.get(name)?)
            .map_err(|e| SpastError::Malformed(format!("section `{name}` is not UTF-8: {e}")))
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let raw = self.get(name)?;
        let arr: [u8; 8] = raw
            .try_into()
            .map_err(|_| SpastError::Malformed(format!("section `{name}` is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, data) in &self.sections {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(data.len() as u64).to_le_bytes());
            payload.extend_from_slice(data);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and verifies a container, expecting `kind`.
    pub fn from_bytes(bytes: &[u8], kind: ContainerKind) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..16] != MAGIC {
            return Err(SpastError::Malformed("bad magic header".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(SpastError::Checksum(format!("truncated header ({} bytes)", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        if version != VERSION {
            return Err(SpastError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let tag = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let found = ContainerKind::from_tag(tag);
        if found != Some(kind) {
            return Err(SpastError::KindMismatch {
                expected: kind.name().into(),
                found: found.map_or_else(|| format!("unknown tag {tag}"), |k| k.name().into()),
            });
        }
        let len = u64::from_le_bytes(bytes[24..32].try_into().unwrap()) as usize;
        let checksum = &bytes[32..64];
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(SpastError::Checksum(format!(
                "payload is {} bytes, header declares {len}",
                payload.len()
            )));
        }
        if Sha256::digest(payload).as_slice() != checksum {
            return Err(SpastError::Checksum("payload digest does not match header".into()));
        }
        let sections = parse_sections(payload)?;
        Ok(Container { kind, sections })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, kind: ContainerKind) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, kind)
    }
}

fn parse_sections(payload: &[u8]) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| SpastError::Malformed("section table overruns payload".into()))?;
        let s = &payload[pos..end];
        pos = end;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec())
            .map_err(|e| SpastError::Malformed(format!("section name: {e}")))?;
        let dlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let data = take(dlen)?.to_vec();
        sections.insert(name, data);
    }
    if pos != payload.len() {
        return Err(SpastError::Malformed("trailing bytes after sections".into()));
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(ContainerKind::TrainingCheckpoint);
        c.put_str("config", "train.lr=0.0001");
        c.put_u64("step", 42);
        c.put("blob", vec![1, 2, 3, 4, 5]);
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes();
        let back = Container::from_bytes(&bytes, ContainerKind::TrainingCheckpoint).unwrap();
        assert_eq!(back.get_u64("step").unwrap(), 42);
        assert_eq!(back.get_str("config").unwrap(), "train.lr=0.0001");
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..16], MAGIC);
    }

    #[test]
    fn truncation_is_a_checksum_failure() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 20, HEADER_LEN, 40] {
            let err = Container::from_bytes(&bytes[..cut], ContainerKind::TrainingCheckpoint).unwrap_err();
            assert!(matches!(err, SpastError::Checksum(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(
            Container::from_bytes(&bytes, ContainerKind::TrainingCheckpoint),
            Err(SpastError::Checksum(_))
        ));
    }

    #[test]
    fn version_and_kind_are_checked() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes, ContainerKind::PriorCheckpoint),
            Err(SpastError::KindMismatch { .. })
        ));
        bytes[16] = 9;
        assert!(matches!(
            Container::from_bytes(&bytes, ContainerKind::TrainingCheckpoint),
            Err(SpastError::VersionMismatch { found: 9, .. })
        ));
    }
}
