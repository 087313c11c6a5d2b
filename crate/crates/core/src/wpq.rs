//! Battery-backed write pending queues.
//!
//! A queue accepts writes only between a `start` and an `end` marker. Once
//! `end` is seen the round belongs to the persistence domain: it survives a
//! crash and is flushed to NVM during recovery. A round without `end` is
//! dropped by a crash.

use crate::block::{BlockAddr, PathId};
use crate::error::{OramError, Result};

/// One position-map update as carried by the posmap queue: 32-bit address,
/// 24-bit label, 56 bits on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PosMapWpqEntry {
    pub addr: u32,
    pub label: u32,
}

impl PosMapWpqEntry {
    pub const BITS: usize = 32 + 24;
    pub const BYTES: usize = Self::BITS / 8;

    pub fn new(addr: BlockAddr, label: PathId) -> Result<Self> {
        if addr.is_dummy() || addr.raw() > u64::from(u32::MAX) {
            return Err(OramError::InvalidAddress {
                addr: addr.raw(),
                capacity: 1 << 32,
            });
        }
        if label.0 >= 1 << 24 {
            return Err(OramError::LabelOutOfRange {
                label: label.0,
                height: 24,
            });
        }
        Ok(PosMapWpqEntry {
            addr: addr.raw() as u32,
            label: label.0,
        })
    }

    pub fn to_bytes(self) -> [u8; Self::BYTES] {
        let mut out = [0u8; Self::BYTES];
        out[0..4].copy_from_slice(&self.addr.to_le_bytes());
        out[4..7].copy_from_slice(&self.label.to_le_bytes()[0..3]);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        PosMapWpqEntry {
            addr: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            label: u32::from_le_bytes([b[4], b[5], b[6], 0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WpqEntry {
    /// A unit write to a named NVM region.
    Block {
        region: String,
        index: usize,
        bytes: Vec<u8>,
    },
    /// A flat position-map update, flushed by the active posmap strategy.
    Entry(PosMapWpqEntry),
}

#[derive(Debug, Clone)]
pub struct Wpq {
    name: &'static str,
    capacity: usize,
    entries: Vec<WpqEntry>,
    start_seen: bool,
    end_seen: bool,
}

impl Wpq {
    pub fn new(name: &'static str, capacity: usize) -> Self {
        Wpq {
            name,
            capacity,
            entries: Vec::new(),
            start_seen: false,
            end_seen: false,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn start_seen(&self) -> bool {
        self.start_seen
    }

    pub fn end_seen(&self) -> bool {
        self.end_seen
    }

    pub fn entries(&self) -> &[WpqEntry] {
        &self.entries
    }

    pub fn start(&mut self) -> Result<()> {
        if self.start_seen {
            return Err(OramError::WpqProtocol {
                queue: self.name,
                what: "start while a round is open",
            });
        }
        self.start_seen = true;
        Ok(())
    }

    pub fn push(&mut self, entry: WpqEntry) -> Result<()> {
        if !self.start_seen || self.end_seen {
            return Err(OramError::WpqProtocol {
                queue: self.name,
                what: "enqueue outside start/end",
            });
        }
        if self.entries.len() >= self.capacity {
            return Err(OramError::WpqOverflow {
                queue: self.name,
                capacity: self.capacity,
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn end(&mut self) -> Result<()> {
        if !self.start_seen || self.end_seen {
            return Err(OramError::WpqProtocol {
                queue: self.name,
                what: "end without an open round",
            });
        }
        self.end_seen = true;
        Ok(())
    }

    /// Empties the queue after its round has been written to NVM.
    pub fn retire(&mut self) {
        self.entries.clear();
        self.start_seen = false;
        self.end_seen = false;
    }

    /// What survives a power failure: the round iff it was closed.
    pub fn persisted(&self) -> Vec<WpqEntry> {
        if self.end_seen {
            self.entries.clone()
        } else {
            Vec::new()
        }
    }
}

/// Encodes a committed round (possibly empty) for the image dump.
pub fn encode_round(entries: &[WpqEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        match e {
            WpqEntry::Block {
                region,
                index,
                bytes,
            } => {
                out.push(0);
                out.extend_from_slice(&(region.len() as u16).to_le_bytes());
                out.extend_from_slice(region.as_bytes());
                out.extend_from_slice(&(*index as u64).to_le_bytes());
                out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
                out.extend_from_slice(bytes);
            }
            WpqEntry::Entry(p) => {
                out.push(1);
                out.extend_from_slice(&p.to_bytes());
            }
        }
    }
    out
}

pub fn decode_round(bytes: &[u8]) -> Result<Vec<WpqEntry>> {
    let bad = || OramError::CorruptImage("malformed WPQ round".into());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(bad)?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        match take(1)?[0] {
            0 => {
                let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
                let region = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad())?;
                let index = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
                let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
                let bytes = take(len)?.to_vec();
                out.push(WpqEntry::Block {
                    region,
                    index,
                    bytes,
                });
            }
            1 => out.push(WpqEntry::Entry(PosMapWpqEntry::from_bytes(
                take(PosMapWpqEntry::BYTES)?,
            ))),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

/// Persistence-domain view of a queue: marker flags plus the committed round.
pub fn encode_state(q: &Wpq) -> Vec<u8> {
    let mut out = vec![q.start_seen as u8, q.end_seen as u8];
    out.extend(encode_round(&q.persisted()));
    out
}

/// Returns whether an open, uncommitted round was dropped, and the committed
/// round (empty if none).
pub fn decode_state(bytes: &[u8]) -> Result<(bool, Vec<WpqEntry>)> {
    if bytes.len() < 2 {
        return Err(OramError::CorruptImage("truncated WPQ state".into()));
    }
    let (start, end) = (bytes[0] != 0, bytes[1] != 0);
    Ok((start && !end, decode_round(&bytes[2..])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entry_is_56_bits() {
        assert_eq!(PosMapWpqEntry::BITS, 56);
        // 96 entries per round at full scale: 5376 bits = 672 bytes.
        assert_eq!(96 * PosMapWpqEntry::BITS, 5376);
        assert_eq!(96 * PosMapWpqEntry::BYTES, 672);
        let e = PosMapWpqEntry::new(BlockAddr::new(0xDEAD_BEEF), PathId(0xABCDEF)).unwrap();
        assert_eq!(PosMapWpqEntry::from_bytes(&e.to_bytes()), e);
        assert!(PosMapWpqEntry::new(BlockAddr::new(1), PathId(1 << 24)).is_err());
    }

    #[test]
    fn round_survives_only_after_end() {
        let mut q = Wpq::new("data", 2);
        assert!(q.push(WpqEntry::Entry(PosMapWpqEntry { addr: 1, label: 1 })).is_err());
        q.start().unwrap();
        q.push(WpqEntry::Entry(PosMapWpqEntry { addr: 1, label: 1 })).unwrap();
        assert!(q.persisted().is_empty());
        q.end().unwrap();
        assert_eq!(q.persisted().len(), 1);
        assert!(q.push(WpqEntry::Entry(PosMapWpqEntry { addr: 2, label: 1 })).is_err());
        q.retire();
        assert!(q.persisted().is_empty());
    }

    #[test]
    fn capacity_enforced() {
        let mut q = Wpq::new("posmap", 1);
        q.start().unwrap();
        q.push(WpqEntry::Entry(PosMapWpqEntry { addr: 1, label: 1 })).unwrap();
        assert!(matches!(
            q.push(WpqEntry::Entry(PosMapWpqEntry { addr: 2, label: 1 })),
            Err(OramError::WpqOverflow { .. })
        ));
    }

    #[test]
    fn state_reports_dropped_round() {
        let mut q = Wpq::new("data", 4);
        assert_eq!(decode_state(&encode_state(&q)).unwrap(), (false, vec![]));
        q.start().unwrap();
        q.push(WpqEntry::Entry(PosMapWpqEntry { addr: 1, label: 1 })).unwrap();
        assert_eq!(decode_state(&encode_state(&q)).unwrap(), (true, vec![]));
        q.end().unwrap();
        assert_eq!(decode_state(&encode_state(&q)).unwrap().1.len(), 1);
    }

    proptest! {
        #[test]
        fn round_encoding_roundtrips(items in proptest::collection::vec(
            prop_oneof![
                (any::<u32>(), 0u32..1 << 24).prop_map(|(a, l)| WpqEntry::Entry(PosMapWpqEntry { addr: a, label: l })),
                ("[a-z_]{1,12}", 0usize..1000, proptest::collection::vec(any::<u8>(), 0..80))
                    .prop_map(|(region, index, bytes)| WpqEntry::Block { region, index, bytes }),
            ], 0..20)) {
            prop_assert_eq!(decode_round(&encode_round(&items)).unwrap(), items);
        }
    }
}
