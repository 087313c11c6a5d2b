//! ORAM blocks, their headers and the on-NVM encoding.
//!
//! A block is stored as `iv1 | iv2 | header | payload`. The IVs are kept in
//! the clear; the header is masked with a keystream derived from `iv1` and the
//! payload with one derived from `iv2`, mirroring the counter-mode layout used
//! by hardware ORAM controllers. The keystream is a toy: it preserves the
//! format, not confidentiality.

use std::fmt;

use crate::error::{OramError, Result};

/// Logical block address, or the dummy sentinel.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockAddr(u64);

impl BlockAddr {
    pub const DUMMY: BlockAddr = BlockAddr(u64::MAX);

    pub fn new(addr: u64) -> Self {
        debug_assert_ne!(addr, u64::MAX, "reserved for the dummy sentinel");
        BlockAddr(addr)
    }

    pub fn is_dummy(self) -> bool {
        self == Self::DUMMY
    }

    /// Raw value; `u64::MAX` for the dummy.
    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_raw(raw: u64) -> Self {
        BlockAddr(raw)
    }
}

impl fmt::Debug for BlockAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_dummy() {
            write!(f, "⊥")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl fmt::Display for BlockAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Leaf label of a root-to-leaf path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PathId(pub u32);

impl PathId {
    pub fn checked(label: u32, height: u32) -> Result<Self> {
        if height >= 32 || u64::from(label) >= 1u64 << height {
            return Err(OramError::LabelOutOfRange { label, height });
        }
        Ok(PathId(label))
    }
}

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Real,
    Dummy,
    Backup,
}

impl BlockKind {
    fn to_byte(self) -> u8 {
        match self {
            BlockKind::Dummy => 0,
            BlockKind::Real => 1,
            BlockKind::Backup => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(BlockKind::Dummy),
            1 => Some(BlockKind::Real),
            2 => Some(BlockKind::Backup),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub addr: BlockAddr,
    pub label: PathId,
    pub iv1: u64,
    pub iv2: u64,
    /// Version of the block contents. Bumped once per access to the block;
    /// relocating a block during eviction keeps it.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub payload: Vec<u8>,
    pub kind: BlockKind,
}

/// Bytes of `iv1 | iv2`.
const IV_BYTES: usize = 16;
/// Bytes of the masked header: addr, label, kind, 3 pad bytes, seq.
const HEADER_BYTES: usize = 24;

/// Encoded size on NVM of a block with `payload_len` payload bytes.
pub const fn encoded_len(payload_len: usize) -> usize {
    IV_BYTES + HEADER_BYTES + payload_len
}

impl Block {
    pub fn dummy(payload_len: usize) -> Self {
        Block {
            header: BlockHeader {
                addr: BlockAddr::DUMMY,
                label: PathId(0),
                iv1: 0,
                iv2: 0,
                seq: 0,
            },
            payload: vec![0; payload_len],
            kind: BlockKind::Dummy,
        }
    }

    pub fn real(addr: BlockAddr, label: PathId, seq: u64, payload: Vec<u8>) -> Self {
        Block {
            header: BlockHeader {
                addr,
                label,
                iv1: 0,
                iv2: 0,
                seq,
            },
            payload,
            kind: BlockKind::Real,
        }
    }

    pub fn is_dummy(&self) -> bool {
        self.kind == BlockKind::Dummy
    }
}

/// Keyed keystream XOR used in place of AES counter mode.
#[derive(Debug, Clone)]
pub struct ToyCipher {
    key: u64,
    next_iv: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ToyCipher {
    pub fn new(key: u64) -> Self {
        ToyCipher { key, next_iv: 1 }
    }

    /// Continue issuing IVs strictly above `iv`.
    pub fn resume_after(&mut self, iv: u64) {
        self.next_iv = self.next_iv.max(iv.wrapping_add(1));
    }

    fn xor_stream(&self, iv: u64, buf: &mut [u8]) {
        let mut state = self.key ^ iv.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        for chunk in buf.chunks_mut(8) {
            let ks = splitmix64(&mut state).to_le_bytes();
            for (b, k) in chunk.iter_mut().zip(ks) {
                *b ^= k;
            }
        }
    }

    /// Encrypts `block` under fresh IVs.
    pub fn encrypt(&mut self, block: &Block) -> Vec<u8> {
        let iv1 = self.next_iv;
        let iv2 = self.next_iv.wrapping_add(1);
        self.next_iv = self.next_iv.wrapping_add(2);

        let mut out = Vec::with_capacity(encoded_len(block.payload.len()));
        out.extend_from_slice(&iv1.to_le_bytes());
        out.extend_from_slice(&iv2.to_le_bytes());

        let mut header = [0u8; HEADER_BYTES];
        header[0..8].copy_from_slice(&block.header.addr.raw().to_le_bytes());
        header[8..12].copy_from_slice(&block.header.label.0.to_le_bytes());
        header[12] = block.kind.to_byte();
        header[16..24].copy_from_slice(&block.header.seq.to_le_bytes());
        self.xor_stream(iv1, &mut header);
        out.extend_from_slice(&header);

        let start = out.len();
        out.extend_from_slice(&block.payload);
        self.xor_stream(iv2, &mut out[start..]);
        out
    }

    pub fn decrypt(&self, bytes: &[u8], payload_len: usize) -> Result<Block> {
        if bytes.len() != encoded_len(payload_len) {
            return Err(OramError::CorruptImage(format!(
                "block of {} bytes, expected {}",
                bytes.len(),
                encoded_len(payload_len)
            )));
        }
        let iv1 = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let iv2 = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        // Never-written NVM reads back as zeros.
        if iv1 == 0 && iv2 == 0 {
            return Ok(Block::dummy(payload_len));
        }

        let mut header = [0u8; HEADER_BYTES];
        header.copy_from_slice(&bytes[IV_BYTES..IV_BYTES + HEADER_BYTES]);
        self.xor_stream(iv1, &mut header);
        let addr = BlockAddr::from_raw(u64::from_le_bytes(header[0..8].try_into().unwrap()));
        let label = PathId(u32::from_le_bytes(header[8..12].try_into().unwrap()));
        let kind = BlockKind::from_byte(header[12])
            .ok_or_else(|| OramError::CorruptImage(format!("bad kind byte {}", header[12])))?;
        let seq = u64::from_le_bytes(header[16..24].try_into().unwrap());

        let mut payload = bytes[IV_BYTES + HEADER_BYTES..].to_vec();
        self.xor_stream(iv2, &mut payload);

        Ok(Block {
            header: BlockHeader {
                addr,
                label,
                iv1,
                iv2,
                seq,
            },
            payload,
            kind,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dummy_sentinel_differs_from_real_addresses() {
        assert!(BlockAddr::DUMMY.is_dummy());
        assert_ne!(BlockAddr::new(0), BlockAddr::DUMMY);
        assert_ne!(BlockAddr::new(u64::MAX - 1), BlockAddr::DUMMY);
    }

    #[test]
    fn label_range_checked() {
        assert!(PathId::checked(7, 3).is_ok());
        assert!(PathId::checked(8, 3).is_err());
        assert_eq!(PathId::checked(0, 0).unwrap(), PathId(0));
    }

    #[test]
    fn zero_bytes_decode_as_dummy() {
        let c = ToyCipher::new(5);
        let b = c.decrypt(&vec![0; encoded_len(64)], 64).unwrap();
        assert!(b.is_dummy());
    }

    #[test]
    fn ciphertext_hides_payload_and_ivs_advance() {
        let mut c = ToyCipher::new(9);
        let b = Block::real(BlockAddr::new(3), PathId(2), 1, vec![0xAA; 64]);
        let x = c.encrypt(&b);
        let y = c.encrypt(&b);
        assert_ne!(x, y);
        assert!(!x[40..].iter().all(|&v| v == 0xAA));
    }

    proptest! {
        #[test]
        fn encrypt_decrypt_roundtrip(addr in 0u64..1 << 40, label: u32, seq: u64,
                                     payload in proptest::collection::vec(any::<u8>(), 64),
                                     backup: bool, key: u64) {
            let mut c = ToyCipher::new(key);
            let mut b = Block::real(BlockAddr::new(addr), PathId(label), seq, payload);
            if backup { b.kind = BlockKind::Backup; }
            let bytes = c.encrypt(&b);
            let d = c.decrypt(&bytes, 64).unwrap();
            prop_assert_eq!(d.header.addr, b.header.addr);
            prop_assert_eq!(d.header.label, b.header.label);
            prop_assert_eq!(d.header.seq, b.header.seq);
            prop_assert_eq!(d.kind, b.kind);
            prop_assert_eq!(d.payload, b.payload);
        }
    }
}
