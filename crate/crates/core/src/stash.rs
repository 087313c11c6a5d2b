//! On-chip stash.

use crate::block::{Block, BlockAddr, BlockKind};
use crate::error::{OramError, Result};

/// Blocks held between a path load and its eviction, in arrival order.
///
/// At most one live (`Real`) and one `Backup` entry exist per address.
#[derive(Debug, Clone)]
pub struct Stash {
    capacity: usize,
    entries: Vec<Block>,
}

impl Stash {
    pub fn new(capacity: usize) -> Self {
        Stash {
            capacity,
            entries: Vec::new(),
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

    pub fn live_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|b| b.kind == BlockKind::Real)
            .count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Block> {
        self.entries.iter()
    }

    fn position(&self, addr: BlockAddr, kind: BlockKind) -> Option<usize> {
        self.entries
            .iter()
            .position(|b| b.header.addr == addr && b.kind == kind)
    }

    pub fn live(&self, addr: BlockAddr) -> Option<&Block> {
        self.position(addr, BlockKind::Real).map(|i| &self.entries[i])
    }

    pub fn live_mut(&mut self, addr: BlockAddr) -> Option<&mut Block> {
        self.position(addr, BlockKind::Real)
            .map(move |i| &mut self.entries[i])
    }

    pub fn backup(&self, addr: BlockAddr) -> Option<&Block> {
        self.position(addr, BlockKind::Backup)
            .map(|i| &self.entries[i])
    }

    pub fn backup_mut(&mut self, addr: BlockAddr) -> Option<&mut Block> {
        self.position(addr, BlockKind::Backup)
            .map(move |i| &mut self.entries[i])
    }

    pub fn has_live(&self, addr: BlockAddr) -> bool {
        self.position(addr, BlockKind::Real).is_some()
    }

    /// Inserts `block`, replacing any entry of the same address and kind.
    pub fn put(&mut self, block: Block) {
        debug_assert!(!block.is_dummy());
        match self.position(block.header.addr, block.kind) {
            Some(i) => self.entries[i] = block,
            None => self.entries.push(block),
        }
    }

    pub fn take(&mut self, addr: BlockAddr, kind: BlockKind) -> Option<Block> {
        self.position(addr, kind).map(|i| self.entries.remove(i))
    }

    /// Removes the entries at the given positions (as seen by `iter`).
    pub fn remove_positions(&mut self, mut positions: Vec<usize>) {
        positions.sort_unstable();
        positions.dedup();
        for p in positions.into_iter().rev() {
            self.entries.remove(p);
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Occupancy check at a protocol step boundary.
    pub fn check_capacity(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            Err(OramError::StashOverflow {
                occupancy: self.entries.len(),
                capacity: self.capacity,
            })
        } else {
            Ok(())
        }
    }
}
