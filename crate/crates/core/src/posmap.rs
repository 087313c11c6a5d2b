//! Position maps: the main table and the temporary overlay of pending remaps.

use std::collections::BTreeMap;

use rand::Rng;

use crate::block::{BlockAddr, PathId};
use crate::error::{OramError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosMap {
    labels: Vec<PathId>,
}

impl PosMap {
    pub fn from_labels(labels: Vec<PathId>) -> Self {
        PosMap { labels }
    }

    /// One uniformly drawn label per address, in address order.
    pub fn random<R: Rng>(n: usize, height: u32, rng: &mut R) -> Self {
        PosMap {
            labels: (0..n).map(|_| remap(height, rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, addr: BlockAddr) -> Result<usize> {
        if addr.is_dummy() {
            return Err(OramError::DummyAddress);
        }
        if addr.index() >= self.labels.len() {
            return Err(OramError::InvalidAddress {
                addr: addr.raw(),
                capacity: self.labels.len() as u64,
            });
        }
        Ok(addr.index())
    }

    pub fn lookup(&self, addr: BlockAddr) -> Result<PathId> {
        Ok(self.labels[self.check(addr)?])
    }

    pub fn set(&mut self, addr: BlockAddr, label: PathId) -> Result<()> {
        let i = self.check(addr)?;
        self.labels[i] = label;
        Ok(())
    }

    pub fn labels(&self) -> &[PathId] {
        &self.labels
    }
}

/// Free-function lookup.
pub fn posmap_lookup(pm: &PosMap, addr: BlockAddr) -> Result<PathId> {
    pm.lookup(addr)
}

/// Draws a fresh label uniformly from `[0, 2^height)`.
pub fn remap<R: Rng + ?Sized>(height: u32, rng: &mut R) -> PathId {
    PathId(rng.gen_range(0..1u32 << height))
}

/// Remaps not yet persisted, keyed by address.
#[derive(Debug, Clone, Default)]
pub struct TempPosMap {
    capacity: usize,
    entries: BTreeMap<BlockAddr, PathId>,
}

impl TempPosMap {
    pub fn new(capacity: usize) -> Self {
        TempPosMap {
            capacity,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, addr: BlockAddr) -> Option<PathId> {
        self.entries.get(&addr).copied()
    }

    pub fn insert(&mut self, addr: BlockAddr, label: PathId) -> Result<()> {
        if !self.entries.contains_key(&addr) && self.entries.len() >= self.capacity {
            return Err(OramError::TempPosMapOverflow {
                capacity: self.capacity,
            });
        }
        self.entries.insert(addr, label);
        Ok(())
    }

    pub fn remove(&mut self, addr: BlockAddr) -> Option<PathId> {
        self.entries.remove(&addr)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockAddr, PathId)> + '_ {
        self.entries.iter().map(|(a, l)| (*a, *l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_replays_seeded_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pm = PosMap::random(16, 4, &mut rng);
        let mut replay = ChaCha8Rng::seed_from_u64(1);
        let first = PathId(replay.gen_range(0..16));
        assert_eq!(posmap_lookup(&pm, BlockAddr::new(0)).unwrap(), first);
    }

    #[test]
    fn read_your_remap() {
        let mut pm = PosMap::from_labels(vec![PathId(0); 8]);
        pm.set(BlockAddr::new(3), PathId(9)).unwrap();
        assert_eq!(pm.lookup(BlockAddr::new(3)).unwrap(), PathId(9));
    }

    #[test]
    fn rejects_dummy_and_out_of_range() {
        let pm = PosMap::from_labels(vec![PathId(0); 8]);
        assert_eq!(pm.lookup(BlockAddr::DUMMY), Err(OramError::DummyAddress));
        assert!(matches!(
            pm.lookup(BlockAddr::new(8)),
            Err(OramError::InvalidAddress { .. })
        ));
    }

    #[test]
    fn remap_uniform_within_four_percent() {
        // 80,000 draws over 8 leaves: each count must land in [9600, 10400].
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0u32; 8];
        for _ in 0..80_000 {
            counts[remap(3, &mut rng).0 as usize] += 1;
        }
        for c in counts {
            assert!((9600..=10400).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn remap_single_leaf_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| remap(0, &mut rng) == PathId(0)));
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<_> = (0..50).map(|_| remap(7, &mut a)).collect();
        let ys: Vec<_> = (0..50).map(|_| remap(7, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn temp_posmap_capacity() {
        let mut t = TempPosMap::new(2);
        t.insert(BlockAddr::new(1), PathId(1)).unwrap();
        t.insert(BlockAddr::new(2), PathId(1)).unwrap();
        t.insert(BlockAddr::new(2), PathId(3)).unwrap();
        assert!(matches!(
            t.insert(BlockAddr::new(3), PathId(0)),
            Err(OramError::TempPosMapOverflow { capacity: 2 })
        ));
        assert_eq!(t.get(BlockAddr::new(2)), Some(PathId(3)));
    }
}
