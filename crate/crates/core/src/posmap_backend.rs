//! Persistent position-map layouts.
//!
//! * Trusted table, updated in place (`flush_direct`) or by a full oblivious
//!   sweep that touches every slot (`flush_oblivious`).
//! * A write-only entry tree for the full-persistency design, where every
//!   eviction round rewrites one whole path ([`FpPosMapTree`]).
//! * A recursive chain of small position-map ORAMs ([`RecursiveLayout`]); the
//!   per-level ORAM accesses are driven by the controller.

use std::collections::BTreeMap;

use crate::block::{BlockAddr, PathId};
use crate::error::{OramError, Result};
use crate::nvm::{NvmImage, RegionId};
use crate::tree::TreeGeometry;
use crate::wpq::PosMapWpqEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosMapKind {
    Direct,
    Oblivious,
    Recursive,
}

impl PosMapKind {
    pub fn name(self) -> &'static str {
        match self {
            PosMapKind::Direct => "direct",
            PosMapKind::Oblivious => "oblivious",
            PosMapKind::Recursive => "recursive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(PosMapKind::Direct),
            "oblivious" => Ok(PosMapKind::Oblivious),
            "recursive" => Ok(PosMapKind::Recursive),
            _ => Err(OramError::Config(format!("unknown posmap strategy `{s}`"))),
        }
    }
}

/// Width of one table slot in the trusted posmap region.
pub const TABLE_SLOT_BYTES: usize = PosMapWpqEntry::BYTES;

pub fn encode_slot(addr: BlockAddr, label: PathId) -> Result<[u8; TABLE_SLOT_BYTES]> {
    Ok(PosMapWpqEntry::new(addr, label)?.to_bytes())
}

/// One NVM write per entry, in queue order.
pub fn flush_direct(nvm: &mut NvmImage, region: RegionId, entries: &[PosMapWpqEntry]) -> Result<()> {
    for e in entries {
        nvm.write_block(region, e.addr as usize, &e.to_bytes())?;
    }
    Ok(())
}

/// Reads and rewrites every slot in address order, changing only the dirty
/// ones. The visible (slot, op) sequence depends on the region size alone.
pub fn flush_oblivious(
    nvm: &mut NvmImage,
    region: RegionId,
    entries: &[PosMapWpqEntry],
) -> Result<()> {
    let dirty: BTreeMap<u32, PosMapWpqEntry> = entries.iter().map(|e| (e.addr, *e)).collect();
    for slot in 0..nvm.units(region) {
        let old = nvm.read_block(region, slot)?;
        let new = match dirty.get(&(slot as u32)) {
            Some(e) => e.to_bytes().to_vec(),
            None => old,
        };
        nvm.write_block(region, slot, &new)?;
    }
    Ok(())
}

/// Uncounted read of a whole table, for recovery.
pub fn read_table(nvm: &NvmImage, region: RegionId, n: usize) -> Result<Vec<PathId>> {
    (0..n)
        .map(|i| {
            let e = PosMapWpqEntry::from_bytes(nvm.peek_block(region, i)?);
            if e.addr as usize != i {
                return Err(OramError::CorruptImage(format!(
                    "posmap slot {i} holds address {}",
                    e.addr
                )));
            }
            Ok(PathId(e.label))
        })
        .collect()
}

/// Bytes per entry slot of the write-only tree: addr, label, round.
pub const FP_SLOT_BYTES: usize = 16;
const FP_EMPTY_ADDR: u32 = u32::MAX;

fn fp_record(addr: u32, label: u32, round: u64) -> [u8; FP_SLOT_BYTES] {
    let mut out = [0u8; FP_SLOT_BYTES];
    out[0..4].copy_from_slice(&addr.to_le_bytes());
    out[4..8].copy_from_slice(&label.to_le_bytes());
    out[8..16].copy_from_slice(&round.to_le_bytes());
    out
}

fn fp_parse(b: &[u8]) -> (u32, u32, u64) {
    (
        u32::from_le_bytes(b[0..4].try_into().unwrap()),
        u32::from_le_bytes(b[4..8].try_into().unwrap()),
        u64::from_le_bytes(b[8..16].try_into().unwrap()),
    )
}

/// Write-only tree of position-map entries.
///
/// Each round rewrites the full path selected by the data eviction label.
/// The controller knows which slots hold the newest record of some address,
/// so those are rewritten unchanged; new records take the deepest free slot
/// and every other slot is filled with a fake record. Recovery keeps, per
/// address, the record with the highest round.
#[derive(Debug, Clone)]
pub struct FpPosMapTree {
    geom: TreeGeometry,
    data_height: u32,
    owner: Vec<Option<(u32, u32, u64)>>,
    newest_slot: Vec<Option<usize>>,
    last_round: u64,
}

impl FpPosMapTree {
    /// Tree one level shorter than the data tree: `z * 2^L` slots for `2^L` addresses.
    pub fn for_data_tree(data: &TreeGeometry, n: usize) -> Result<Self> {
        let geom = TreeGeometry::new(data.height.saturating_sub(1), data.z)?;
        Ok(FpPosMapTree {
            geom,
            data_height: data.height,
            owner: vec![None; geom.slots()],
            newest_slot: vec![None; n],
            last_round: 0,
        })
    }

    pub fn geometry(&self) -> TreeGeometry {
        self.geom
    }

    pub fn slots(&self) -> usize {
        self.geom.slots()
    }

    /// Highest round number written or recovered.
    pub fn last_round(&self) -> u64 {
        self.last_round
    }

    /// Entries written per round: one full path.
    pub fn path_entries(&self) -> usize {
        self.geom.path_blocks()
    }

    fn path_for(&self, data_label: PathId) -> PathId {
        PathId(data_label.0 >> (self.data_height - self.geom.height))
    }

    /// Slot writes for one round. Updates the on-chip slot ownership.
    pub fn write_path(
        &mut self,
        data_label: PathId,
        dirty: &[(BlockAddr, PathId)],
        round: u64,
    ) -> Result<Vec<(usize, Vec<u8>)>> {
        let label = self.path_for(data_label);
        self.last_round = self.last_round.max(round);
        let z = self.geom.z;
        let slots: Vec<usize> = self
            .geom
            .path_nodes(label)?
            .into_iter()
            .flat_map(|node| (0..z).map(move |s| node * z + s))
            .collect();
        for &(addr, l) in dirty {
            let a = addr.index();
            let rec = (a as u32, l.0, round);
            match self.newest_slot[a] {
                Some(s) if slots.contains(&s) => self.owner[s] = Some(rec),
                prev => {
                    let free = slots
                        .iter()
                        .copied()
                        .find(|&s| self.owner[s].is_none())
                        .ok_or_else(|| {
                            OramError::Config(format!("posmap tree path {} is full", label.0))
                        })?;
                    if let Some(p) = prev {
                        self.owner[p] = None;
                    }
                    self.owner[free] = Some(rec);
                    self.newest_slot[a] = Some(free);
                }
            }
        }
        Ok(slots
            .into_iter()
            .map(|s| {
                let bytes = match self.owner[s] {
                    Some((a, l, r)) => fp_record(a, l, r),
                    None => fp_record(FP_EMPTY_ADDR, 0, 0),
                };
                (s, bytes.to_vec())
            })
            .collect())
    }

    /// Rebuilds the newest labels on top of `base` and the slot ownership.
    pub fn recover(
        data: &TreeGeometry,
        nvm: &NvmImage,
        region: RegionId,
        base: &mut [PathId],
    ) -> Result<Self> {
        let mut tree = Self::for_data_tree(data, base.len())?;
        let mut best: Vec<u64> = vec![0; base.len()];
        for s in 0..tree.slots() {
            let (addr, label, round) = fp_parse(nvm.peek_block(region, s)?);
            if addr == FP_EMPTY_ADDR || round == 0 {
                continue;
            }
            let a = addr as usize;
            if a >= base.len() {
                return Err(OramError::CorruptImage(format!(
                    "posmap tree record for address {addr}"
                )));
            }
            tree.last_round = tree.last_round.max(round);
            if round > best[a] {
                best[a] = round;
                base[a] = PathId(label);
                tree.newest_slot[a] = Some(s);
            }
        }
        for (a, slot) in tree.newest_slot.iter().enumerate() {
            if let Some(s) = slot {
                tree.owner[*s] = Some((a as u32, base[a].0, best[a]));
            }
        }
        Ok(tree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecursiveParams {
    /// Number of position-map ORAM levels (H).
    pub levels: usize,
    /// Labels packed per position-map block.
    pub pack: usize,
    /// Entries the on-chip top map may hold.
    pub onchip_entries: usize,
}

impl Default for RecursiveParams {
    fn default() -> Self {
        RecursiveParams {
            levels: 2,
            pack: 8,
            onchip_entries: 1024,
        }
    }
}

/// Bytes per packed label inside a position-map block.
pub const LABEL_BYTES: usize = 4;

/// Sizes of the recursive position-map chain. Index 0 is the data level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecursiveLayout {
    pub pack: usize,
    pub blocks: Vec<usize>,
    pub heights: Vec<u32>,
}

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

impl RecursiveLayout {
    pub fn new(n: usize, data_height: u32, params: &RecursiveParams, block_size: usize) -> Result<Self> {
        if params.pack < 2 {
            return Err(OramError::Config("recursive pack factor must be at least 2".into()));
        }
        if params.pack * LABEL_BYTES > block_size {
            return Err(OramError::Config(format!(
                "{} labels of {LABEL_BYTES} bytes do not fit a {block_size}-byte block",
                params.pack
            )));
        }
        let mut blocks = vec![n];
        let mut heights = vec![data_height];
        for _ in 0..params.levels {
            let next = blocks.last().unwrap().div_ceil(params.pack);
            blocks.push(next);
            heights.push(ceil_log2(next));
        }
        let top = *blocks.last().unwrap();
        if top > params.onchip_entries {
            return Err(OramError::Config(format!(
                "top map of {top} entries exceeds the on-chip budget of {}",
                params.onchip_entries
            )));
        }
        Ok(RecursiveLayout {
            pack: params.pack,
            blocks,
            heights,
        })
    }

    pub fn levels(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn top_entries(&self) -> usize {
        *self.blocks.last().unwrap()
    }

    /// Block at level `k + 1` holding the label of block `index` at level `k`.
    pub fn parent(&self, index: usize) -> (usize, usize) {
        (index / self.pack, index % self.pack)
    }

    /// Chain of block indices for a data address, data level first.
    pub fn chain(&self, addr: usize) -> Vec<usize> {
        let mut out = vec![addr];
        for _ in 0..self.levels() {
            out.push(out.last().unwrap() / self.pack);
        }
        out
    }
}

pub fn read_packed_label(payload: &[u8], slot: usize) -> PathId {
    let o = slot * LABEL_BYTES;
    PathId(u32::from_le_bytes(payload[o..o + LABEL_BYTES].try_into().unwrap()))
}

pub fn write_packed_label(payload: &mut [u8], slot: usize, label: PathId) {
    let o = slot * LABEL_BYTES;
    payload[o..o + LABEL_BYTES].copy_from_slice(&label.0.to_le_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvm::{CostModel, MemOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(n: usize) -> (NvmImage, RegionId) {
        let mut img = NvmImage::new(CostModel::default());
        let id = img.add_region("posmap_region", TABLE_SLOT_BYTES, n);
        for a in 0..n {
            img.write_block(id, a, &encode_slot(BlockAddr::new(a as u64), PathId(0)).unwrap())
                .unwrap();
        }
        img.reset_counters();
        (img, id)
    }

    fn entry(a: u32, l: u32) -> PosMapWpqEntry {
        PosMapWpqEntry { addr: a, label: l }
    }

    #[test]
    fn direct_counts_one_write_per_entry() {
        let (mut img, id) = table(16);
        flush_direct(&mut img, id, &[]).unwrap();
        assert_eq!(img.counters().writes, 0);
        flush_direct(&mut img, id, &[entry(1, 2), entry(3, 9), entry(5, 1)]).unwrap();
        assert_eq!(img.counters().writes, 3);
        assert_eq!(read_table(&img, id, 16).unwrap()[3], PathId(9));
    }

    #[test]
    fn oblivious_touches_every_slot() {
        let (mut img, id) = table(16);
        img.start_trace();
        flush_oblivious(&mut img, id, &[entry(4, 7)]).unwrap();
        let one = img.take_trace();
        img.start_trace();
        flush_oblivious(&mut img, id, &[entry(1, 1), entry(2, 2), entry(9, 3)]).unwrap();
        let three = img.take_trace();
        img.start_trace();
        flush_oblivious(&mut img, id, &[]).unwrap();
        let none = img.take_trace();
        assert_eq!(one.iter().filter(|e| e.op == MemOp::Read).count(), 16);
        assert_eq!(one, three);
        assert_eq!(one, none);
        let t = read_table(&img, id, 16).unwrap();
        assert_eq!((t[4], t[9], t[0]), (PathId(7), PathId(3), PathId(0)));
    }

    #[test]
    fn oblivious_and_direct_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut a, ia) = table(32);
        let (mut b, ib) = table(32);
        for _ in 0..50 {
            let k = rng.gen_range(0..5);
            let es: Vec<_> = (0..k).map(|_| entry(rng.gen_range(0..32), rng.gen_range(0..64))).collect();
            flush_direct(&mut a, ia, &es).unwrap();
            flush_oblivious(&mut b, ib, &es).unwrap();
        }
        assert_eq!(read_table(&a, ia, 32).unwrap(), read_table(&b, ib, 32).unwrap());
    }

    #[test]
    fn fp_path_has_fixed_width_and_recovers_newest() {
        let data = TreeGeometry::new(4, 4).unwrap();
        let mut fp = FpPosMapTree::for_data_tree(&data, 16).unwrap();
        assert_eq!(fp.path_entries(), 16);
        let mut img = NvmImage::new(CostModel::default());
        let id = img.add_region("posmap_tree", FP_SLOT_BYTES, fp.slots());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut truth = vec![PathId(0); 16];
        for round in 1..200u64 {
            let k = rng.gen_range(0..3);
            let dirty: Vec<_> = (0..k)
                .map(|_| (BlockAddr::new(rng.gen_range(0..16)), PathId(rng.gen_range(0..16))))
                .collect();
            let writes = fp.write_path(PathId(rng.gen_range(0..16)), &dirty, round).unwrap();
            assert_eq!(writes.len(), fp.path_entries());
            for (s, b) in writes {
                img.write_block(id, s, &b).unwrap();
            }
            for (a, l) in dirty {
                truth[a.index()] = l;
            }
            let mut base = vec![PathId(0); 16];
            FpPosMapTree::recover(&data, &img, id, &mut base).unwrap();
            assert_eq!(base, truth, "round {round}");
        }
    }

    #[test]
    fn recursive_layout_sizes() {
        let l = RecursiveLayout::new(128, 7, &RecursiveParams::default(), 64).unwrap();
        assert_eq!(l.blocks, vec![128, 16, 2]);
        assert_eq!(l.heights, vec![7, 4, 1]);
        assert_eq!(l.chain(77), vec![77, 9, 1]);
        let small = RecursiveLayout::new(16, 4, &RecursiveParams::default(), 64).unwrap();
        assert_eq!(small.blocks, vec![16, 2, 1]);
        assert_eq!(small.heights, vec![4, 1, 0]);
        let tight = RecursiveParams {
            onchip_entries: 1,
            ..RecursiveParams::default()
        };
        assert!(RecursiveLayout::new(128, 7, &tight, 64).is_err());
        let wide = RecursiveParams {
            pack: 32,
            ..RecursiveParams::default()
        };
        assert!(RecursiveLayout::new(128, 7, &wide, 64).is_err());
    }

    #[test]
    fn packed_labels() {
        let mut p = vec![0u8; 64];
        write_packed_label(&mut p, 3, PathId(0xABCDE));
        assert_eq!(read_packed_label(&p, 3), PathId(0xABCDE));
        assert_eq!(read_packed_label(&p, 2), PathId(0));
    }
}
