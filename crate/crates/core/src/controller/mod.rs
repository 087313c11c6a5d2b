//! The ORAM controller in all six persistence designs.

mod access;
mod config;
mod fullnvm;
mod round;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use access::{staleness_filter, Disposition, FilterContext, Request};
pub use config::{OramConfig, PersistMode};

use crate::block::{encoded_len, Block, BlockAddr, BlockKind, PathId, ToyCipher};
use crate::error::{OramError, Result};
use crate::nvm::{
    recursive_level_region, CrashInjector, NvmImage, RegionId, DATA_WPQ_REGION, META_REGION,
    POSMAP_REGION, POSMAP_TREE_REGION, POSMAP_WPQ_REGION, STASH_REGION, TREE_REGION,
};
use crate::posmap::{PosMap, TempPosMap};
use crate::posmap_backend::{
    encode_slot, write_packed_label, FpPosMapTree, RecursiveLayout, FP_SLOT_BYTES,
    TABLE_SLOT_BYTES,
};
use crate::stash::Stash;
use crate::tree::TreeGeometry;
use crate::wpq::{encode_state, Wpq};

const AUX_STREAM: u64 = 0x9E6C_63D0_676A_9A99;
const KEY_STREAM: u64 = 0x2545_F491_4F6C_DD1D;

/// One ORAM tree with its volatile state. Level 0 holds data; levels above
/// hold packed position-map blocks in the recursive designs.
#[derive(Debug, Clone)]
pub(crate) struct Level {
    pub(crate) geom: TreeGeometry,
    pub(crate) n: usize,
    pub(crate) region: RegionId,
    pub(crate) stash: Stash,
    pub(crate) temp: TempPosMap,
    /// Committed labels; in designs without rounds, the current ones.
    pub(crate) labels: PosMap,
    /// Whether a backup copy may stand in for the live block. Only true for
    /// addresses untouched since a recovery.
    pub(crate) promotable: Vec<bool>,
}

/// Stash of the FullNVM design, mirrored slot by slot in NVM.
#[derive(Debug, Clone)]
pub(crate) struct NvmStash {
    pub(crate) region: RegionId,
    pub(crate) slot_of: BTreeMap<BlockAddr, usize>,
    pub(crate) free: BTreeSet<usize>,
}

impl NvmStash {
    pub(crate) fn alloc(&mut self) -> Result<usize> {
        self.free
            .pop_first()
            .ok_or_else(|| OramError::Config("NVM stash has no free slot".into()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControllerStats {
    pub accesses: u64,
    pub rounds: u64,
    /// Largest data-stash occupancy seen at an access boundary.
    pub stash_hwm: usize,
    pub posmap_entries_flushed: u64,
    pub dirty_per_round: Vec<u32>,
    pub posmap_entries_per_round: Vec<u32>,
    /// Data-tree path loaded by each access.
    pub leaf_log: Vec<PathId>,
    /// Live data blocks in the stash after each access.
    pub live_log: Vec<u32>,
}

/// Persistent contents right after a round became durable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSnapshot {
    /// Checkpoint count at which the round committed.
    pub mark: u64,
    pub contents: Vec<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub(crate) cfg: OramConfig,
    pub(crate) levels: Vec<Level>,
    pub(crate) layout: Option<RecursiveLayout>,
    pub(crate) nvm: NvmImage,
    pub(crate) cipher: ToyCipher,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) aux_rng: ChaCha8Rng,
    pub(crate) data_wpq: Wpq,
    pub(crate) posmap_wpq: Wpq,
    pub(crate) injector: CrashInjector,
    pub(crate) posmap_region: RegionId,
    pub(crate) fp: Option<(FpPosMapTree, RegionId)>,
    pub(crate) nvm_stash: Option<NvmStash>,
    pub(crate) stats: ControllerStats,
    pub(crate) commit_marks: Vec<u64>,
    pub(crate) snapshots: Option<Vec<RoundSnapshot>>,
}

fn initial_buckets(geom: &TreeGeometry, labels: &[PathId]) -> Result<Vec<Vec<usize>>> {
    let mut buckets = vec![Vec::new(); geom.buckets()];
    for (a, &label) in labels.iter().enumerate() {
        let node = (0..=geom.height)
            .rev()
            .map(|d| geom.node_at_depth(label, d))
            .find(|&node| buckets[node].len() < geom.z)
            .ok_or_else(|| {
                OramError::Config(format!("initial placement: path {} is full", label.0))
            })?;
        buckets[node].push(a);
    }
    Ok(buckets)
}

pub(crate) fn level_payload(cfg: &OramConfig, layout: &RecursiveLayout, child: &PosMap, j: usize) -> Vec<u8> {
    let mut p = vec![0u8; cfg.block_size];
    for slot in 0..layout.pack {
        let c = j * layout.pack + slot;
        if c < child.len() {
            write_packed_label(&mut p, slot, child.labels()[c]);
        }
    }
    p
}

impl Controller {
    /// Builds the initial image: every block written at a random leaf with a
    /// zero payload, position map persisted, counters reset.
    pub fn new(cfg: OramConfig) -> Result<Self> {
        let cfg = cfg.normalized()?;
        let n = cfg.n_blocks();
        let mut nvm = NvmImage::new(cfg.cost);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut aux_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUX_STREAM);
        let mut cipher = ToyCipher::new(cfg.seed.wrapping_mul(KEY_STREAM) | 1);

        let layout = if cfg.mode.is_recursive() {
            Some(RecursiveLayout::new(n, cfg.height, &cfg.recursion, cfg.block_size)?)
        } else {
            None
        };
        let shapes: Vec<(usize, u32)> = match &layout {
            Some(l) => l.blocks.iter().copied().zip(l.heights.iter().copied()).collect(),
            None => vec![(n, cfg.height)],
        };

        let mut levels = Vec::with_capacity(shapes.len());
        for (k, &(blocks, height)) in shapes.iter().enumerate() {
            let geom = TreeGeometry::new(height, cfg.z)?;
            let labels = if k == 0 {
                PosMap::random(blocks, height, &mut rng)
            } else {
                PosMap::random(blocks, height, &mut aux_rng)
            };
            let name = if k == 0 {
                TREE_REGION.to_string()
            } else {
                recursive_level_region(k)
            };
            let region = nvm.add_region(&name, encoded_len(cfg.block_size), geom.slots());
            levels.push(Level {
                geom,
                n: blocks,
                region,
                stash: Stash::new(cfg.stash_capacity),
                temp: TempPosMap::new(cfg.stash_capacity),
                labels,
                promotable: vec![false; blocks],
            });
        }

        for k in 0..levels.len() {
            let lv = &levels[k];
            let buckets = initial_buckets(&lv.geom, lv.labels.labels())?;
            for (node, members) in buckets.iter().enumerate() {
                for s in 0..cfg.z {
                    let block = match members.get(s) {
                        Some(&a) => {
                            let payload = match &layout {
                                Some(l) if k > 0 => level_payload(&cfg, l, &levels[k - 1].labels, a),
                                _ => vec![0u8; cfg.block_size],
                            };
                            Block::real(BlockAddr::new(a as u64), lv.labels.labels()[a], 1, payload)
                        }
                        None => Block::dummy(cfg.block_size),
                    };
                    let bytes = cipher.encrypt(&block);
                    nvm.write_block(lv.region, node * cfg.z + s, &bytes)?;
                }
            }
        }

        let top = levels.last().unwrap();
        let posmap_region = nvm.add_region(POSMAP_REGION, TABLE_SLOT_BYTES, top.n);
        for (a, &label) in top.labels.labels().iter().enumerate() {
            nvm.write_block(posmap_region, a, &encode_slot(BlockAddr::new(a as u64), label)?)?;
        }

        let data_geom = levels[0].geom;
        let fp = if cfg.mode == PersistMode::Fp {
            let tree = FpPosMapTree::for_data_tree(&data_geom, n)?;
            let region = nvm.add_region(POSMAP_TREE_REGION, FP_SLOT_BYTES, tree.slots());
            Some((tree, region))
        } else {
            None
        };
        let nvm_stash = if cfg.mode == PersistMode::FullNvm {
            let slots = cfg.stash_capacity + data_geom.path_blocks();
            let region = nvm.add_region(STASH_REGION, encoded_len(cfg.block_size), slots);
            Some(NvmStash {
                region,
                slot_of: BTreeMap::new(),
                free: (0..slots).collect(),
            })
        } else {
            None
        };
        nvm.put_raw_region(META_REGION, cfg.to_kv().into_bytes());
        nvm.reset_counters();

        let (data_cap, posmap_cap) = Self::wpq_capacities(&cfg, &levels, fp.as_ref().map(|f| &f.0));
        Ok(Controller {
            cfg,
            levels,
            layout,
            nvm,
            cipher,
            rng,
            aux_rng,
            data_wpq: Wpq::new("data", data_cap),
            posmap_wpq: Wpq::new("posmap", posmap_cap),
            injector: CrashInjector::new(),
            posmap_region,
            fp,
            nvm_stash,
            stats: ControllerStats::default(),
            commit_marks: Vec::new(),
            snapshots: None,
        })
    }

    /// Data WPQ holds one data path; the posmap WPQ one path of entries, or
    /// the position-map tree paths plus top-map entries when recursive.
    pub(crate) fn wpq_capacities(
        cfg: &OramConfig,
        levels: &[Level],
        fp: Option<&FpPosMapTree>,
    ) -> (usize, usize) {
        let data = levels[0].geom.path_blocks();
        let posmap = match fp {
            Some(t) => t.path_entries(),
            None if levels.len() > 1 => {
                levels[1..].iter().map(|l| l.geom.path_blocks()).sum::<usize>()
                    + levels.last().unwrap().geom.path_blocks()
            }
            None => cfg.z * (cfg.height as usize + 1),
        };
        (data, posmap)
    }

    pub fn config(&self) -> &OramConfig {
        &self.cfg
    }

    pub fn nvm(&self) -> &NvmImage {
        &self.nvm
    }

    pub fn stats(&self) -> &ControllerStats {
        &self.stats
    }

    pub fn injector_mut(&mut self) -> &mut CrashInjector {
        &mut self.injector
    }

    /// Per access, the checkpoint count at which it became durable.
    pub fn commit_marks(&self) -> &[u64] {
        &self.commit_marks
    }

    /// Records the persistent contents after every round, starting now.
    pub fn record_snapshots(&mut self) {
        let first = RoundSnapshot {
            mark: self.injector.passed(),
            contents: self.persistent_contents(),
        };
        self.snapshots = Some(vec![first]);
    }

    pub fn snapshots(&self) -> &[RoundSnapshot] {
        self.snapshots.as_deref().unwrap_or(&[])
    }

    /// Names of the regions whose contents persist, in image order.
    pub fn persistent_region_names(&self) -> Vec<String> {
        persistent_names(&self.nvm)
    }

    pub(crate) fn persistent_contents(&self) -> Vec<Vec<u8>> {
        let names = self.persistent_region_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.nvm.contents_of(&refs)
    }

    pub fn blocks(&self) -> usize {
        self.levels[0].n
    }

    pub fn data_stash_len(&self) -> usize {
        self.levels[0].stash.len()
    }

    pub fn live_stash_len(&self) -> usize {
        self.levels[0].stash.live_count()
    }

    pub fn temp_posmap_len(&self) -> usize {
        self.levels[0].temp.len()
    }

    /// What a power failure leaves behind: NVM plus closed WPQ rounds.
    pub fn crash_image(&self) -> NvmImage {
        let mut img = self.nvm.crash();
        img.put_raw_region(DATA_WPQ_REGION, encode_state(&self.data_wpq));
        img.put_raw_region(POSMAP_WPQ_REGION, encode_state(&self.posmap_wpq));
        img
    }

    /// Effective data-level label of every address.
    pub fn logical_posmap(&self) -> Vec<PathId> {
        let lv = &self.levels[0];
        (0..lv.n)
            .map(|a| {
                let addr = BlockAddr::new(a as u64);
                lv.temp.get(addr).unwrap_or(lv.labels.labels()[a])
            })
            .collect()
    }

    /// Current value of `addr` without touching counters or state.
    pub fn read_logical(&self, addr: u64) -> Result<Vec<u8>> {
        let a = self.check_addr(addr)?;
        let lv = &self.levels[0];
        if let Some(b) = lv.stash.live(a) {
            return Ok(b.payload.clone());
        }
        self.find_committed(0, a, lv.labels.lookup(a)?)
            .map(|b| b.payload)
    }

    /// Every address, in order.
    pub fn readout(&self) -> Result<Vec<Vec<u8>>> {
        (0..self.blocks() as u64).map(|a| self.read_logical(a)).collect()
    }

    pub(crate) fn check_addr(&self, addr: u64) -> Result<BlockAddr> {
        let a = BlockAddr::new(addr);
        if addr >= self.levels[0].n as u64 || a.is_dummy() {
            return Err(OramError::InvalidAddress {
                addr,
                capacity: self.levels[0].n as u64,
            });
        }
        Ok(a)
    }

    /// Highest-version copy of `a` labelled `label` on that path, read
    /// without charging. A live copy wins a tie with a backup.
    pub(crate) fn find_committed(&self, k: usize, a: BlockAddr, label: PathId) -> Result<Block> {
        let lv = &self.levels[k];
        let mut best: Option<Block> = None;
        for node in lv.geom.path_nodes(label)? {
            for s in 0..lv.geom.z {
                let bytes = self.nvm.peek_block(lv.region, node * lv.geom.z + s)?;
                let b = self.cipher.decrypt(bytes, self.cfg.block_size)?;
                if b.header.addr != a || b.header.label != label {
                    continue;
                }
                let rank = |x: &Block| (x.header.seq, x.kind == BlockKind::Real);
                if best.as_ref().map_or(true, |cur| rank(&b) > rank(cur)) {
                    best = Some(b);
                }
            }
        }
        best.ok_or(OramError::MissingCopy {
            level: k,
            addr: a.raw(),
            label: label.0,
        })
    }
}

pub(crate) fn persistent_names(nvm: &NvmImage) -> Vec<String> {
    nvm.region_names()
        .into_iter()
        .filter(|n| n != META_REGION && n != DATA_WPQ_REGION && n != POSMAP_WPQ_REGION)
        .collect()
}
