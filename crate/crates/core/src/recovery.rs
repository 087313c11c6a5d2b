//! Rebuilding a controller from a post-crash image.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{Block, BlockAddr, BlockKind, PathId};
use crate::controller::{Controller, OramConfig, PersistMode};
use crate::error::{OramError, Result};
use crate::nvm::{NvmImage, DATA_WPQ_REGION, META_REGION, POSMAP_WPQ_REGION};
use crate::posmap::PosMap;
use crate::posmap_backend::{read_packed_label, read_table, FpPosMapTree};
use crate::wpq::{decode_state, WpqEntry};

const RECOVERY_STREAM: u64 = 0xA076_1D64_78BD_642F;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WpqDisposition {
    /// Closed rounds found in the queues and written to NVM.
    pub rounds_committed: u32,
    /// Open rounds dropped.
    pub rounds_discarded: u32,
}

#[derive(Debug, Clone)]
pub struct RecoveredState {
    /// Data-level position map as persisted.
    pub posmap: Vec<PathId>,
    pub disposition: WpqDisposition,
    /// Controller ready to serve further requests.
    pub controller: Controller,
}

fn wpq_state(image: &NvmImage, name: &str) -> Result<(bool, Vec<WpqEntry>)> {
    match image.raw_region(name) {
        Some(bytes) => decode_state(bytes),
        None => Ok((false, Vec::new())),
    }
}

fn max_iv(image: &NvmImage, names: &[String]) -> u64 {
    let mut best = 0;
    for name in names {
        let Some(id) = image.region_id(name) else {
            continue;
        };
        for i in 0..image.units(id) {
            if let Ok(b) = image.peek_block(id, i) {
                if b.len() >= 16 {
                    best = best.max(u64::from_le_bytes(b[8..16].try_into().unwrap()));
                }
            }
        }
    }
    best
}

/// Applies the closed WPQ round, then rebuilds every position map from NVM.
/// Stash and temporary map come back empty (FullNVM keeps its NVM stash).
pub fn recover(image: &NvmImage) -> Result<RecoveredState> {
    let meta = image
        .raw_region(META_REGION)
        .ok_or_else(|| OramError::CorruptImage("metadata region missing".into()))?;
    let text = std::str::from_utf8(meta)
        .map_err(|_| OramError::CorruptImage("metadata is not UTF-8".into()))?;
    let cfg = OramConfig::from_kv(text)?.normalized()?;
    let mut ctl = Controller::new(cfg.clone())?;

    let (data_open, data_round) = wpq_state(image, DATA_WPQ_REGION)?;
    let (posmap_open, posmap_round) = wpq_state(image, POSMAP_WPQ_REGION)?;
    let mut nvm = image.clone();
    nvm.remove_region(DATA_WPQ_REGION);
    nvm.remove_region(POSMAP_WPQ_REGION);
    if nvm.region_names() != ctl.nvm.region_names() {
        return Err(OramError::CorruptImage(format!(
            "regions {:?} do not match configuration {:?}",
            nvm.region_names(),
            ctl.nvm.region_names()
        )));
    }
    for name in ctl.nvm.region_names() {
        let id = ctl.nvm.region_id(&name).unwrap();
        let (unit, units) = (ctl.nvm.unit(id), ctl.nvm.units(id));
        nvm.set_unit(&name, unit, units)?;
    }
    ctl.nvm = nvm;
    ctl.nvm.reset_counters();

    let mut iv = max_iv(&ctl.nvm, &ctl.persistent_region_names());
    for e in data_round.iter().chain(&posmap_round) {
        if let WpqEntry::Block { bytes, .. } = e {
            if bytes.len() >= 16 {
                iv = iv.max(u64::from_le_bytes(bytes[8..16].try_into().unwrap()));
            }
        }
    }
    ctl.cipher.resume_after(iv);

    let mut disposition = WpqDisposition::default();
    if !data_round.is_empty() || !posmap_round.is_empty() {
        ctl.data_wpq.start()?;
        ctl.posmap_wpq.start()?;
        for e in data_round {
            ctl.data_wpq.push(e)?;
        }
        for e in posmap_round {
            ctl.posmap_wpq.push(e)?;
        }
        ctl.data_wpq.end()?;
        ctl.posmap_wpq.end()?;
        ctl.flush_wpqs(false)?;
        ctl.data_wpq.retire();
        ctl.posmap_wpq.retire();
        disposition.rounds_committed = 1;
    }
    if data_open || posmap_open {
        disposition.rounds_discarded = 1;
    }

    rebuild_posmaps(&mut ctl)?;
    if cfg.mode == PersistMode::FullNvm {
        rebuild_nvm_stash(&mut ctl)?;
    }
    for lv in &mut ctl.levels {
        lv.promotable = vec![true; lv.n];
    }
    ctl.rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RECOVERY_STREAM ^ iv);
    ctl.aux_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RECOVERY_STREAM.rotate_left(17) ^ iv);
    ctl.nvm.reset_counters();

    Ok(RecoveredState {
        posmap: ctl.levels[0].labels.labels().to_vec(),
        disposition,
        controller: ctl,
    })
}

fn rebuild_posmaps(ctl: &mut Controller) -> Result<()> {
    let top = ctl.levels.len() - 1;
    let mut table = read_table(&ctl.nvm, ctl.posmap_region, ctl.levels[top].n)?;
    if let Some((_, region)) = &ctl.fp {
        let region = *region;
        let tree = FpPosMapTree::recover(&ctl.levels[0].geom, &ctl.nvm, region, &mut table)?;
        ctl.fp = Some((tree, region));
    }
    ctl.levels[top].labels = PosMap::from_labels(table);
    // Walk the recursive chain downward: each level's blocks carry the
    // labels of the level below.
    for k in (1..=top).rev() {
        let pack = ctl.layout.as_ref().unwrap().pack;
        let mut child = vec![PathId(0); ctl.levels[k - 1].n];
        for j in 0..ctl.levels[k].n {
            let label = ctl.levels[k].labels.labels()[j];
            let block = ctl.find_committed(k, BlockAddr::new(j as u64), label)?;
            for slot in 0..pack {
                if let Some(c) = child.get_mut(j * pack + slot) {
                    *c = read_packed_label(&block.payload, slot);
                }
            }
        }
        ctl.levels[k - 1].labels = PosMap::from_labels(child);
    }
    Ok(())
}

/// A stash slot wins over the tree only with a strictly newer version.
fn rebuild_nvm_stash(ctl: &mut Controller) -> Result<()> {
    let ns = ctl.nvm_stash.as_ref().unwrap();
    let region = ns.region;
    let slots = ctl.nvm.units(region);
    let mut newest: BTreeMap<BlockAddr, (Block, usize)> = BTreeMap::new();
    for s in 0..slots {
        let b = ctl.cipher.decrypt(ctl.nvm.peek_block(region, s)?, ctl.cfg.block_size)?;
        if b.is_dummy() || b.header.addr.index() >= ctl.levels[0].n {
            continue;
        }
        let better = newest
            .get(&b.header.addr)
            .map_or(true, |(cur, _)| b.header.seq > cur.header.seq);
        if better {
            newest.insert(b.header.addr, (b, s));
        }
    }
    let mut slot_of = BTreeMap::new();
    for (a, (mut b, s)) in newest {
        let label = ctl.levels[0].labels.labels()[a.index()];
        let tree_seq = match ctl.find_committed(0, a, label) {
            Ok(t) => Some(t.header.seq),
            Err(OramError::MissingCopy { .. }) => None,
            Err(e) => return Err(e),
        };
        if tree_seq.map_or(true, |t| b.header.seq > t) {
            ctl.levels[0].labels.set(a, b.header.label)?;
            b.kind = BlockKind::Real;
            ctl.levels[0].stash.put(b);
            slot_of.insert(a, s);
        }
    }
    let ns = ctl.nvm_stash.as_mut().unwrap();
    ns.free = (0..slots).filter(|s| !slot_of.values().any(|v| v == s)).collect();
    ns.slot_of = slot_of;
    Ok(())
}

/// Value of `addr` in a recovered state: the newest copy on its committed
/// path, or the FullNVM stash copy. A missing copy is an error, never zero.
pub fn resolve_read(state: &RecoveredState, addr: u64) -> Result<Vec<u8>> {
    state.controller.read_logical(addr)
}
