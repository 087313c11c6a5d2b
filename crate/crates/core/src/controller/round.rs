use std::collections::BTreeMap;

use super::{Controller, PersistMode, RoundSnapshot};
use crate::block::{Block, BlockAddr, BlockKind, PathId};
use crate::error::{OramError, Result};
use crate::eviction::{plan_eviction, Candidate, WritePlan};
use crate::nvm::{CrashTag, POSMAP_TREE_REGION};
use crate::posmap_backend::{write_packed_label, PosMapKind};
use crate::wpq::{PosMapWpqEntry, WpqEntry};

/// Eviction plan of one level together with the stash snapshot it indexes.
struct LevelPlan {
    plan: WritePlan,
    blocks: Vec<Block>,
    dirty: Vec<(BlockAddr, PathId)>,
    live_placed: Vec<BlockAddr>,
}

impl LevelPlan {
    fn placed_block(&self, i: usize) -> Block {
        let mut b = self.blocks[i].clone();
        if self.plan.relabeled.contains(&i) {
            b.header.label = self.plan.label;
        }
        b
    }
}

impl Controller {
    fn plan_level(&mut self, k: usize, chain: &[usize], label: PathId) -> Result<LevelPlan> {
        let top = self.levels.len() - 1;
        let lv = &self.levels[k];
        let blocks: Vec<Block> = lv.stash.iter().cloned().collect();
        self.nvm.charge_volatile_read(blocks.len() as u64);
        let parent_ok = |a: BlockAddr| match &self.layout {
            Some(l) if k < top => l.parent(a.index()).0 == chain[k + 1],
            _ => true,
        };
        let cands: Vec<Candidate> = blocks
            .iter()
            .map(|b| Candidate {
                label: b.header.label,
                backup: b.kind == BlockKind::Backup,
                placeable: b.kind == BlockKind::Backup
                    || lv.temp.get(b.header.addr).is_none()
                    || parent_ok(b.header.addr),
            })
            .collect();
        let plan = plan_eviction(&lv.geom, label, &cands);

        let mut lp = LevelPlan {
            plan,
            blocks,
            dirty: Vec::new(),
            live_placed: Vec::new(),
        };
        let mut fin: BTreeMap<BlockAddr, PathId> = BTreeMap::new();
        for (i, b) in lp.blocks.iter().enumerate() {
            let placed = lp.plan.is_placed(i);
            if b.kind == BlockKind::Backup && !placed {
                return Err(OramError::BackupUnplaced {
                    addr: b.header.addr.raw(),
                    label: b.header.label.0,
                });
            }
            if !placed {
                continue;
            }
            let l = lp.placed_block(i).header.label;
            if b.kind == BlockKind::Real {
                fin.insert(b.header.addr, l);
                lp.live_placed.push(b.header.addr);
            } else {
                fin.entry(b.header.addr).or_insert(l);
            }
        }
        for (a, l) in fin {
            if lv.labels.labels()[a.index()] != l {
                if !parent_ok(a) {
                    return Err(OramError::BackupUnplaced {
                        addr: a.raw(),
                        label: l.0,
                    });
                }
                lp.dirty.push((a, l));
            }
        }
        Ok(lp)
    }

    /// Writes new committed labels into the chain parent one level up, in
    /// both its live and its backup copy.
    fn merge_into_parent(&mut self, k: usize, dirty: &[(BlockAddr, PathId)]) {
        let Some(layout) = self.layout.clone() else {
            return;
        };
        if k + 1 >= self.levels.len() {
            return;
        }
        for &(a, l) in dirty {
            let (p, slot) = layout.parent(a.index());
            let stash = &mut self.levels[k + 1].stash;
            let pa = BlockAddr::new(p as u64);
            if let Some(b) = stash.live_mut(pa) {
                write_packed_label(&mut b.payload, slot, l);
            }
            if let Some(b) = stash.backup_mut(pa) {
                write_packed_label(&mut b.payload, slot, l);
            }
            self.nvm.charge_volatile_write(1);
        }
    }

    /// Sub-steps 5-A to 5-C: plan every level bottom-up, stage the round in
    /// both queues between start and end, flush, then merge the remaps.
    pub(crate) fn persistent_evict(&mut self, chain: &[usize], loaded: &[PathId]) -> Result<()> {
        let top = self.levels.len() - 1;
        let mut plans = Vec::with_capacity(top + 1);
        for k in 0..=top {
            let lp = self.plan_level(k, chain, loaded[k])?;
            self.merge_into_parent(k, &lp.dirty);
            plans.push(lp);
        }

        let z = self.cfg.z;
        let mut data_entries = Vec::new();
        let mut posmap_entries = Vec::new();
        for (k, lp) in plans.iter().enumerate() {
            let region = self.nvm.region_name(self.levels[k].region).to_string();
            for bucket in &lp.plan.buckets {
                for (s, slot) in bucket.slots.iter().enumerate() {
                    let block = match slot {
                        Some(i) => lp.placed_block(*i),
                        None => Block::dummy(self.cfg.block_size),
                    };
                    let entry = WpqEntry::Block {
                        region: region.clone(),
                        index: bucket.node * z + s,
                        bytes: self.cipher.encrypt(&block),
                    };
                    if k == 0 {
                        data_entries.push(entry);
                    } else {
                        posmap_entries.push(entry);
                    }
                }
            }
        }
        match &mut self.fp {
            Some((tree, _)) => {
                let round = tree.last_round() + 1;
                for (s, bytes) in tree.write_path(loaded[0], &plans[0].dirty, round)? {
                    posmap_entries.push(WpqEntry::Block {
                        region: POSMAP_TREE_REGION.to_string(),
                        index: s,
                        bytes,
                    });
                }
            }
            None => {
                for &(a, l) in &plans[top].dirty {
                    posmap_entries.push(WpqEntry::Entry(PosMapWpqEntry::new(a, l)?));
                }
            }
        }

        self.injector.checkpoint(CrashTag::PreStart)?;
        self.data_wpq.start()?;
        self.posmap_wpq.start()?;
        let posmap_count = posmap_entries.len();
        for e in data_entries {
            self.injector.checkpoint(CrashTag::WpqLoad)?;
            self.data_wpq.push(e)?;
            self.nvm.charge_volatile_write(1);
        }
        for e in posmap_entries {
            self.injector.checkpoint(CrashTag::WpqLoad)?;
            self.posmap_wpq.push(e)?;
            self.nvm.charge_volatile_write(1);
        }
        self.injector.checkpoint(CrashTag::PostStartPreEnd)?;
        self.data_wpq.end()?;
        self.posmap_wpq.end()?;
        let mark = self.injector.passed();
        self.commit_marks.push(mark);
        self.injector.checkpoint(CrashTag::PostEnd)?;
        self.flush_wpqs(true)?;
        self.injector.checkpoint(CrashTag::PostFlush)?;
        self.data_wpq.retire();
        self.posmap_wpq.retire();

        for (k, lp) in plans.iter().enumerate() {
            let lv = &mut self.levels[k];
            lv.stash.remove_positions(lp.plan.placed().collect());
            for &(a, l) in &lp.dirty {
                lv.labels.set(a, l)?;
            }
            for &a in &lp.live_placed {
                lv.temp.remove(a);
                lv.promotable[a.index()] = false;
            }
            self.nvm.charge_volatile_write(lp.dirty.len() as u64);
        }
        self.stats.rounds += 1;
        self.stats.dirty_per_round.push(plans[0].dirty.len() as u32);
        self.stats.posmap_entries_per_round.push(posmap_count as u32);
        self.stats.posmap_entries_flushed += posmap_count as u64;
        self.take_snapshot(mark);
        Ok(())
    }

    pub(crate) fn take_snapshot(&mut self, mark: u64) {
        if self.snapshots.is_some() {
            let contents = self.persistent_contents();
            self.snapshots
                .as_mut()
                .unwrap()
                .push(RoundSnapshot { mark, contents });
        }
    }

    /// Writes the closed round to NVM. Table entries go through the active
    /// position-map strategy. Replaying a round is idempotent.
    pub(crate) fn flush_wpqs(&mut self, checkpoints: bool) -> Result<()> {
        let mut entries = self.data_wpq.persisted();
        entries.extend(self.posmap_wpq.persisted());
        let mut table = Vec::new();
        for e in entries {
            match e {
                WpqEntry::Block {
                    region,
                    index,
                    bytes,
                } => {
                    let id = self.nvm.region_id(&region).ok_or_else(|| {
                        OramError::CorruptImage(format!("WPQ names unknown region `{region}`"))
                    })?;
                    if checkpoints {
                        self.injector.checkpoint(CrashTag::FlushWrite)?;
                    }
                    self.nvm.write_block(id, index, &bytes)?;
                }
                WpqEntry::Entry(p) => table.push(p),
            }
        }
        self.flush_table(&table, checkpoints)
    }

    pub(crate) fn flush_table(&mut self, table: &[PosMapWpqEntry], checkpoints: bool) -> Result<()> {
        let region = self.posmap_region;
        if self.cfg.posmap == PosMapKind::Oblivious {
            let dirty: BTreeMap<u32, PosMapWpqEntry> = table.iter().map(|e| (e.addr, *e)).collect();
            for slot in 0..self.nvm.units(region) {
                let old = self.nvm.read_block(region, slot)?;
                let new = match dirty.get(&(slot as u32)) {
                    Some(e) => e.to_bytes().to_vec(),
                    None => old,
                };
                if checkpoints {
                    self.injector.checkpoint(CrashTag::FlushWrite)?;
                }
                self.nvm.write_block(region, slot, &new)?;
            }
        } else {
            for e in table {
                if checkpoints {
                    self.injector.checkpoint(CrashTag::FlushWrite)?;
                }
                self.nvm.write_block(region, e.addr as usize, &e.to_bytes())?;
            }
        }
        Ok(())
    }

    /// Plain Path ORAM write-back: every level's path straight to NVM.
    pub(crate) fn direct_evict(&mut self, loaded: &[PathId]) -> Result<()> {
        debug_assert!(matches!(
            self.cfg.mode,
            PersistMode::Baseline | PersistMode::RcrBaseline
        ));
        let z = self.cfg.z;
        for (k, &label) in loaded.iter().enumerate() {
            let lv = &self.levels[k];
            let blocks: Vec<Block> = lv.stash.iter().cloned().collect();
            self.nvm.charge_volatile_read(blocks.len() as u64);
            let cands: Vec<Candidate> = blocks
                .iter()
                .map(|b| Candidate {
                    label: b.header.label,
                    backup: false,
                    placeable: true,
                })
                .collect();
            let plan = plan_eviction(&lv.geom, label, &cands);
            let region = lv.region;
            for bucket in &plan.buckets {
                for (s, slot) in bucket.slots.iter().enumerate() {
                    let block = match slot {
                        Some(i) => blocks[*i].clone(),
                        None => Block::dummy(self.cfg.block_size),
                    };
                    let bytes = self.cipher.encrypt(&block);
                    self.injector.checkpoint(CrashTag::DirectWrite)?;
                    self.nvm.write_block(region, bucket.node * z + s, &bytes)?;
                }
            }
            self.levels[k].stash.remove_positions(plan.placed().collect());
        }
        let mark = self.injector.passed();
        self.commit_marks.push(mark);
        self.stats.rounds += 1;
        self.stats.dirty_per_round.push(0);
        self.stats.posmap_entries_per_round.push(0);
        self.take_snapshot(mark);
        Ok(())
    }
}
