use std::cmp::Reverse;

use super::Controller;
use crate::block::{Block, BlockAddr, BlockKind};
use crate::error::{OramError, Result};
use crate::eviction::{plan_eviction, Candidate};
use crate::nvm::CrashTag;
use crate::wpq::PosMapWpqEntry;

use super::access::{staleness_filter, Disposition, FilterContext, Request};

impl Controller {
    /// Path ORAM with the stash and the position map kept in NVM. Every
    /// block read from the tree is first copied into an NVM stash slot, so
    /// nothing on chip is ever the only copy.
    pub(crate) fn access_fullnvm(&mut self, a: BlockAddr, req: &Request) -> Result<Vec<u8>> {
        let stash_region = self.nvm_stash.as_ref().unwrap().region;
        self.nvm.charge_volatile_read(1);
        self.nvm.read_block(self.posmap_region, a.index())?;
        let cur = self.levels[0].labels.lookup(a)?;
        let new = self.draw(0);
        self.injector.checkpoint(CrashTag::AfterStep2)?;

        let geom = self.levels[0].geom;
        let region = self.levels[0].region;
        let nodes = geom.path_nodes(cur)?;
        let mid = nodes.len() / 2;
        let mut copies = Vec::new();
        for (i, node) in nodes.into_iter().enumerate() {
            if i == mid {
                self.injector.checkpoint(CrashTag::DuringLoad)?;
            }
            for s in 0..geom.z {
                let bytes = self.nvm.read_block(region, node * geom.z + s)?;
                let slot = self.nvm_stash.as_mut().unwrap().alloc()?;
                self.injector.checkpoint(CrashTag::DirectWrite)?;
                self.nvm.write_block(stash_region, slot, &bytes)?;
                let b = self.cipher.decrypt(&bytes, self.cfg.block_size)?;
                if b.is_dummy() {
                    self.nvm_stash.as_mut().unwrap().free.insert(slot);
                } else {
                    copies.push((b, slot));
                }
            }
        }
        self.stats.leaf_log.push(cur);
        copies.sort_by_key(|(b, _)| (b.header.addr, Reverse(b.header.seq)));
        for (mut b, slot) in copies {
            let lv = &mut self.levels[0];
            let ctx = FilterContext {
                committed: lv.labels.labels()[b.header.addr.index()],
                pending: None,
                live_in_stash: lv.stash.has_live(b.header.addr),
                stash_backup_seq: None,
                keeps_backups: false,
                promotable: false,
            };
            let ns = self.nvm_stash.as_mut().unwrap();
            if staleness_filter(&b.header, b.kind, &ctx) == Disposition::Live {
                b.kind = BlockKind::Real;
                ns.slot_of.insert(b.header.addr, slot);
                lv.stash.put(b);
            } else {
                ns.free.insert(slot);
            }
        }
        self.levels[0].stash.check_capacity()?;

        let block = self.levels[0]
            .stash
            .live_mut(a)
            .ok_or(OramError::MissingCopy {
                level: 0,
                addr: a.raw(),
                label: cur.0,
            })?;
        block.header.label = new;
        block.header.seq += 1;
        let result = block.payload.clone();
        if let Request::Write(_, data) = req {
            block.payload.clone_from(data);
        }
        let block = block.clone();
        let bytes = self.cipher.encrypt(&block);
        let slot = self.nvm_stash.as_ref().unwrap().slot_of[&a];
        self.injector.checkpoint(CrashTag::DirectWrite)?;
        self.nvm.write_block(stash_region, slot, &bytes)?;
        self.commit_marks.push(self.injector.passed());
        self.flush_table(&[PosMapWpqEntry::new(a, new)?], true)?;
        self.levels[0].labels.set(a, new)?;
        self.injector.checkpoint(CrashTag::AfterStep4)?;

        self.evict_fullnvm(cur)?;
        Ok(result)
    }

    fn evict_fullnvm(&mut self, label: crate::block::PathId) -> Result<()> {
        let z = self.cfg.z;
        let lv = &self.levels[0];
        let blocks: Vec<Block> = lv.stash.iter().cloned().collect();
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
        let stash_region = self.nvm_stash.as_ref().unwrap().region;
        for i in plan.placed() {
            let slot = self.nvm_stash.as_ref().unwrap().slot_of[&blocks[i].header.addr];
            self.nvm.read_block(stash_region, slot)?;
        }
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
        let ns = self.nvm_stash.as_mut().unwrap();
        for i in plan.placed() {
            let slot = ns.slot_of.remove(&blocks[i].header.addr).unwrap();
            ns.free.insert(slot);
        }
        self.levels[0].stash.remove_positions(plan.placed().collect());
        self.stats.rounds += 1;
        self.stats.dirty_per_round.push(1);
        self.stats.posmap_entries_per_round.push(1);
        self.stats.posmap_entries_flushed += 1;
        let mark = self.injector.passed();
        self.take_snapshot(mark);
        Ok(())
    }
}
