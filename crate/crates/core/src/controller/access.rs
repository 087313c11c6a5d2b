use std::cmp::Reverse;

use super::Controller;
use crate::block::{Block, BlockAddr, BlockHeader, BlockKind, PathId};
use crate::error::{OramError, Result};
use crate::nvm::CrashTag;
use crate::posmap::remap;
use crate::posmap_backend::{read_packed_label, write_packed_label};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Read(u64),
    Write(u64, Vec<u8>),
}

impl Request {
    pub fn addr(&self) -> u64 {
        match self {
            Request::Read(a) | Request::Write(a, _) => *a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Live,
    Backup,
    Discard,
}

/// What the controller knows about an address when one of its copies is
/// read from the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterContext {
    /// Label in the persistent position map.
    pub committed: PathId,
    /// Label staged in the temporary position map, if any.
    pub pending: Option<PathId>,
    pub live_in_stash: bool,
    /// Version of the backup already in the stash, if any.
    pub stash_backup_seq: Option<u64>,
    /// Whether the design keeps backup blocks at all.
    pub keeps_backups: bool,
    /// Whether a backup may be taken as the live block (after recovery).
    pub promotable: bool,
}

/// Decides what happens to a copy loaded from the tree.
///
/// With the live block on chip, the only copy worth keeping is the persisted
/// one the committed label points at, and only while a remap is pending and
/// no newer backup is held. Otherwise the copy must carry the current label.
pub fn staleness_filter(header: &BlockHeader, kind: BlockKind, ctx: &FilterContext) -> Disposition {
    if kind == BlockKind::Dummy {
        return Disposition::Discard;
    }
    if ctx.live_in_stash {
        let newer = ctx.stash_backup_seq.map_or(true, |s| s < header.seq);
        if ctx.keeps_backups && ctx.pending.is_some() && header.label == ctx.committed && newer {
            Disposition::Backup
        } else {
            Disposition::Discard
        }
    } else if header.label != ctx.pending.unwrap_or(ctx.committed) {
        Disposition::Discard
    } else if kind == BlockKind::Backup && !ctx.promotable {
        Disposition::Discard
    } else {
        Disposition::Live
    }
}

impl Controller {
    pub fn access(&mut self, req: &Request) -> Result<Vec<u8>> {
        let a = self.check_addr(req.addr())?;
        if let Request::Write(_, data) = req {
            if data.len() != self.cfg.block_size {
                return Err(OramError::WrongLength {
                    region: "payload".into(),
                    expected: self.cfg.block_size,
                    got: data.len(),
                });
            }
        }
        self.injector.set_access(self.stats.accesses as usize);
        let out = if self.nvm_stash.is_some() {
            self.access_fullnvm(a, req)?
        } else {
            self.access_tree(a, req)?
        };
        self.stats.accesses += 1;
        let data = &self.levels[0].stash;
        self.stats.live_log.push(data.live_count() as u32);
        self.stats.stash_hwm = self.stats.stash_hwm.max(data.len());
        Ok(out)
    }

    pub(crate) fn draw(&mut self, k: usize) -> PathId {
        let h = self.levels[k].geom.height;
        if k == 0 {
            remap(h, &mut self.rng)
        } else {
            remap(h, &mut self.aux_rng)
        }
    }

    /// Block index chain from the data level to the top position-map level.
    pub(crate) fn chain(&self, addr: BlockAddr) -> Vec<usize> {
        match &self.layout {
            Some(l) => l.chain(addr.index()),
            None => vec![addr.index()],
        }
    }

    /// Label of block `j` at level `k` as held by its parent: the packed
    /// payload of the chain block one level up, or the top map.
    fn parent_label(&self, k: usize, j: usize) -> Result<PathId> {
        let top = self.levels.len() - 1;
        if k == top {
            return self.levels[k].labels.lookup(BlockAddr::new(j as u64));
        }
        let layout = self.layout.as_ref().expect("levels above 0 imply a layout");
        let (p, slot) = layout.parent(j);
        let parent = self.levels[k + 1]
            .stash
            .live(BlockAddr::new(p as u64))
            .ok_or(OramError::MissingCopy {
                level: k + 1,
                addr: p as u64,
                label: 0,
            })?;
        let label = read_packed_label(&parent.payload, slot);
        debug_assert_eq!(label, self.levels[k].labels.labels()[j]);
        Ok(label)
    }

    fn set_parent_label(&mut self, k: usize, j: usize, label: PathId) {
        if k + 1 == self.levels.len() {
            return;
        }
        let (p, slot) = self.layout.as_ref().unwrap().parent(j);
        if let Some(b) = self.levels[k + 1].stash.live_mut(BlockAddr::new(p as u64)) {
            write_packed_label(&mut b.payload, slot, label);
        }
    }

    /// Steps 1 to 4 on every level, top level first, then one eviction.
    fn access_tree(&mut self, addr: BlockAddr, req: &Request) -> Result<Vec<u8>> {
        let rounds = self.cfg.mode.uses_rounds();
        let chain = self.chain(addr);
        let top = self.levels.len() - 1;
        let mut loaded = vec![PathId(0); top + 1];
        let mut result = Vec::new();
        for k in (0..=top).rev() {
            let a = BlockAddr::new(chain[k] as u64);
            self.nvm.charge_volatile_read(1);
            let committed = self.parent_label(k, chain[k])?;
            self.nvm.charge_volatile_read(1);
            let pending = if rounds {
                self.nvm.charge_volatile_read(1);
                self.levels[k].temp.get(a)
            } else {
                None
            };
            let cur = pending.unwrap_or(committed);
            let new = self.draw(k);
            if rounds {
                self.levels[k].temp.insert(a, new)?;
            } else {
                self.levels[k].labels.set(a, new)?;
                self.set_parent_label(k, chain[k], new);
            }
            self.nvm.charge_volatile_write(1);
            self.injector.checkpoint(CrashTag::AfterStep2)?;

            self.load_path(k, cur, Some((a, committed, pending)))?;
            if k == 0 {
                self.stats.leaf_log.push(cur);
            }
            loaded[k] = cur;

            let lv = &mut self.levels[k];
            let block = lv.stash.live_mut(a).ok_or(OramError::MissingCopy {
                level: k,
                addr: a.raw(),
                label: cur.0,
            })?;
            block.header.label = new;
            block.header.seq += 1;
            if k == 0 {
                result = block.payload.clone();
                if let Request::Write(_, data) = req {
                    block.payload.clone_from(data);
                }
            }
            let backup = rounds.then(|| {
                let mut b = block.clone();
                b.kind = BlockKind::Backup;
                b.header.label = cur;
                b
            });
            self.nvm.charge_volatile_write(1);
            if let Some(b) = backup {
                self.levels[k].stash.put(b);
                self.nvm.charge_volatile_write(1);
            }
            self.levels[k].stash.check_capacity()?;
            self.injector.checkpoint(CrashTag::AfterStep4)?;
        }
        if rounds {
            self.persistent_evict(&chain, &loaded)?;
        } else {
            self.direct_evict(&loaded)?;
        }
        Ok(result)
    }

    /// Reads the whole path, then keeps the copies the filter accepts.
    /// `target` carries the accessed block's map entries as they were before
    /// step 2 overwrote them.
    pub(crate) fn load_path(
        &mut self,
        k: usize,
        label: PathId,
        target: Option<(BlockAddr, PathId, Option<PathId>)>,
    ) -> Result<()> {
        let geom = self.levels[k].geom;
        let region = self.levels[k].region;
        let nodes = geom.path_nodes(label)?;
        let mid = nodes.len() / 2;
        let mut copies = Vec::new();
        for (i, node) in nodes.into_iter().enumerate() {
            if i == mid {
                self.injector.checkpoint(CrashTag::DuringLoad)?;
            }
            for s in 0..geom.z {
                let bytes = self.nvm.read_block(region, node * geom.z + s)?;
                let b = self.cipher.decrypt(&bytes, self.cfg.block_size)?;
                if !b.is_dummy() {
                    copies.push(b);
                }
            }
        }
        self.absorb(k, copies, target)
    }

    /// Applies the staleness filter to copies grouped by address, newest
    /// version first, live before backup.
    pub(crate) fn absorb(
        &mut self,
        k: usize,
        mut copies: Vec<Block>,
        target: Option<(BlockAddr, PathId, Option<PathId>)>,
    ) -> Result<()> {
        copies.sort_by_key(|b| (b.header.addr, Reverse(b.header.seq), b.kind != BlockKind::Real));
        let keeps_backups = self.cfg.mode.uses_rounds();
        for mut b in copies {
            let lv = &mut self.levels[k];
            let a = b.header.addr;
            if a.index() >= lv.n {
                return Err(OramError::CorruptImage(format!(
                    "level {k} holds a block for address {}",
                    a.raw()
                )));
            }
            let (committed, pending) = match target {
                Some((t, c, p)) if t == a => (c, p),
                _ => (lv.labels.labels()[a.index()], lv.temp.get(a)),
            };
            let ctx = FilterContext {
                committed,
                pending,
                live_in_stash: lv.stash.has_live(a),
                stash_backup_seq: lv.stash.backup(a).map(|x| x.header.seq),
                keeps_backups,
                promotable: lv.promotable[a.index()],
            };
            match staleness_filter(&b.header, b.kind, &ctx) {
                Disposition::Live => b.kind = BlockKind::Real,
                Disposition::Backup => b.kind = BlockKind::Backup,
                Disposition::Discard => continue,
            }
            lv.stash.put(b);
            self.nvm.charge_volatile_write(1);
        }
        self.levels[k].stash.check_capacity()
    }
}
