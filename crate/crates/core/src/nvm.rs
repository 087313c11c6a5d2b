//! Simulated non-volatile memory.
//!
//! An [`NvmImage`] is a set of named regions, each an array of fixed-size
//! units (a tree block, a posmap entry, ...). A unit write is atomic: a crash
//! can only ever observe the old or the new bytes. Every access is counted
//! and charged to an additive latency model.

use std::io::{self, Read, Write};

use crate::error::{OramError, Result};

pub const TREE_REGION: &str = "oram_tree";
pub const POSMAP_REGION: &str = "posmap_region";
pub const POSMAP_TREE_REGION: &str = "posmap_tree";
pub const STASH_REGION: &str = "nvm_stash";
pub const META_REGION: &str = "meta";
pub const DATA_WPQ_REGION: &str = "wpq_data";
pub const POSMAP_WPQ_REGION: &str = "wpq_posmap";

pub fn recursive_level_region(level: usize) -> String {
    format!("posmap_oram_{level}")
}

/// Abstract cycles per block operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub t_read_nvm: u64,
    pub t_write_nvm: u64,
    pub t_read_volatile: u64,
    pub t_write_volatile: u64,
}

impl Default for CostModel {
    /// PCM read/write from tRCD/tWP = 48/60; on-chip SRAM at tCCD = 2.
    fn default() -> Self {
        CostModel {
            t_read_nvm: 48,
            t_write_nvm: 60,
            t_read_volatile: 2,
            t_write_volatile: 2,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_write_nvm >= self.t_read_nvm
            && self.t_read_nvm >= self.t_read_volatile
            && self.t_read_volatile > 0
            && self.t_write_volatile > 0;
        if ok {
            Ok(())
        } else {
            Err(OramError::Config(format!(
                "cost model must satisfy t_write_nvm >= t_read_nvm >= t_read_volatile > 0: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemOp {
    Read,
    Write,
}

/// One externally visible memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub region: RegionId,
    pub index: usize,
    pub op: MemOp,
}

#[derive(Debug, Clone)]
struct Region {
    name: String,
    unit: usize,
    data: Vec<u8>,
    reads: u64,
    writes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionCounters {
    pub name: String,
    pub reads: u64,
    pub writes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficCounters {
    pub reads: u64,
    pub writes: u64,
    pub per_region: Vec<RegionCounters>,
}

impl TrafficCounters {
    pub fn region(&self, name: &str) -> RegionCounters {
        self.per_region
            .iter()
            .find(|r| r.name == name)
            .cloned()
            .unwrap_or_else(|| RegionCounters {
                name: name.to_string(),
                ..Default::default()
            })
    }
}

#[derive(Debug, Clone)]
pub struct NvmImage {
    regions: Vec<Region>,
    cost: CostModel,
    elapsed: u64,
    trace: Option<Vec<TraceEvent>>,
}

impl NvmImage {
    pub fn new(cost: CostModel) -> Self {
        NvmImage {
            regions: Vec::new(),
            cost,
            elapsed: 0,
            trace: None,
        }
    }

    pub fn cost(&self) -> CostModel {
        self.cost
    }

    /// Adds a zero-filled region, or returns the existing one of that name.
    pub fn add_region(&mut self, name: &str, unit: usize, units: usize) -> RegionId {
        if let Some(id) = self.region_id(name) {
            return id;
        }
        self.regions.push(Region {
            name: name.to_string(),
            unit,
            data: vec![0; unit * units],
            reads: 0,
            writes: 0,
        });
        RegionId(self.regions.len() - 1)
    }

    /// Replaces a region's bytes wholesale. Used for the persistence-domain
    /// pseudo-regions (WPQ contents, metadata) which have no unit structure.
    pub fn put_raw_region(&mut self, name: &str, bytes: Vec<u8>) {
        match self.region_id(name) {
            Some(id) => {
                let r = &mut self.regions[id.0];
                r.unit = 1;
                r.data = bytes;
            }
            None => self.regions.push(Region {
                name: name.to_string(),
                unit: 1,
                data: bytes,
                reads: 0,
                writes: 0,
            }),
        }
    }

    pub fn raw_region(&self, name: &str) -> Option<&[u8]> {
        self.region_id(name).map(|id| self.regions[id.0].data.as_slice())
    }

    pub fn remove_region(&mut self, name: &str) {
        self.regions.retain(|r| r.name != name);
    }

    pub fn region_id(&self, name: &str) -> Option<RegionId> {
        self.regions.iter().position(|r| r.name == name).map(RegionId)
    }

    pub fn region_names(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.name.clone()).collect()
    }

    pub fn region_name(&self, id: RegionId) -> &str {
        &self.regions[id.0].name
    }

    /// Reinterprets a restored region with the given unit size.
    pub fn set_unit(&mut self, name: &str, unit: usize, units: usize) -> Result<RegionId> {
        let id = self
            .region_id(name)
            .ok_or_else(|| OramError::CorruptImage(format!("region `{name}` missing")))?;
        let r = &mut self.regions[id.0];
        if r.data.len() != unit * units {
            return Err(OramError::CorruptImage(format!(
                "region `{name}` holds {} bytes, expected {} x {}",
                r.data.len(),
                units,
                unit
            )));
        }
        r.unit = unit;
        Ok(id)
    }

    pub fn unit(&self, id: RegionId) -> usize {
        self.regions[id.0].unit
    }

    pub fn units(&self, id: RegionId) -> usize {
        let r = &self.regions[id.0];
        r.data.len() / r.unit
    }

    fn range(&self, id: RegionId, index: usize) -> Result<std::ops::Range<usize>> {
        let r = &self.regions[id.0];
        let units = r.data.len() / r.unit;
        if index >= units {
            return Err(OramError::IndexOutOfRange {
                region: r.name.clone(),
                index,
                units,
            });
        }
        Ok(index * r.unit..(index + 1) * r.unit)
    }

    pub fn read_block(&mut self, id: RegionId, index: usize) -> Result<Vec<u8>> {
        let range = self.range(id, index)?;
        let r = &mut self.regions[id.0];
        r.reads += 1;
        self.elapsed += self.cost.t_read_nvm;
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent {
                region: id,
                index,
                op: MemOp::Read,
            });
        }
        Ok(r.data[range].to_vec())
    }

    pub fn write_block(&mut self, id: RegionId, index: usize, bytes: &[u8]) -> Result<()> {
        let range = self.range(id, index)?;
        let r = &mut self.regions[id.0];
        if bytes.len() != r.unit {
            return Err(OramError::WrongLength {
                region: r.name.clone(),
                expected: r.unit,
                got: bytes.len(),
            });
        }
        r.writes += 1;
        self.elapsed += self.cost.t_write_nvm;
        r.data[range].copy_from_slice(bytes);
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent {
                region: id,
                index,
                op: MemOp::Write,
            });
        }
        Ok(())
    }

    /// Uncounted read, for recovery-time inspection and tests.
    pub fn peek_block(&self, id: RegionId, index: usize) -> Result<&[u8]> {
        let range = self.range(id, index)?;
        Ok(&self.regions[id.0].data[range])
    }

    pub fn charge_volatile_read(&mut self, n: u64) {
        self.elapsed += n * self.cost.t_read_volatile;
    }

    pub fn charge_volatile_write(&mut self, n: u64) {
        self.elapsed += n * self.cost.t_write_volatile;
    }

    /// Charges an NVM access that has no backing region in this model.
    pub fn charge_nvm(&mut self, reads: u64, writes: u64) {
        self.elapsed += reads * self.cost.t_read_nvm + writes * self.cost.t_write_nvm;
    }

    pub fn elapsed(&self) -> u64 {
        self.elapsed
    }

    pub fn counters(&self) -> TrafficCounters {
        let per_region: Vec<RegionCounters> = self
            .regions
            .iter()
            .map(|r| RegionCounters {
                name: r.name.clone(),
                reads: r.reads,
                writes: r.writes,
            })
            .collect();
        TrafficCounters {
            reads: per_region.iter().map(|r| r.reads).sum(),
            writes: per_region.iter().map(|r| r.writes).sum(),
            per_region,
        }
    }

    /// Zeroes counters and the latency accumulator; called at experiment start.
    pub fn reset_counters(&mut self) {
        for r in &mut self.regions {
            r.reads = 0;
            r.writes = 0;
        }
        self.elapsed = 0;
    }

    pub fn start_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    /// Persistent contents only: counters, latency and traces are dropped.
    pub fn crash(&self) -> NvmImage {
        let mut img = self.clone();
        img.reset_counters();
        img.trace = None;
        img
    }

    /// Byte-level equality of all regions (names, order and contents).
    pub fn same_contents(&self, other: &NvmImage) -> bool {
        self.regions.len() == other.regions.len()
            && self
                .regions
                .iter()
                .zip(&other.regions)
                .all(|(a, b)| a.name == b.name && a.data == b.data)
    }

    /// Contents of the named regions, for snapshot comparison.
    pub fn contents_of(&self, names: &[&str]) -> Vec<Vec<u8>> {
        names
            .iter()
            .map(|n| self.raw_region(n).map(<[u8]>::to_vec).unwrap_or_default())
            .collect()
    }

    /// Little-endian dump: per region `u32 name length | name | u64 byte length | bytes`.
    pub fn dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.regions {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&(r.data.len() as u64).to_le_bytes())?;
            w.write_all(&r.data)?;
        }
        Ok(())
    }

    /// Inverse of [`NvmImage::dump`]. Regions come back with unit size 1;
    /// callers reinterpret them with [`NvmImage::set_unit`].
    pub fn restore<R: Read>(mut r: R, cost: CostModel) -> Result<NvmImage> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| OramError::CorruptImage(e.to_string()))?;
        let mut img = NvmImage::new(cost);
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| OramError::CorruptImage("truncated dump".into()))?;
            let s = &buf[*pos..end];
            *pos = end;
            Ok(s)
        };
        while pos < buf.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| OramError::CorruptImage("region name is not UTF-8".into()))?;
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let data = take(&mut pos, len)?.to_vec();
            img.put_raw_region(&name, data);
        }
        Ok(img)
    }
}

/// Named step boundaries at which a crash may be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CrashTag {
    AfterStep2,
    DuringLoad,
    AfterStep4,
    PreStart,
    WpqLoad,
    PostStartPreEnd,
    PostEnd,
    FlushWrite,
    PostFlush,
    /// A write issued straight to NVM, outside any WPQ round.
    DirectWrite,
}

/// Counts crash-eligible events and fires at a chosen one.
///
/// A crash at point `k` stops execution at the `k`-th checkpoint (0-based):
/// everything issued before it is in the image, nothing after it is.
#[derive(Debug, Clone, Default)]
pub struct CrashInjector {
    passed: u64,
    crash_at: Option<u64>,
    access: usize,
    log: Option<Vec<(usize, CrashTag)>>,
}

impl CrashInjector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arm(&mut self, point: u64) {
        self.crash_at = Some(point);
    }

    pub fn disarm(&mut self) {
        self.crash_at = None;
    }

    pub fn record(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn take_log(&mut self) -> Vec<(usize, CrashTag)> {
        self.log.take().unwrap_or_default()
    }

    pub fn set_access(&mut self, access: usize) {
        self.access = access;
    }

    /// Number of checkpoints passed so far.
    pub fn passed(&self) -> u64 {
        self.passed
    }

    pub fn checkpoint(&mut self, tag: CrashTag) -> Result<()> {
        if self.crash_at == Some(self.passed) {
            return Err(OramError::Crashed {
                event: self.passed,
                tag,
            });
        }
        if let Some(log) = &mut self.log {
            log.push((self.access, tag));
        }
        self.passed += 1;
        Ok(())
    }
}
