//! Trace-driven runs, multi-channel sharding and CSV output.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::config::parse_kv;
use crate::controller::{Controller, OramConfig, PersistMode};
use crate::error::{OramError, Result};
use crate::nvm::{POSMAP_REGION, POSMAP_TREE_REGION, STASH_REGION, TREE_REGION};
use crate::posmap_backend::PosMapKind;
use crate::crashlab::DEFAULT_SAMPLE_SEED;
use crate::trace::{parse_trace, synth_trace, SynthKind, TraceOp};

#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    File(PathBuf),
    /// Generated from the protocol seed.
    Synth { kind: SynthKind, count: usize },
}

impl TraceSource {
    /// A synthetic kind name, otherwise a file path.
    pub fn parse(s: &str, count: usize) -> Self {
        match SynthKind::parse(s) {
            Ok(kind) => TraceSource::Synth { kind, count },
            Err(_) => TraceSource::File(PathBuf::from(s)),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TraceSource::File(p) => p.display().to_string(),
            TraceSource::Synth { kind, .. } => kind.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub oram: OramConfig,
    /// Independent tree shards; a power of two.
    pub channels: usize,
    pub trace: TraceSource,
    pub sample_seed: u64,
}

pub const DEFAULT_SYNTH_OPS: usize = 10_000;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            oram: OramConfig::default(),
            channels: 1,
            trace: TraceSource::Synth {
                kind: SynthKind::Uniform,
                count: DEFAULT_SYNTH_OPS,
            },
            sample_seed: DEFAULT_SAMPLE_SEED,
        }
    }
}

impl ExperimentConfig {
    /// Protocol keys plus `channels`, `trace`, `ops` and `sample_seed`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| OramError::Config(format!("`{key}` needs an integer, got `{v}`")))
        };
        match key {
            "channels" => self.channels = num(value)? as usize,
            "sample_seed" => self.sample_seed = num(value)?,
            "trace" => {
                let count = match &self.trace {
                    TraceSource::Synth { count, .. } => *count,
                    TraceSource::File(_) => DEFAULT_SYNTH_OPS,
                };
                self.trace = TraceSource::parse(value, count);
            }
            "ops" => {
                let n = num(value)? as usize;
                match &mut self.trace {
                    TraceSource::Synth { count, .. } => *count = n,
                    TraceSource::File(_) => {
                        return Err(OramError::Config("`ops` only applies to synthetic traces".into()))
                    }
                }
            }
            _ => self.oram.set(key, value)?,
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn load_trace(&self) -> Result<Vec<TraceOp>> {
        let n = self.oram.n_blocks() as u64;
        match &self.trace {
            TraceSource::Synth { kind, count } => synth_trace(*kind, *count, n, self.oram.seed),
            TraceSource::File(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| OramError::Config(format!("trace {}: {e}", p.display())))?;
                parse_trace(&text, Some(n))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub mode: String,
    pub trace: String,
    pub seed: u64,
    pub levels: u32,
    pub z: usize,
    pub stash: usize,
    pub channels: usize,
    pub posmap: String,
    pub accesses: u64,
    pub nvm_reads: u64,
    pub nvm_writes: u64,
    pub tree_reads: u64,
    pub tree_writes: u64,
    pub posmap_reads: u64,
    pub posmap_writes: u64,
    pub posmap_tree_reads: u64,
    pub posmap_tree_writes: u64,
    /// All recursive position-map trees together.
    pub posmap_oram_reads: u64,
    pub posmap_oram_writes: u64,
    pub stash_nvm_reads: u64,
    pub stash_nvm_writes: u64,
    pub elapsed: u64,
    pub stash_hwm: usize,
    pub posmap_entries_flushed: u64,
}

pub const CSV_HEADER: [&str; 24] = [
    "mode",
    "trace",
    "seed",
    "levels",
    "z",
    "stash",
    "channels",
    "posmap",
    "accesses",
    "nvm_reads",
    "nvm_writes",
    "tree_reads",
    "tree_writes",
    "posmap_reads",
    "posmap_writes",
    "posmap_tree_reads",
    "posmap_tree_writes",
    "posmap_oram_reads",
    "posmap_oram_writes",
    "stash_nvm_reads",
    "stash_nvm_writes",
    "elapsed",
    "stash_hwm",
    "posmap_entries_flushed",
];

impl RunStats {
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.mode.clone(),
            self.trace.clone(),
            self.seed.to_string(),
            self.levels.to_string(),
            self.z.to_string(),
            self.stash.to_string(),
            self.channels.to_string(),
            self.posmap.clone(),
            self.accesses.to_string(),
            self.nvm_reads.to_string(),
            self.nvm_writes.to_string(),
            self.tree_reads.to_string(),
            self.tree_writes.to_string(),
            self.posmap_reads.to_string(),
            self.posmap_writes.to_string(),
            self.posmap_tree_reads.to_string(),
            self.posmap_tree_writes.to_string(),
            self.posmap_oram_reads.to_string(),
            self.posmap_oram_writes.to_string(),
            self.stash_nvm_reads.to_string(),
            self.stash_nvm_writes.to_string(),
            self.elapsed.to_string(),
            self.stash_hwm.to_string(),
            self.posmap_entries_flushed.to_string(),
        ]
    }

    /// Adds one shard's counters; elapsed time is the slowest shard's.
    fn absorb(&mut self, ctl: &Controller) {
        let c = ctl.nvm().counters();
        self.accesses += ctl.stats().accesses;
        self.nvm_reads += c.reads;
        self.nvm_writes += c.writes;
        for r in &c.per_region {
            let (reads, writes) = match r.name.as_str() {
                TREE_REGION => (&mut self.tree_reads, &mut self.tree_writes),
                POSMAP_REGION => (&mut self.posmap_reads, &mut self.posmap_writes),
                POSMAP_TREE_REGION => (&mut self.posmap_tree_reads, &mut self.posmap_tree_writes),
                STASH_REGION => (&mut self.stash_nvm_reads, &mut self.stash_nvm_writes),
                n if n.starts_with("posmap_oram_") => {
                    (&mut self.posmap_oram_reads, &mut self.posmap_oram_writes)
                }
                _ => continue,
            };
            *reads += r.reads;
            *writes += r.writes;
        }
        self.elapsed = self.elapsed.max(ctl.nvm().elapsed());
        self.stash_hwm = self.stash_hwm.max(ctl.stats().stash_hwm);
        self.posmap_entries_flushed += ctl.stats().posmap_entries_flushed;
    }
}

/// Shard configuration for `channels` interleaved channels.
pub fn shard_config(cfg: &OramConfig, channels: usize, shard: usize) -> Result<OramConfig> {
    if channels == 0 || !channels.is_power_of_two() {
        return Err(OramError::Config(format!("channels must be a power of two, got {channels}")));
    }
    let bits = channels.trailing_zeros();
    let n = cfg.n_blocks();
    if bits > cfg.height || n % channels != 0 {
        return Err(OramError::Config(format!(
            "{n} blocks cannot be split over {channels} channels"
        )));
    }
    let mut s = cfg.clone();
    s.height = cfg.height - bits;
    s.blocks = cfg.blocks.map(|b| b / channels);
    s.seed = cfg.seed.wrapping_add(shard as u64);
    Ok(s)
}

/// Runs the trace to completion. Counters cover requests only, not setup.
pub fn run_trace(cfg: &OramConfig, channels: usize, trace: &[TraceOp]) -> Result<(RunStats, Vec<Controller>)> {
    let cfg = cfg.clone().normalized()?;
    let n = cfg.n_blocks() as u64;
    let mut shards = (0..channels)
        .map(|s| shard_config(&cfg, channels, s).and_then(Controller::new))
        .collect::<Result<Vec<_>>>()?;
    let ch = channels as u64;
    for op in trace {
        if op.addr >= n {
            return Err(OramError::InvalidAddress {
                addr: op.addr,
                capacity: n,
            });
        }
        let mut local = *op;
        local.addr = op.addr / ch;
        shards[(op.addr % ch) as usize].access(&local.request(cfg.block_size))?;
    }
    let mut stats = RunStats {
        mode: cfg.mode.name().to_string(),
        seed: cfg.seed,
        levels: cfg.height,
        z: cfg.z,
        stash: cfg.stash_capacity,
        channels,
        posmap: if cfg.mode == PersistMode::Fp {
            "fp-tree".to_string()
        } else {
            cfg.posmap.name().to_string()
        },
        ..RunStats::default()
    };
    for s in &shards {
        stats.absorb(s);
    }
    Ok((stats, shards))
}

pub fn run_experiment(exp: &ExperimentConfig, trace: &[TraceOp]) -> Result<RunStats> {
    let (mut stats, _) = run_trace(&exp.oram, exp.channels, trace)?;
    stats.trace = exp.trace.name();
    Ok(stats)
}

/// The base configuration adapted to `mode`: recursive designs get the
/// recursive map, FP its own tree.
pub fn mode_config(base: &OramConfig, mode: PersistMode) -> OramConfig {
    let mut c = base.clone();
    if c.posmap == PosMapKind::Recursive {
        c.posmap = PosMapKind::Direct;
    }
    let mut c = c.with_mode(mode);
    if mode == PersistMode::Fp {
        c.posmap = PosMapKind::Direct;
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub stats: RunStats,
    /// Relative to Baseline at the same channel count.
    pub norm_reads: f64,
    pub norm_writes: f64,
    pub norm_elapsed: f64,
    /// Elapsed time relative to single-channel Baseline.
    pub norm_elapsed_1ch: f64,
}

pub const COMPARE_EXTRA_HEADER: [&str; 4] =
    ["norm_reads", "norm_writes", "norm_elapsed", "norm_elapsed_1ch"];

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

/// All six designs on one trace with a shared seed.
pub fn compare_designs(exp: &ExperimentConfig, trace: &[TraceOp]) -> Result<Vec<ComparisonRow>> {
    let mut jobs: Vec<(PersistMode, usize)> =
        PersistMode::ALL.iter().map(|&m| (m, exp.channels)).collect();
    if exp.channels != 1 {
        jobs.push((PersistMode::Baseline, 1));
    }
    let runs: Vec<RunStats> = jobs
        .par_iter()
        .map(|&(mode, channels)| {
            run_experiment(
                &ExperimentConfig {
                    oram: mode_config(&exp.oram, mode),
                    channels,
                    ..exp.clone()
                },
                trace,
            )
        })
        .collect::<Result<_>>()?;
    let base = runs[0].clone();
    let base_1ch = if exp.channels == 1 { base.clone() } else { runs[PersistMode::ALL.len()].clone() };
    Ok(runs[..PersistMode::ALL.len()]
        .iter()
        .map(|s| ComparisonRow {
            stats: s.clone(),
            norm_reads: ratio(s.nvm_reads, base.nvm_reads),
            norm_writes: ratio(s.nvm_writes, base.nvm_writes),
            norm_elapsed: ratio(s.elapsed, base.elapsed),
            norm_elapsed_1ch: ratio(s.elapsed, base_1ch.elapsed),
        })
        .collect())
}

pub fn write_csv<W: Write>(out: W, rows: &[RunStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| OramError::Config(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        w.write_record(r.csv_record()).map_err(err)?;
    }
    w.flush().map_err(|e| OramError::Config(format!("csv: {e}")))
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| OramError::Config(format!("csv: {e}"));
    let header: Vec<&str> = CSV_HEADER.iter().chain(&COMPARE_EXTRA_HEADER).copied().collect();
    w.write_record(header).map_err(err)?;
    for r in rows {
        let mut rec = r.stats.csv_record();
        for v in [r.norm_reads, r.norm_writes, r.norm_elapsed, r.norm_elapsed_1ch] {
            rec.push(format!("{v:.6}"));
        }
        w.write_record(rec).map_err(err)?;
    }
    w.flush().map_err(|e| OramError::Config(format!("csv: {e}")))
}

pub fn csv_string(rows: &[RunStats]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn comparison_csv_string(rows: &[ComparisonRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_comparison_csv(&mut buf, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut e = ExperimentConfig::from_kv("levels = 4\nseed = 3\ntrace = uniform\nops = 300\n").unwrap();
        e.oram.stash_capacity = 100;
        e
    }

    #[test]
    fn kv_overrides_and_trace_source() {
        let e = small();
        assert_eq!(e.oram.height, 4);
        assert_eq!(e.trace, TraceSource::Synth { kind: SynthKind::Uniform, count: 300 });
        let mut f = e.clone();
        f.set("trace", "some/file.trace").unwrap();
        assert_eq!(f.trace.name(), "some/file.trace");
        assert!(f.set("ops", "5").is_err());
        assert!(f.set("bogus", "1").is_err());
    }

    #[test]
    fn stats_match_controller_counters() {
        let e = small();
        let trace = e.load_trace().unwrap();
        let (stats, shards) = run_trace(&e.oram, 1, &trace).unwrap();
        let c = shards[0].nvm().counters();
        assert_eq!((stats.nvm_reads, stats.nvm_writes), (c.reads, c.writes));
        assert_eq!(stats.elapsed, shards[0].nvm().elapsed());
        assert_eq!(stats.accesses, 300);
        let regions = stats.tree_reads + stats.posmap_reads + stats.posmap_tree_reads
            + stats.posmap_oram_reads + stats.stash_nvm_reads;
        assert_eq!(regions, stats.nvm_reads);
    }

    #[test]
    fn sharding_splits_addresses_and_sums_accesses() {
        let e = small();
        let trace = e.load_trace().unwrap();
        let (stats, shards) = run_trace(&e.oram, 4, &trace).unwrap();
        assert_eq!(shards.len(), 4);
        assert!(shards.iter().all(|s| s.config().height == 2));
        let per: Vec<u64> = shards.iter().map(|s| s.stats().accesses).collect();
        for (i, &n) in per.iter().enumerate() {
            assert_eq!(n, trace.iter().filter(|o| o.addr % 4 == i as u64).count() as u64);
        }
        assert_eq!(stats.accesses, 300);
        assert_eq!(stats.elapsed, shards.iter().map(|s| s.nvm().elapsed()).max().unwrap());
        assert!(run_trace(&e.oram, 3, &trace).is_err());
        assert!(run_trace(&e.oram, 32, &trace).is_err());
    }

    #[test]
    fn comparison_is_baseline_relative_and_deterministic() {
        let e = small();
        let trace = e.load_trace().unwrap();
        let rows = compare_designs(&e, &trace).unwrap();
        assert_eq!(rows.len(), PersistMode::ALL.len());
        let b = &rows[0];
        assert_eq!(b.stats.mode, "baseline");
        assert_eq!((b.norm_reads, b.norm_writes, b.norm_elapsed, b.norm_elapsed_1ch), (1.0, 1.0, 1.0, 1.0));
        assert!(rows.iter().all(|r| r.norm_writes > 0.0 && r.norm_elapsed > 0.0));
        let again = compare_designs(&e, &trace).unwrap();
        assert_eq!(comparison_csv_string(&rows).unwrap(), comparison_csv_string(&again).unwrap());
    }

    #[test]
    fn csv_has_fixed_header() {
        let text = csv_string(&[RunStats::default()]).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, CSV_HEADER.join(","));
        assert_eq!(text.lines().count(), 2);
    }
}
