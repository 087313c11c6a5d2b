//! Crash injection against a durability oracle.
//!
//! A clean run records every checkpoint, the checkpoint count at which each
//! access became durable, and the persistent contents after every round.
//! Each crash run stops at one checkpoint, recovers from the image and
//! compares the recovered store with the oracle built from the accesses
//! committed before that checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controller::{Controller, OramConfig, RoundSnapshot};
use crate::error::{OramError, Result};
use crate::nvm::CrashTag;
use crate::recovery::{recover, resolve_read, WpqDisposition};
use crate::trace::TraceOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CrashPoint {
    /// Checkpoint number; the crash happens before this checkpoint's action.
    pub index: u64,
    pub access: usize,
    pub tag: CrashTag,
}

/// Last committed value per address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleStore {
    values: Vec<Vec<u8>>,
}

impl OracleStore {
    pub fn new(blocks: usize, block_size: usize) -> Self {
        OracleStore {
            values: vec![vec![0; block_size]; blocks],
        }
    }

    pub fn commit(&mut self, op: &TraceOp, block_size: usize) {
        if let crate::controller::Request::Write(a, data) = op.request(block_size) {
            self.values[a as usize] = data;
        }
    }

    pub fn values(&self) -> &[Vec<u8>] {
        &self.values
    }

    /// Store after the accesses whose commit mark is at most `point`.
    pub fn at(cfg: &OramConfig, trace: &[TraceOp], marks: &[u64], point: u64) -> Self {
        let mut store = OracleStore::new(cfg.n_blocks(), cfg.block_size);
        for (op, &m) in trace.iter().zip(marks) {
            if m <= point {
                store.commit(op, cfg.block_size);
            }
        }
        store
    }
}

/// Everything a crash run is checked against.
#[derive(Debug, Clone)]
pub struct CleanRun {
    pub points: Vec<CrashPoint>,
    pub commit_marks: Vec<u64>,
    pub snapshots: Vec<RoundSnapshot>,
    pub final_store: Vec<Vec<u8>>,
}

pub fn clean_run(cfg: &OramConfig, trace: &[TraceOp]) -> Result<CleanRun> {
    let mut ctl = Controller::new(cfg.clone())?;
    ctl.injector_mut().record();
    ctl.record_snapshots();
    for op in trace {
        ctl.access(&op.request(cfg.block_size))?;
    }
    let points = ctl
        .injector_mut()
        .take_log()
        .into_iter()
        .enumerate()
        .map(|(i, (access, tag))| CrashPoint {
            index: i as u64,
            access,
            tag,
        })
        .collect();
    Ok(CleanRun {
        points,
        commit_marks: ctl.commit_marks().to_vec(),
        snapshots: ctl.snapshots().to_vec(),
        final_store: ctl.readout()?,
    })
}

/// Every checkpoint the trace passes, in execution order.
pub fn enumerate_crash_points(cfg: &OramConfig, trace: &[TraceOp]) -> Result<Vec<CrashPoint>> {
    Ok(clean_run(cfg, trace)?.points)
}

#[derive(Debug, Clone)]
pub struct CrashOutcome {
    pub point: CrashPoint,
    /// Recovered value per address; `None` where no valid copy was found.
    pub readout: Vec<Option<Vec<u8>>>,
    pub oracle: Vec<Vec<u8>>,
    pub mismatches: Vec<u64>,
    /// Whether the persisted image equals a round boundary. Only checked
    /// for designs with atomic rounds.
    pub atomic: Option<bool>,
    /// Whether finishing the trace after recovery reaches the crash-free
    /// final store. Only set when replay was requested.
    pub replay_ok: Option<bool>,
    pub disposition: WpqDisposition,
    /// Recovery itself failed.
    pub error: Option<String>,
}

impl CrashOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && self.mismatches.is_empty()
            && self.atomic != Some(false)
            && self.replay_ok != Some(false)
    }
}

fn failed_recovery(point: CrashPoint, oracle: Vec<Vec<u8>>, e: OramError) -> CrashOutcome {
    CrashOutcome {
        point,
        readout: vec![None; oracle.len()],
        mismatches: (0..oracle.len() as u64).collect(),
        oracle,
        atomic: None,
        replay_ok: None,
        disposition: WpqDisposition::default(),
        error: Some(e.to_string()),
    }
}

/// Runs `trace` with a crash at `point`, recovers and reads every address.
pub fn run_with_crash(
    cfg: &OramConfig,
    trace: &[TraceOp],
    point: &CrashPoint,
    clean: &CleanRun,
    replay: bool,
) -> Result<CrashOutcome> {
    let mut ctl = Controller::new(cfg.clone())?;
    ctl.injector_mut().arm(point.index);
    let mut crashed = false;
    for op in trace {
        match ctl.access(&op.request(cfg.block_size)) {
            Ok(_) => {}
            Err(OramError::Crashed { .. }) => {
                crashed = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if !crashed {
        return Err(OramError::Config(format!(
            "crash point {} lies beyond the trace",
            point.index
        )));
    }
    let image = ctl.crash_image();
    let oracle = OracleStore::at(cfg, trace, &clean.commit_marks, point.index)
        .values()
        .to_vec();
    let state = match recover(&image) {
        Ok(s) => s,
        Err(e) => return Ok(failed_recovery(*point, oracle, e)),
    };
    let readout: Vec<Option<Vec<u8>>> = (0..oracle.len() as u64)
        .map(|a| resolve_read(&state, a).ok())
        .collect();
    let mismatches = readout
        .iter()
        .zip(&oracle)
        .enumerate()
        .filter(|(_, (r, o))| r.as_ref() != Some(*o))
        .map(|(a, _)| a as u64)
        .collect();
    let atomic = cfg.clone().normalized()?.mode.uses_rounds().then(|| {
        clean
            .snapshots
            .iter()
            .filter(|s| s.mark <= point.index)
            .last()
            .is_some_and(|s| s.contents == state.controller.persistent_contents())
    });
    let replay_ok = if replay {
        let resume = clean
            .commit_marks
            .iter()
            .position(|&m| m > point.index)
            .unwrap_or(trace.len());
        let mut ctl = state.controller.clone();
        let mut ok = true;
        for op in &trace[resume..] {
            if ctl.access(&op.request(cfg.block_size)).is_err() {
                ok = false;
                break;
            }
        }
        Some(ok && ctl.readout().ok().as_ref() == Some(&clean.final_store))
    } else {
        None
    };
    Ok(CrashOutcome {
        point: *point,
        readout,
        oracle,
        mismatches,
        atomic,
        replay_ok,
        disposition: state.disposition,
        error: None,
    })
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Number of points to sample; `None` runs all of them at desk scale
    /// (height at most 5, at most 50 accesses) and 1000 otherwise.
    pub sample: Option<usize>,
    pub sample_seed: u64,
    pub replay: bool,
    /// Only run points with these tags.
    pub tags: Option<Vec<CrashTag>>,
    /// Where to write image dumps and repro lines of failing points.
    pub artifact_dir: Option<PathBuf>,
    /// Name of the trace, for repro lines.
    pub trace_name: String,
}

/// Default sampling seed, distinct from any protocol seed default.
pub const DEFAULT_SAMPLE_SEED: u64 = 0xC0FFEE;

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub total_points: usize,
    pub exercised: usize,
    pub passed: usize,
    pub atomicity_violations: usize,
    pub recovery_errors: usize,
    pub failures: Vec<CrashOutcome>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.exercised
    }
}

pub fn select_points(
    cfg: &OramConfig,
    trace: &[TraceOp],
    points: &[CrashPoint],
    opts: &SuiteOptions,
) -> Vec<CrashPoint> {
    let filtered: Vec<CrashPoint> = points
        .iter()
        .filter(|p| opts.tags.as_ref().map_or(true, |t| t.contains(&p.tag)))
        .copied()
        .collect();
    let want = match opts.sample {
        Some(n) => n,
        None if cfg.height <= 5 && trace.len() <= 50 => filtered.len(),
        None => 1000,
    };
    if want >= filtered.len() {
        return filtered;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut idx = sample(&mut rng, filtered.len(), want).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| filtered[i]).collect()
}

/// Runs the selected crash points in parallel.
pub fn run_suite(cfg: &OramConfig, trace: &[TraceOp], opts: &SuiteOptions) -> Result<SuiteReport> {
    let clean = clean_run(cfg, trace)?;
    let chosen = select_points(cfg, trace, &clean.points, opts);
    let outcomes: Vec<CrashOutcome> = chosen
        .par_iter()
        .map(|p| run_with_crash(cfg, trace, p, &clean, opts.replay))
        .collect::<Result<_>>()?;
    let failures: Vec<CrashOutcome> = outcomes.iter().filter(|o| !o.passed()).cloned().collect();
    if let Some(dir) = &opts.artifact_dir {
        write_artifacts(cfg, trace, dir, &opts.trace_name, &failures)?;
    }
    Ok(SuiteReport {
        total_points: clean.points.len(),
        exercised: outcomes.len(),
        passed: outcomes.len() - failures.len(),
        atomicity_violations: outcomes.iter().filter(|o| o.atomic == Some(false)).count(),
        recovery_errors: outcomes.iter().filter(|o| o.error.is_some()).count(),
        failures,
    })
}

/// One line that reruns a single crash point from the command line.
pub fn repro_line(cfg: &OramConfig, trace_name: &str, point: &CrashPoint) -> String {
    format!(
        "ehap crashsuite --mode {} --levels {} --z {} --stash {} --seed {} --trace {} --point {} # access {} {:?}",
        cfg.mode, cfg.height, cfg.z, cfg.stash_capacity, cfg.seed, trace_name, point.index, point.access, point.tag
    )
}

fn write_artifacts(
    cfg: &OramConfig,
    trace: &[TraceOp],
    dir: &PathBuf,
    trace_name: &str,
    failures: &[CrashOutcome],
) -> Result<()> {
    let io = |e: std::io::Error| OramError::Config(format!("artifact dir {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut repro = fs::File::create(dir.join("repro.txt")).map_err(io)?;
    for f in failures.iter().take(16) {
        writeln!(repro, "{}", repro_line(cfg, trace_name, &f.point)).map_err(io)?;
        let mut ctl = Controller::new(cfg.clone())?;
        ctl.injector_mut().arm(f.point.index);
        for op in trace {
            if ctl.access(&op.request(cfg.block_size)).is_err() {
                break;
            }
        }
        let file = fs::File::create(dir.join(format!("crash-{}.img", f.point.index))).map_err(io)?;
        ctl.crash_image().dump(std::io::BufWriter::new(file)).map_err(io)?;
    }
    Ok(())
}
