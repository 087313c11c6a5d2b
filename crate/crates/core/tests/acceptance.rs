//! Acceptance criteria. Runs without the test harness so that the one
//! PASS/FAIL line per criterion is always printed; exits nonzero if any
//! criterion fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ehap_oram::crashlab::{run_suite, SuiteOptions, DEFAULT_SAMPLE_SEED};
use ehap_oram::experiment::{comparison_csv_string, compare_designs, ExperimentConfig, TraceSource};
use ehap_oram::nvm::{CostModel, CrashTag, NvmImage};
use ehap_oram::posmap_backend::{flush_oblivious, TABLE_SLOT_BYTES};
use ehap_oram::stats::{chi_square_uniform, histogram, ks_two_sample, SIGNIFICANCE};
use ehap_oram::trace::{synth_trace, SynthKind, TraceOp};
use ehap_oram::wpq::PosMapWpqEntry;
use ehap_oram::{Controller, OramConfig, PersistMode};

const SEED: u64 = 20;
const LARGE_OPS: usize = 10_000;

struct Verdict {
    id: u32,
    pass: bool,
    detail: String,
}

fn cfg(mode: PersistMode, height: u32) -> OramConfig {
    let mut c = OramConfig::default().with_mode(mode);
    c.height = height;
    c.seed = SEED;
    c.normalized().unwrap()
}

fn run(c: &OramConfig, trace: &[TraceOp]) -> Controller {
    let mut ctl = Controller::new(c.clone()).unwrap();
    for op in trace {
        ctl.access(&op.request(c.block_size)).unwrap();
    }
    ctl
}

fn exhaustive_opts() -> SuiteOptions {
    SuiteOptions {
        sample: None,
        sample_seed: DEFAULT_SAMPLE_SEED,
        replay: true,
        tags: None,
        artifact_dir: None,
        trace_name: "uniform".into(),
    }
}

/// Criteria 1-3: the L=5 exhaustive crash suite under EHAP, and Baseline's
/// expected failures at the points after the position map update.
fn crash_criteria(out: &mut Vec<Verdict>) {
    let ehap = cfg(PersistMode::Ehap, 5);
    assert_eq!(ehap.n_blocks(), 32);
    let trace = synth_trace(SynthKind::Uniform, 50, 32, SEED).unwrap();
    let r = run_suite(&ehap, &trace, &exhaustive_opts()).unwrap();
    let exhaustive = r.exercised == r.total_points;
    out.push(Verdict {
        id: 1,
        pass: exhaustive && r.all_passed() && r.total_points > 0,
        detail: format!(
            "EHAP L=5 N=32, 50 ops: {}/{} crash points match the oracle (exhaustive: {exhaustive})",
            r.passed, r.total_points
        ),
    });
    out.push(Verdict {
        id: 2,
        pass: exhaustive && r.atomicity_violations == 0,
        detail: format!("{} partially applied rounds over {} points", r.atomicity_violations, r.exercised),
    });

    let base = cfg(PersistMode::Baseline, 5);
    let opts = SuiteOptions {
        tags: Some(vec![CrashTag::AfterStep2]),
        replay: false,
        ..exhaustive_opts()
    };
    let r = run_suite(&base, &trace, &opts).unwrap();
    let mismatching = r.failures.iter().filter(|f| !f.mismatches.is_empty()).count();
    out.push(Verdict {
        id: 3,
        pass: r.exercised > 0 && mismatching >= 1 && !r.all_passed(),
        detail: format!(
            "Baseline: {mismatching} of {} post-remap crash points lose data",
            r.exercised
        ),
    });
}

/// Criteria 4 and 5: stash equivalence and leaf-sequence checks at L=7.
fn stash_and_leaf_criteria(out: &mut Vec<Verdict>) {
    let n = 128;
    let uniform = synth_trace(SynthKind::Uniform, LARGE_OPS, n, SEED).unwrap();
    let base = run(&cfg(PersistMode::Baseline, 7), &uniform);
    let ehap = run(&cfg(PersistMode::Ehap, 7), &uniform);
    let (bl, el) = (&base.stats().live_log, &ehap.stats().live_log);
    let first_diff = bl.iter().zip(el).position(|(a, b)| a != b);
    out.push(Verdict {
        id: 4,
        pass: bl.len() == LARGE_OPS && bl == el,
        detail: format!(
            "live stash counts over {} accesses, first difference at {first_diff:?}, peak {}",
            bl.len(),
            bl.iter().max().unwrap()
        ),
    });

    let hot = synth_trace(SynthKind::SingleHot, LARGE_OPS, n, SEED).unwrap();
    let seq = synth_trace(SynthKind::Sequential, LARGE_OPS, n, SEED).unwrap();
    // Under one seed both traces draw the same labels, so the KS check
    // runs the single-hot trace under another seed.
    let mut hot_cfg = cfg(PersistMode::Ehap, 7);
    hot_cfg.seed = SEED + 1;
    let hot_leaves = run(&hot_cfg, &hot).stats().leaf_log.clone();
    let seq_ctl = run(&cfg(PersistMode::Ehap, 7), &seq);
    let seq_leaves = seq_ctl.stats().leaf_log.clone();
    let seq_base = run(&cfg(PersistMode::Baseline, 7), &seq);
    let chi = |l: &[ehap_oram::block::PathId]| {
        chi_square_uniform(&histogram(l.iter().map(|p| p.0 as u64), n as usize)).unwrap()
    };
    let (ch, cs) = (chi(&hot_leaves), chi(&seq_leaves));
    let f = |l: &[ehap_oram::block::PathId]| l.iter().map(|p| p.0 as f64).collect::<Vec<_>>();
    let ks = ks_two_sample(&f(&hot_leaves), &f(&seq_leaves)).unwrap();
    let identical = seq_leaves == seq_base.stats().leaf_log && hot_leaves.len() == LARGE_OPS;
    out.push(Verdict {
        id: 5,
        pass: ch.p_value > SIGNIFICANCE && cs.p_value > SIGNIFICANCE && !ks.rejects() && identical,
        detail: format!(
            "chi-square p single-hot {:.3} sequential {:.3}, KS p {:.3}, EHAP/Baseline leaves identical: {identical}",
            ch.p_value, cs.p_value, ks.p_value
        ),
    });
}

/// Criteria 6 and 7, plus the comparison CSV used for determinism.
fn traffic_criteria(out: &mut Vec<Verdict>) -> String {
    let exp = ExperimentConfig {
        oram: cfg(PersistMode::Baseline, 7),
        trace: TraceSource::Synth {
            kind: SynthKind::Uniform,
            count: LARGE_OPS,
        },
        ..ExperimentConfig::default()
    };
    let trace = exp.load_trace().unwrap();
    let rows = compare_designs(&exp, &trace).unwrap();
    let by = |m: PersistMode| rows.iter().find(|r| r.stats.mode == m.name()).unwrap().stats.clone();
    let (base, full, fp, ehap, rb) = (
        by(PersistMode::Baseline),
        by(PersistMode::FullNvm),
        by(PersistMode::Fp),
        by(PersistMode::Ehap),
        by(PersistMode::RcrBaseline),
    );

    let writes = full.nvm_writes > fp.nvm_writes
        && fp.nvm_writes > ehap.nvm_writes
        && ehap.nvm_writes >= base.nvm_writes;

    let fp_ctl = run(&cfg(PersistMode::Fp, 7), &trace);
    let l_pos = 7 - 1;
    let fp_width = (4 * (l_pos + 1)) as u32;
    let fp_exact = fp_ctl.stats().posmap_entries_per_round.iter().all(|&e| e == fp_width);
    let ehap_ctl = run(&cfg(PersistMode::Ehap, 7), &trace);
    let s = ehap_ctl.stats();
    let bound = (4 * (7 + 1)) as u32;
    let ehap_bounded = s
        .posmap_entries_per_round
        .iter()
        .zip(&s.dirty_per_round)
        .all(|(&e, &d)| e <= d && d <= bound);
    let max_dirty = s.dirty_per_round.iter().max().copied().unwrap_or(0);
    let read_ratio = rb.nvm_reads as f64 / base.nvm_reads as f64;
    out.push(Verdict {
        id: 6,
        pass: writes && fp_exact && ehap_bounded && read_ratio > 1.5,
        detail: format!(
            "writes FullNVM {} > FP {} > EHAP {} >= Baseline {}; FP {fp_width} entries every round: {fp_exact}; \
             EHAP entries <= dirty <= {bound}: {ehap_bounded} (max dirty {max_dirty}); Rcr read ratio {read_ratio:.3}",
            full.nvm_writes, fp.nvm_writes, ehap.nvm_writes, base.nvm_writes
        ),
    });

    let elapsed = full.elapsed > fp.elapsed && fp.elapsed > ehap.elapsed && ehap.elapsed > base.elapsed;
    let overhead = |x: u64| (x as f64 - base.elapsed as f64) / base.elapsed as f64;
    out.push(Verdict {
        id: 7,
        pass: elapsed && overhead(ehap.elapsed) < overhead(fp.elapsed),
        detail: format!(
            "elapsed FullNVM {} > FP {} > EHAP {} > Baseline {}; overhead EHAP {:.2}% vs FP {:.2}%",
            full.elapsed,
            fp.elapsed,
            ehap.elapsed,
            base.elapsed,
            100.0 * overhead(ehap.elapsed),
            100.0 * overhead(fp.elapsed)
        ),
    });
    comparison_csv_string(&rows).unwrap()
}

/// Criterion 8: recursive map equivalence and its crash suite at L=4.
fn recursive_criteria(out: &mut Vec<Verdict>) {
    let trace = synth_trace(SynthKind::Uniform, 5000, 128, SEED).unwrap();
    let rcr = run(&cfg(PersistMode::RcrEhap, 7), &trace);
    let direct = run(&cfg(PersistMode::Ehap, 7), &trace);
    let same_map = rcr.logical_posmap() == direct.logical_posmap();
    let same_data = rcr.readout().unwrap() == direct.readout().unwrap();

    let small = cfg(PersistMode::RcrEhap, 4);
    let t = synth_trace(SynthKind::Uniform, 40, 16, SEED).unwrap();
    let r = run_suite(&small, &t, &exhaustive_opts()).unwrap();
    out.push(Verdict {
        id: 8,
        pass: same_map && same_data && r.all_passed() && r.exercised == r.total_points,
        detail: format!(
            "Rcr-EHAP vs direct map after 5000 ops equal: {same_map}; L=4 crash suite {}/{} pass",
            r.passed, r.total_points
        ),
    });
}

/// Criterion 9: the oblivious sweep's access trace ignores which entries are dirty.
fn sweep_criterion(out: &mut Vec<Verdict>) {
    let slots = 128;
    let mut img = NvmImage::new(CostModel::default());
    let id = img.add_region("posmap_region", TABLE_SLOT_BYTES, slots);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut reference = None;
    let mut identical = 0;
    for _ in 0..100 {
        let k = rng.gen_range(0..=slots);
        let set: Vec<PosMapWpqEntry> = (0..k)
            .map(|_| PosMapWpqEntry {
                addr: rng.gen_range(0..slots as u32),
                label: rng.gen_range(0..128),
            })
            .collect();
        img.start_trace();
        flush_oblivious(&mut img, id, &set).unwrap();
        let events = format!("{:?}", img.take_trace());
        match &reference {
            None => {
                reference = Some(events);
                identical += 1;
            }
            Some(r) if *r == events => identical += 1,
            Some(_) => {}
        }
    }
    out.push(Verdict {
        id: 9,
        pass: identical == 100,
        detail: format!("{identical}/100 sweep traces identical over {slots} slots"),
    });
}

fn evaluate() -> (Vec<Verdict>, String) {
    let mut out = Vec::new();
    crash_criteria(&mut out);
    stash_and_leaf_criteria(&mut out);
    let csv = traffic_criteria(&mut out);
    recursive_criteria(&mut out);
    sweep_criterion(&mut out);
    (out, csv)
}

fn main() {
    let (mut verdicts, csv) = evaluate();
    let (again, csv_again) = evaluate();
    let same_verdicts = verdicts.iter().map(|v| v.pass).eq(again.iter().map(|v| v.pass));
    let same_details = verdicts.iter().map(|v| &v.detail).eq(again.iter().map(|v| &v.detail));
    verdicts.push(Verdict {
        id: 10,
        pass: csv == csv_again && same_verdicts && same_details,
        detail: format!(
            "rerun with seed {SEED}: CSV byte-identical {}, verdicts identical {same_verdicts}",
            csv == csv_again
        ),
    });
    for v in &verdicts {
        println!("criterion {:>2}: {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", verdicts.len());
}
