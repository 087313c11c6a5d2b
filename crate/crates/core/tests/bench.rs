use std::process::Command;

use ehap_oram::experiment::{compare_designs, run_experiment, ExperimentConfig, TraceSource};
use ehap_oram::stats::{chi_square_uniform, histogram, SIGNIFICANCE};
use ehap_oram::trace::{synth_trace, SynthKind};
use ehap_oram::PersistMode;

fn exp(mode: PersistMode, channels: usize) -> ExperimentConfig {
    let mut e = ExperimentConfig {
        channels,
        trace: TraceSource::Synth {
            kind: SynthKind::Uniform,
            count: 10_000,
        },
        ..ExperimentConfig::default()
    };
    e.oram = e.oram.with_mode(mode);
    e.oram.seed = 31;
    e
}

#[test]
fn uniform_generator_is_uniform() {
    let ops = synth_trace(SynthKind::Uniform, 10_000, 128, 77).unwrap();
    let r = chi_square_uniform(&histogram(ops.iter().map(|o| o.addr), 128)).unwrap();
    assert!(r.p_value > SIGNIFICANCE, "{r:?}");
    let writes = ops.iter().filter(|o| o.seed.is_some()).count();
    assert!((4700..5300).contains(&writes));
}

#[test]
fn ehap_flushes_fewer_map_entries_than_fp() {
    let e = exp(PersistMode::Ehap, 1);
    let trace = e.load_trace().unwrap();
    let ehap = run_experiment(&e, &trace).unwrap();
    let fp = run_experiment(&exp(PersistMode::Fp, 1), &trace).unwrap();
    let map_writes = |s: &ehap_oram::experiment::RunStats| s.posmap_writes + s.posmap_tree_writes;
    assert!(map_writes(&ehap) < map_writes(&fp));
    assert!(ehap.posmap_entries_flushed < fp.posmap_entries_flushed);
}

#[test]
fn more_channels_never_slower() {
    let one = exp(PersistMode::Ehap, 1);
    let trace = one.load_trace().unwrap();
    let e1 = run_experiment(&one, &trace).unwrap().elapsed;
    let e2 = run_experiment(&exp(PersistMode::Ehap, 2), &trace).unwrap().elapsed;
    let e4 = run_experiment(&exp(PersistMode::Ehap, 4), &trace).unwrap().elapsed;
    assert!(e2 <= e1 && e4 <= e2, "{e1} {e2} {e4}");
}

#[test]
fn recursive_ehap_writes_more_than_recursive_baseline() {
    let e = exp(PersistMode::Baseline, 1);
    let trace = e.load_trace().unwrap();
    let rows = compare_designs(&e, &trace).unwrap();
    let w = |m: PersistMode| rows.iter().find(|r| r.stats.mode == m.name()).unwrap().stats.nvm_writes;
    assert!(w(PersistMode::RcrEhap) > w(PersistMode::RcrBaseline));
}

#[test]
fn multichannel_comparison_reports_both_normalizations() {
    let e = exp(PersistMode::Baseline, 2);
    let trace = synth_trace(SynthKind::Uniform, 2000, 128, 3).unwrap();
    let rows = compare_designs(&e, &trace).unwrap();
    assert_eq!(rows[0].norm_elapsed, 1.0);
    assert!(rows[0].norm_elapsed_1ch < 1.0);
    for r in &rows {
        assert!(r.norm_reads > 0.0 && r.norm_writes > 0.0 && r.norm_elapsed > 0.0);
        assert_eq!(r.stats.channels, 2);
    }
}

fn ehap_cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ehap")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap())
}

#[test]
fn cli_run_is_deterministic_and_honours_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("exp.conf");
    std::fs::write(&conf, "mode = fp\nlevels = 4\nops = 200\nseed = 9\n").unwrap();
    let conf = conf.to_str().unwrap();
    let (code, a) = ehap_cli(&["run", "--config", conf]);
    assert_eq!(code, 0);
    let (_, b) = ehap_cli(&["run", "--config", conf]);
    assert_eq!(a, b);
    let row: Vec<&str> = a.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[3], row[8]), ("fp", "4", "200"));
    let (_, c) = ehap_cli(&["run", "--config", conf, "--mode", "ehap"]);
    assert!(c.lines().nth(1).unwrap().starts_with("ehap,"));

    let csv = dir.path().join("out.csv");
    let (code, _) = ehap_cli(&["compare", "--levels", "4", "--ops", "100", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 7);
}

#[test]
fn cli_exit_codes() {
    let (code, out) = ehap_cli(&["crashsuite", "--mode", "ehap", "--levels", "3", "--ops", "10"]);
    assert_eq!(code, 0, "{out}");
    let (code, _) = ehap_cli(&["crashsuite", "--mode", "baseline", "--levels", "3", "--ops", "10"]);
    assert_eq!(code, 1);
    let (code, _) = ehap_cli(&["run", "--mode", "fp", "--posmap", "oblivious"]);
    assert_eq!(code, 2);
    let (code, _) = ehap_cli(&["run", "--trace", "/nonexistent/trace"]);
    assert_eq!(code, 2);
    let (code, text) = ehap_cli(&["synth", "--trace", "sequential", "--ops", "3", "--levels", "2"]);
    assert_eq!(code, 0);
    assert_eq!(text.lines().map(|l| l.split(' ').nth(1).unwrap()).collect::<Vec<_>>(), ["0", "1", "2"]);
}
