use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ehap_oram::crashlab::{self, CrashPoint, SuiteOptions};
use ehap_oram::experiment::{self, ExperimentConfig, TraceSource};
use ehap_oram::trace::format_trace;

#[derive(Parser)]
#[command(name = "ehap", version, about = "Crash-consistent Path ORAM simulator over modeled NVM")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one design over a trace and emit a CSV row.
    Run(Common),
    /// Run all six designs over the same trace with normalized columns.
    Compare(Common),
    /// Inject crashes and check recovery against the durability oracle.
    Crashsuite {
        #[command(flatten)]
        common: Common,
        /// Run only this checkpoint index.
        #[arg(long)]
        point: Option<u64>,
        /// Number of crash points to sample.
        #[arg(long)]
        sample: Option<usize>,
        /// Directory for image dumps and repro lines of failing points.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Also finish the trace after recovery and compare final contents.
        #[arg(long)]
        replay: bool,
    },
    /// Write a synthetic trace in text form.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    levels: Option<u32>,
    #[arg(long)]
    z: Option<usize>,
    #[arg(long)]
    stash: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trace file, or uniform | zipf:<s> | sequential | single-hot.
    #[arg(long)]
    trace: Option<String>,
    /// Length of a synthetic trace.
    #[arg(long)]
    ops: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// direct | oblivious | recursive
    #[arg(long)]
    posmap: Option<String>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl Common {
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut exp = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_kv(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("mode", self.mode.clone()),
            ("posmap", self.posmap.clone()),
            ("levels", self.levels.map(|v| v.to_string())),
            ("z", self.z.map(|v| v.to_string())),
            ("stash", self.stash.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("channels", self.channels.map(|v| v.to_string())),
            ("trace", self.trace.clone()),
            ("ops", self.ops.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                exp.set(k, &v).with_context(|| format!("--{k}"))?;
            }
        }
        if exp.channels == 0 {
            bail!("--channels must be at least 1");
        }
        exp.oram = exp.oram.clone().normalized()?;
        Ok(exp)
    }

    fn output(&self) -> anyhow::Result<Box<dyn Write>> {
        Ok(match &self.csv {
            Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn crashsuite(
    common: &Common,
    point: Option<u64>,
    sample: Option<usize>,
    artifacts: Option<PathBuf>,
    replay: bool,
) -> anyhow::Result<bool> {
    let exp = common.experiment()?;
    if exp.channels != 1 {
        bail!("the crash suite runs a single channel");
    }
    let cfg = exp.oram.clone();
    let trace = exp.load_trace()?;
    if let Some(index) = point {
        let clean = crashlab::clean_run(&cfg, &trace)?;
        let p: CrashPoint = *clean
            .points
            .get(index as usize)
            .with_context(|| format!("trace has {} crash points", clean.points.len()))?;
        let o = crashlab::run_with_crash(&cfg, &trace, &p, &clean, replay)?;
        println!(
            "point {} access {} {:?}: {} mismatches, atomic {:?}, replay {:?}, committed {} discarded {}{}",
            p.index,
            p.access,
            p.tag,
            o.mismatches.len(),
            o.atomic,
            o.replay_ok,
            o.disposition.rounds_committed,
            o.disposition.rounds_discarded,
            o.error.as_ref().map(|e| format!(", recovery error: {e}")).unwrap_or_default()
        );
        if !o.mismatches.is_empty() {
            println!("mismatched addresses: {:?}", o.mismatches);
        }
        return Ok(o.passed());
    }
    let opts = SuiteOptions {
        sample,
        sample_seed: exp.sample_seed,
        replay,
        tags: None,
        artifact_dir: artifacts,
        trace_name: match &exp.trace {
            TraceSource::Synth { count, .. } => format!("{} --ops {count}", exp.trace.name()),
            TraceSource::File(_) => exp.trace.name(),
        },
    };
    let r = crashlab::run_suite(&cfg, &trace, &opts)?;
    println!(
        "{}: {} of {} crash points exercised, {} passed, {} atomicity violations, {} recovery errors",
        cfg.mode,
        r.exercised,
        r.total_points,
        r.passed,
        r.atomicity_violations,
        r.recovery_errors
    );
    for f in r.failures.iter().take(10) {
        println!("  {}", crashlab::repro_line(&cfg, &opts.trace_name, &f.point));
    }
    Ok(r.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(c) => (|| {
            let exp = c.experiment()?;
            let stats = experiment::run_experiment(&exp, &exp.load_trace()?)?;
            experiment::write_csv(c.output()?, &[stats])?;
            Ok(true)
        })(),
        Cmd::Compare(c) => (|| {
            let exp = c.experiment()?;
            let rows = experiment::compare_designs(&exp, &exp.load_trace()?)?;
            experiment::write_comparison_csv(c.output()?, &rows)?;
            Ok(true)
        })(),
        Cmd::Crashsuite {
            common,
            point,
            sample,
            artifacts,
            replay,
        } => crashsuite(&common, point, sample, artifacts, replay),
        Cmd::Synth { common, out } => (|| {
            let exp = common.experiment()?;
            let text = format_trace(&exp.load_trace()?);
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => io::stdout().write_all(text.as_bytes())?,
            }
            Ok(true)
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
