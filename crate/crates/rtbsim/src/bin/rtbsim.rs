use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use rtbsim::harness::acceptance::{self, Options, Suite};
use rtbsim::harness::audit::audit;
use rtbsim::harness::experiment::{
    emit_csv, run_experiment, summarize, ExperimentError, ExperimentSpec, Point, RunMetrics,
};
use rtbsim::harness::workload::RunSpec;
use rtbsim::simnet::{trace, SimError};

#[derive(Parser)]
#[command(
    name = "rtbsim",
    version,
    about = "Seeded simulations of real-time Byzantine broadcast"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration for one or more seeds and audit each run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// First seed (default: the config's).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        runs: u64,
        /// Summary CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines trace of the first run.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        recovery: Option<Switch>,
    },
    /// Run an experiment sweep and write one CSV row per point and metric.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Runs per point (default: from the config file).
        #[arg(long)]
        runs: Option<u64>,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        recovery: Option<Switch>,
    },
    /// Run the acceptance criteria.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Runs per point for the sampled criteria.
        #[arg(long, default_value_t = 1000)]
        runs: u64,
        /// Randomized seeds for the consensus and atomic criteria.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Criteria to run, e.g. `--only 5,6,9`.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Parse {
        path: path.to_owned(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(
    config: &Path,
    seed: Option<u64>,
    runs: u64,
    out: Option<&Path>,
    trace_path: Option<&Path>,
    recovery: Option<Switch>,
) -> Result<bool, CliError> {
    let mut spec: RunSpec = load(config)?;
    if let Some(s) = seed {
        spec.config.seed = s;
    }
    if let Some(r) = recovery {
        spec.config.recovery = r.into();
    }
    let seed0 = spec.config.seed;
    let mut metrics = Vec::new();
    let mut clean = true;
    for k in 0..runs {
        let mut sc = spec.scenario();
        sc.config.seed = seed0 + k;
        let outcome = sc.run()?;
        let report = audit(&outcome, &sc.workload);
        if k == 0 {
            if let Some(p) = trace_path {
                let mut w = create(p)?;
                trace::write_jsonl(&outcome.records, &mut w)?;
                w.flush()?;
            }
        }
        for v in &report.violations {
            eprintln!("seed {}: {v}", sc.config.seed);
        }
        clean &= report.is_clean();
        let m = RunMetrics::from_outcome(&outcome, &report);
        println!(
            "seed={} hash={} deliveries={} passive={} active_at_end={} bytes={} violations={}",
            sc.config.seed,
            hex::encode(outcome.trace_hash),
            outcome.deliveries().count(),
            m.passive_incidents,
            outcome.active_correct_at_end(),
            outcome.stats.total_bytes(),
            m.violations
        );
        metrics.push(m);
    }
    if let Some(p) = out {
        let point = Point {
            config: spec.config.clone(),
            adversary: spec.adversary,
            payload_size: spec.payload_size,
        };
        let mut w = create(p)?;
        emit_csv(&summarize(&point, &metrics), &mut w)?;
        w.flush()?;
    }
    Ok(clean)
}

fn sweep(
    config: &Path,
    seed: Option<u64>,
    runs: Option<u64>,
    out: Option<&Path>,
    recovery: Option<Switch>,
) -> Result<bool, CliError> {
    let mut spec: ExperimentSpec = load(config)?;
    if let Some(s) = seed {
        spec.base.seed = s;
    }
    if let Some(r) = runs {
        spec.runs_per_point = r;
    }
    if let Some(r) = recovery {
        spec.base.recovery = r.into();
        spec.sweep.recovery.clear();
    }
    let (rows, violations) = run_experiment(&spec)?;
    match out {
        Some(p) => {
            let mut w = create(p)?;
            emit_csv(&rows, &mut w)?;
            w.flush()?;
        }
        None => emit_csv(&rows, io::stdout().lock())?,
    }
    if violations > 0 {
        eprintln!("{violations} audit violations");
    }
    Ok(violations == 0)
}

fn check(opts: Options, only: &[u8]) -> bool {
    let ids = if only.is_empty() {
        acceptance::ALL.to_vec()
    } else {
        only.to_vec()
    };
    let mut suite = Suite::new(opts);
    let reports = suite.run(&ids);
    for r in &reports {
        println!("{r}");
    }
    !reports.is_empty() && reports.iter().all(|r| r.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run {
            config,
            seed,
            runs,
            out,
            trace,
            recovery,
        } => run(
            &config,
            seed,
            runs,
            out.as_deref(),
            trace.as_deref(),
            recovery,
        ),
        Cmd::Sweep {
            config,
            seed,
            runs,
            out,
            recovery,
        } => sweep(&config, seed, runs, out.as_deref(), recovery),
        Cmd::Check {
            seed,
            runs,
            seeds,
            only,
        } => Ok(check(
            Options {
                runs,
                seeds,
                seed,
                ..Options::default()
            },
            &only,
        )),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
