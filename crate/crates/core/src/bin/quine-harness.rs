use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quine::harness::{
    run_fractal_experiment, run_pipelines_experiment, run_streaming_experiment, sibling_quine, ExperimentReport,
    HarnessConfig, LibrarySpec, PipelinesSpec, StreamSpec,
};

#[derive(Parser)]
#[command(name = "quine-harness", about = "Offline experiments over real quine process trees.")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    experiment: Experiment,
}

#[derive(Args)]
struct Common {
    /// Path of the quine executable (default: next to this program).
    #[arg(long, global = true)]
    quine: Option<PathBuf>,
    /// Working directory for libraries, scripts and traces.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Where to write the JSON report (default: <work-dir>/<experiment>-report.json).
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Wall-clock limit per root process, in seconds.
    #[arg(long, global = true, default_value_t = 60)]
    timeout_s: u64,
}

#[derive(Subcommand)]
enum Experiment {
    /// Recursive delegation over a hex/shelf/volume library.
    Fractal {
        #[arg(long, default_value_t = 10)]
        hexes: usize,
        #[arg(long, default_value_t = 3)]
        shelves: usize,
        #[arg(long, default_value_t = 4)]
        volumes: usize,
        #[arg(long, default_value_t = 10)]
        fanout: usize,
        /// Number of first-level workers that delegate again by shelf.
        #[arg(long, default_value_t = 2)]
        recurse: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Segment-per-turn streaming with periodic exec renewal.
    Streaming {
        #[arg(long, default_value_t = 9)]
        segments: usize,
        /// One-based position of the needle segment (default: last).
        #[arg(long)]
        needle: Option<usize>,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        renew_every: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Filter, chain and && compositions in /bin/sh.
    Pipelines {
        #[arg(long, default_value_t = 1000)]
        lines: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn run(cli: Cli) -> quine::Result<(ExperimentReport, PathBuf)> {
    let quine_bin = match cli.common.quine {
        Some(p) => p,
        None => sibling_quine()?,
    };
    let work_dir = match cli.common.work_dir {
        Some(d) => d,
        None => std::env::temp_dir().join(format!("quine-harness-{}", std::process::id())),
    };
    std::fs::create_dir_all(&work_dir)?;
    let mut cfg = HarnessConfig::new(quine_bin, &work_dir);
    cfg.timeout = std::time::Duration::from_secs(cli.common.timeout_s);

    let report = match cli.experiment {
        Experiment::Fractal {
            hexes,
            shelves,
            volumes,
            fanout,
            recurse,
            seed,
        } => ExperimentReport::Fractal(run_fractal_experiment(
            &LibrarySpec::new(hexes, shelves, volumes, seed),
            fanout,
            recurse,
            &cfg,
        )?),
        Experiment::Streaming {
            segments,
            needle,
            tokens,
            renew_every,
            seed,
        } => {
            let ordinal = needle.unwrap_or(segments);
            if ordinal == 0 {
                return Err(quine::Error::Usage("--needle is one-based".into()));
            }
            let mut spec = StreamSpec::new(segments, ordinal - 1, tokens);
            spec.seed = seed;
            ExperimentReport::Streaming(run_streaming_experiment(&spec, renew_every, &cfg)?)
        }
        Experiment::Pipelines { lines, seed } => {
            ExperimentReport::Pipelines(run_pipelines_experiment(&PipelinesSpec { lines, seed }, &cfg)?)
        }
    };
    let path = cli
        .common
        .report
        .unwrap_or_else(|| work_dir.join(format!("{}-report.json", report.name())));
    report.write_json(&path)?;
    Ok((report, path))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((report, path)) => {
            print!("{}", report.summary());
            println!("report: {}", path.display());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("quine-harness: {e}");
            ExitCode::from(2)
        }
    }
}
