//! `groundcheck`: joint task-performance and phrase-grounding evaluation.
//!
//! Exit codes: 0 on success, 1 on a pipeline error (reported as one
//! `groundcheck: error: <kind>: <message>` line on stderr), 2 on a usage
//! error.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::{Map, Value};

use commands::*;

#[derive(Debug, Parser)]
#[command(
    name = "groundcheck",
    version,
    about = "Joint task-performance and phrase-grounding evaluation",
    term_width = 100,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Seed for every random choice of the run [fallback: $GROUNDCHECK_SEED]
    #[arg(long, global = true, value_name = "N", help_heading = "Global options")]
    seed: Option<u64>,
    /// Worker threads for per-example stages; 1 is bit-reproducible [default: 1]
    #[arg(long, global = true, value_name = "N", help_heading = "Global options")]
    jobs: Option<usize>,
    /// JSON object of flag values keyed by long flag name; flags win
    #[arg(long, global = true, value_name = "FILE", help_heading = "Global options")]
    config: Option<PathBuf>,
    /// Log progress to stderr (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count, help_heading = "Global options")]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write gold segmentation maps (task and phrase) for every example
    GoldMaps(GoldMapsArgs),
    /// Build reference games from caption-image similarity scores
    BuildGames(BuildGamesArgs),
    /// Crop pointing examples to a row window and remap coordinates
    Crop(CropArgs),
    /// Generate a synthetic world: examples, annotations and features
    Synth(SynthArgs),
    /// Simulate predictions of given grounding fidelity on a synthetic world
    Simulate(SimulateArgs),
    /// Score predictions against examples and write a metric report
    Eval(EvalArgs),
    /// Correlation between per-example task success and grounding
    Correlate(CorrelateArgs),
    /// Choose the map threshold that maximizes mean-IoU
    Calibrate(CalibrateArgs),
    /// Fine-tune the grounding head on a synthetic world
    TrainHead(TrainHeadArgs),
    /// Train a linear probe on frozen head stage maps
    TrainProbe(TrainProbeArgs),
    /// Data-efficiency sweep over annotation fractions
    Sweep(SweepArgs),
    /// Render a metric CSV as an SVG line chart
    Plot(PlotArgs),
}

/// A failed run: `kind` is a short stable identifier.
#[derive(Debug)]
pub struct Failure {
    pub kind: String,
    pub msg: String,
    pub usage: bool,
}

impl Failure {
    pub fn new(kind: &str, msg: String) -> Self {
        Failure {
            kind: kind.into(),
            msg,
            usage: false,
        }
    }

    pub fn usage(msg: String) -> Self {
        Failure {
            kind: "usage".into(),
            msg,
            usage: true,
        }
    }
}

impl From<groundcheck::Error> for Failure {
    fn from(e: groundcheck::Error) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut file = match &cli.global.config {
        Some(p) => config::read_config(p)?,
        None => Map::new(),
    };
    let seed_entry: Option<Value> = file.remove("seed");
    let jobs_entry: Option<Value> = file.remove("jobs");
    let ctx = Ctx {
        seed: config::resolve_seed(cli.global.seed, seed_entry.as_ref())?,
        jobs: groundcheck::par::Jobs::new(config::resolve_jobs(cli.global.jobs, jobs_entry.as_ref())?),
    };
    macro_rules! dispatch {
        ($args:expr, $f:ident) => {
            $f(&config::merge(&$args, file)?, &ctx)
        };
    }
    match cli.command {
        Command::GoldMaps(a) => dispatch!(a, gold_maps),
        Command::BuildGames(a) => dispatch!(a, build_games),
        Command::Crop(a) => dispatch!(a, crop),
        Command::Synth(a) => dispatch!(a, synth),
        Command::Simulate(a) => dispatch!(a, simulate),
        Command::Eval(a) => dispatch!(a, eval),
        Command::Correlate(a) => dispatch!(a, correlate),
        Command::Calibrate(a) => dispatch!(a, calibrate),
        Command::TrainHead(a) => dispatch!(a, train_head),
        Command::TrainProbe(a) => dispatch!(a, train_probe),
        Command::Sweep(a) => dispatch!(a, sweep),
        Command::Plot(a) => dispatch!(a, plot),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.msg.replace(['\n', '\r'], " ");
            eprintln!("groundcheck: error: {}: {msg}", f.kind);
            ExitCode::from(if f.usage { 2 } else { 1 })
        }
    }
}
