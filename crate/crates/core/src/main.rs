//! Command-line front end: run a scenario, validate one, or dump a
//! rendered RGB-D frame pair for perception debugging.
//!
//! Exit codes: 0 = run completed (Done), 2 = scenario validation
//! failure, 3 = solver abort, 4 = simulated-time budget exhausted,
//! 1 = any other error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dualharv::perception::render::render_synthetic_frame;
use dualharv::scenario::Scenario;
use dualharv::sim::{self, RunOutcome, SimError};

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER_ABORT: u8 = 3;
const EXIT_TIMEOUT: u8 = 4;

#[derive(Parser)]
#[command(name = "dualharv", about = "Dual-arm fruit harvesting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and export step CSV, event log and summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the control period (s).
        #[arg(long)]
        dt: Option<f64>,
        /// Override the simulated-time budget (s).
        #[arg(long)]
        max_time: Option<f64>,
        /// Override the random seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario file and report the first problem found.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Render one synthetic frame of the scenario's initial scene.
    Render {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        frame: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<Scenario, u8> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_VALIDATION
    })
}

fn cmd_run(
    scenario: &PathBuf,
    out: &PathBuf,
    dt: Option<f64>,
    max_time: Option<f64>,
    seed: Option<u64>,
) -> u8 {
    let mut s = match load(scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Some(dt) = dt {
        s.sim.dt = dt;
    }
    if let Some(mt) = max_time {
        s.sim.max_time = mt;
    }
    if let Some(seed) = seed {
        s.sim.seed = seed;
    }
    if let Err(e) = s.validate() {
        eprintln!("error: {e}");
        return EXIT_VALIDATION;
    }

    let log = match sim::run(&s) {
        Ok(log) => log,
        Err(e @ SimError::NonFiniteCommand { .. }) => {
            eprintln!("error: {e}");
            return EXIT_SOLVER_ABORT;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    if let Err(e) = sim::export(&log, out) {
        eprintln!("error: {e}");
        return EXIT_ERROR;
    }
    println!(
        "outcome: {:?}; harvested {:?}; blacklisted {:?}; {} steps; exports in {}",
        log.outcome,
        log.harvested,
        log.blacklisted,
        log.records.len(),
        out.display()
    );
    match log.outcome {
        RunOutcome::Done => EXIT_OK,
        RunOutcome::Timeout if log.solver_aborts > 0 => EXIT_SOLVER_ABORT,
        RunOutcome::Timeout => EXIT_TIMEOUT,
    }
}

fn cmd_validate(scenario: &PathBuf) -> u8 {
    match load(scenario) {
        Ok(_) => {
            println!("ok");
            EXIT_OK
        }
        Err(code) => code,
    }
}

fn cmd_render(scenario: &PathBuf, frame: u64, out: &PathBuf) -> u8 {
    let s = match load(scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let rendered = render_synthetic_frame(&s.scene, &s.camera, frame);
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: {e}");
        return EXIT_ERROR;
    }
    if let Err(e) = dualharv::perception::io::save_frame(out, &rendered.frame) {
        eprintln!("error: {e}");
        return EXIT_ERROR;
    }
    println!(
        "frame {frame}: {} detections; pair written to {}",
        rendered.detections.len(),
        out.display()
    );
    EXIT_OK
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run {
            scenario,
            out,
            dt,
            max_time,
            seed,
        } => cmd_run(scenario, out, *dt, *max_time, *seed),
        Command::Validate { scenario } => cmd_validate(scenario),
        Command::Render {
            scenario,
            frame,
            out,
        } => cmd_render(scenario, *frame, out),
    };
    ExitCode::from(code)
}
