//! `swf`: batch front end writing CSV tables and JSON traces, each with a run manifest.

mod commands;
mod io;

use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use commands::*;
use io::{manifest_path, write_json, CliError, CliResult, Manifest, Versions};

#[derive(Parser, Debug)]
#[command(name = "swf", version, about = "Wright-Fisher diffusions on random clocks")]
struct Cli {
    /// Manifest location (default: `<out>.manifest.json`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
enum Command {
    /// Laplace transform of the clock at the eigenvalues λ_n over a time grid.
    EigenDecay(EigenDecay),
    /// Transition draws from a point or from the initial law.
    SampleTransition(SampleTransition),
    /// Paths observed on a time grid.
    SimulatePath(SimulatePath),
    /// Dual mixture weights: the entrance law or a row from a start total.
    DualWeights(DualWeights),
    /// Trajectories of the dual death process.
    DualPath(DualPath),
    /// Filtering recursion for a subordinator clock.
    Filter(FilterArgs),
    /// Smoothing marginals for a subordinator clock.
    Smooth(FilterArgs),
    /// Filter for inverse and composed clocks by Monte Carlo over clock paths.
    NonmarkovFilter(NonMarkovArgs),
    /// Draws of the clock at the data times given the data.
    ClockPosterior(ClockPosterior),
    /// Synthetic multinomial observations of one simulated path.
    SynthData(SynthData),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::EigenDecay(_) => "eigen-decay",
            Command::SampleTransition(_) => "sample-transition",
            Command::SimulatePath(_) => "simulate-path",
            Command::DualWeights(_) => "dual-weights",
            Command::DualPath(_) => "dual-path",
            Command::Filter(_) => "filter",
            Command::Smooth(_) => "smooth",
            Command::NonmarkovFilter(_) => "nonmarkov-filter",
            Command::ClockPosterior(_) => "clock-posterior",
            Command::SynthData(_) => "synth-data",
        }
    }

    fn run(&self) -> CliResult<RunInfo> {
        match self {
            Command::EigenDecay(a) => eigen_decay(a),
            Command::SampleTransition(a) => sample_transition(a),
            Command::SimulatePath(a) => simulate_path(a),
            Command::DualWeights(a) => dual_weights(a),
            Command::DualPath(a) => dual_path(a),
            Command::Filter(a) => filter_cmd(a),
            Command::Smooth(a) => smooth_cmd(a),
            Command::NonmarkovFilter(a) => nonmarkov_cmd(a),
            Command::ClockPosterior(a) => clock_posterior(a),
            Command::SynthData(a) => synth_data(a),
        }
    }
}

fn fail(e: &CliError) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": e.kind(), "code": e.code(), "message": e.message() } });
    eprintln!("{body}");
    ExitCode::from(e.code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Config(e.to_string().trim_end().to_string())),
    };
    let started = Instant::now();
    let info = match cli.command.run() {
        Ok(i) => i,
        Err(e) => return fail(&e),
    };
    let Some(first) = info.outputs.first() else {
        return ExitCode::SUCCESS;
    };
    let manifest = Manifest {
        command: cli.command.name(),
        config: &cli.command,
        seed: info.seed,
        workers: info.workers,
        outputs: info.outputs.iter().map(|p| p.display().to_string()).collect(),
        versions: Versions::current(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let path = cli.manifest.clone().unwrap_or_else(|| manifest_path(first));
    match write_json(&path, &manifest) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
