//! `fiberload` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric or convergence error. Failures print a one-line JSON object
//! `{"error": {"category", "code", "message"}}` on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fiberload", version, about = "Cold-atom loading and in-fiber absorption spectroscopy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config, or the JSON config echo of an earlier result.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Species data file (overrides the config and FIBERLOAD_SPECIES).
    #[arg(long)]
    pub species: Option<PathBuf>,
    /// JSON result envelope; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV plot data.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte-Carlo loading of the fiber from the configured cloud.
    SimulateLoading {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        atoms: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Run the configured trap-depth sweep instead of a single depth.
        #[arg(long)]
        sweep: bool,
        /// Also simulate stroboscopic release and recapture.
        #[arg(long)]
        recapture: bool,
        /// Per-trajectory CSV dump.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Model transmission spectrum on the configured detuning grid.
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
    /// Poisson photon counts for the configured spectrum and probe sequence.
    ProbeCounts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit line ODs to a count spectrum (detuning_hz,counts[,n_gates]).
    FitOd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Atom number from a power trace (time_s,power_ref_W,power_atoms_W).
    AtomNumber {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Height above the tip where the FORT depth falls to a threshold.
    CaptureRange {
        #[command(flatten)]
        common: Common,
        /// Threshold energy in kelvin; defaults to the cloud temperature.
        #[arg(long = "threshold-K")]
        threshold_k: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SimulateLoading {
            common,
            atoms,
            seed,
            threads,
            sweep,
            recapture,
            trajectories,
        } => commands::simulate_loading(
            &common,
            commands::LoadingArgs {
                atoms,
                seed,
                threads,
                sweep,
                recapture,
                trajectories,
            },
        ),
        Command::Spectrum { common } => commands::spectrum(&common),
        Command::ProbeCounts { common, seed } => commands::probe_counts(&common, seed),
        Command::FitOd { common, data } => commands::fit_od(&common, &data),
        Command::AtomNumber { common, data } => commands::atom_number(&common, &data),
        Command::CaptureRange { common, threshold_k } => commands::capture_range(&common, threshold_k),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code())
        }
    }
}
