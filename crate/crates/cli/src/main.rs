//! `endor` — command-line front end for the spin-resonance engine.
//!
//! Exit codes are a stable scripting contract: 0 on success, 2 for input or
//! configuration errors, 3 when a numerical procedure does not converge
//! (a best-effort report is still written where one makes sense).

// Domain guards are written `!(x > 0.0)` on purpose: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod io;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, files, or configuration — exit 2.
    #[error("{0}")]
    Input(String),
    /// A numerical procedure failed to converge — exit 3.
    #[error("{0}")]
    NonConvergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::NonConvergence(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "endor",
    version,
    about = "Single-atom electron/nuclear spin-resonance toolkit: predict, simulate, fit, calibrate"
)]
struct Cli {
    /// Configuration file (TOML); falls back to $ENDOR_CONFIG, then to
    /// built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute labeled transition frequencies at the configured field
    Predict {
        /// Transition channel: esr, nmr, or all
        #[arg(long, default_value = "all")]
        channel: String,
        /// Override the external field's z-component, tesla
        #[arg(long)]
        b_z_tesla: Option<f64>,
        /// Drop lines whose drive weight is below this
        #[arg(long)]
        weight_floor: Option<f64>,
        /// Output CSV path (default: <output_dir>/lines_<channel>.csv)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Tabulate eigenvalues, transitions, and hybridization along a field range
    Sweep {
        #[arg(long)]
        b_start_tesla: f64,
        #[arg(long)]
        b_end_tesla: f64,
        /// Number of field points (>= 2)
        #[arg(long, default_value_t = 25)]
        steps: usize,
        /// Output CSV path (default: <output_dir>/sweep.csv)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Synthesize spectra
    Simulate {
        #[command(subcommand)]
        mode: SimulateCmd,
    },
    /// Fit line profiles to a measured spectrum
    Fit {
        #[command(subcommand)]
        kind: FitCmd,
    },
    /// Staged recovery of the spin-Hamiltonian parameters from spectra
    Calibrate {
        /// Electron sweep files (each needs a `# b_z=<tesla>` header)
        #[arg(long, num_args = 1.., required = true)]
        esr: Vec<PathBuf>,
        /// Double-resonance sweep files (each needs a `# b_z=<tesla>` header)
        #[arg(long, num_args = 1..)]
        nmr: Vec<PathBuf>,
        /// Starting axial hyperfine coupling, MHz (default: config value)
        #[arg(long)]
        a_z_init_mhz: Option<f64>,
        /// Starting quadrupole coupling, MHz (default: config value)
        #[arg(long)]
        kappa_init_mhz: Option<f64>,
        /// Nuclear g-factor prior (default: config value)
        #[arg(long)]
        g_n: Option<f64>,
        /// Report JSON path (default: <output_dir>/calibration.json)
        #[arg(long)]
        report: Option<PathBuf>,
        /// Fitted-parameter config path (default: <output_dir>/calibrated.toml)
        #[arg(long)]
        emit_config: Option<PathBuf>,
    },
    /// Generate the bundled synthetic measurement campaign
    MakeDataset {
        /// Output directory (default: <output_dir>/dataset)
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        /// Disable spectral noise
        #[arg(long)]
        noise_free: bool,
        /// Noise amplitude as a fraction of each sweep's signal range
        #[arg(long)]
        noise_frac: Option<f64>,
        /// Noise seed (default: config seed)
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum SimulateCmd {
    /// Electron-resonance sweep
    Esr {
        /// Grid start, MHz (default: 150 MHz below the first line)
        #[arg(long)]
        f_start_mhz: Option<f64>,
        /// Grid end, MHz (default: 150 MHz above the last line)
        #[arg(long)]
        f_end_mhz: Option<f64>,
        /// Grid step, MHz
        #[arg(long)]
        step_mhz: Option<f64>,
        /// Override the external field's z-component, tesla
        #[arg(long)]
        b_z_tesla: Option<f64>,
        /// Add seeded Gaussian noise of this absolute amplitude
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Output CSV path (default: <output_dir>/esr.csv)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Double-resonance sweep at a fixed electron readout
    Endor {
        /// Electron readout frequency, MHz (default: the lowest line)
        #[arg(long)]
        f_esr_mhz: Option<f64>,
        #[arg(long, default_value_t = 20.0)]
        f_start_mhz: f64,
        #[arg(long, default_value_t = 130.0)]
        f_end_mhz: f64,
        #[arg(long, default_value_t = 0.25)]
        step_mhz: f64,
        /// Override the external field's z-component, tesla
        #[arg(long)]
        b_z_tesla: Option<f64>,
        /// Report the pair population difference instead of the sublevel marginal
        #[arg(long)]
        pair_difference: bool,
        /// Force a detuned control scan (flat baseline)
        #[arg(long)]
        off_resonant: bool,
        /// Add seeded Gaussian noise of this absolute amplitude
        #[arg(long)]
        noise_sigma: Option<f64>,
        /// Output CSV path (default: <output_dir>/endor.csv)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// 2D map: radio frequency (rows) by electron readout (columns)
    EndorMap {
        /// Readout grid start, MHz (default: just below the first line)
        #[arg(long)]
        f_esr_start_mhz: Option<f64>,
        /// Readout grid end, MHz (default: just above the third line)
        #[arg(long)]
        f_esr_end_mhz: Option<f64>,
        #[arg(long)]
        f_esr_step_mhz: Option<f64>,
        #[arg(long)]
        f_nmr_start_mhz: Option<f64>,
        #[arg(long)]
        f_nmr_end_mhz: Option<f64>,
        #[arg(long)]
        f_nmr_step_mhz: Option<f64>,
        /// Override the external field's z-component, tesla
        #[arg(long)]
        b_z_tesla: Option<f64>,
        /// Report the pair population difference instead of the sublevel marginal
        #[arg(long)]
        pair_difference: bool,
        /// Output CSV base path; the column-mean-subtracted variant gains a
        /// `_colsub` suffix (default: <output_dir>/endor_map.csv)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FitCmd {
    /// Fit an electron multiplet (asymmetric lines over a linear background)
    Esr {
        #[arg(long, short = 'i')]
        input: PathBuf,
        /// Number of lines (default: 2I+1 from the config)
        #[arg(long)]
        n_peaks: Option<usize>,
        /// Release the equal-spacing / thermal-amplitude constraints
        #[arg(long)]
        free: bool,
        /// Report JSON path (default: <output_dir>/fit_esr.json)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Fit nuclear lines (Lorentzians over a linear background)
    Nmr {
        #[arg(long, short = 'i')]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        n_peaks: usize,
        /// Skip model-based line labeling
        #[arg(long)]
        no_model: bool,
        /// Report JSON path (default: <output_dir>/fit_nmr.json)
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Predict {
            channel,
            b_z_tesla,
            weight_floor,
            output,
        } => commands::predict(&cfg, &channel, b_z_tesla, weight_floor, output.as_deref()),
        Command::Sweep {
            b_start_tesla,
            b_end_tesla,
            steps,
            output,
        } => commands::sweep(&cfg, b_start_tesla, b_end_tesla, steps, output.as_deref()),
        Command::Simulate { mode } => match mode {
            SimulateCmd::Esr {
                f_start_mhz,
                f_end_mhz,
                step_mhz,
                b_z_tesla,
                noise_sigma,
                output,
            } => commands::simulate_esr(
                &cfg,
                f_start_mhz,
                f_end_mhz,
                step_mhz,
                b_z_tesla,
                noise_sigma,
                output.as_deref(),
            ),
            SimulateCmd::Endor {
                f_esr_mhz,
                f_start_mhz,
                f_end_mhz,
                step_mhz,
                b_z_tesla,
                pair_difference,
                off_resonant,
                noise_sigma,
                output,
            } => commands::simulate_endor(
                &cfg,
                f_esr_mhz,
                f_start_mhz,
                f_end_mhz,
                step_mhz,
                b_z_tesla,
                pair_difference,
                off_resonant,
                noise_sigma,
                output.as_deref(),
            ),
            SimulateCmd::EndorMap {
                f_esr_start_mhz,
                f_esr_end_mhz,
                f_esr_step_mhz,
                f_nmr_start_mhz,
                f_nmr_end_mhz,
                f_nmr_step_mhz,
                b_z_tesla,
                pair_difference,
                output,
            } => commands::simulate_endor_map(
                &cfg,
                (f_esr_start_mhz, f_esr_end_mhz, f_esr_step_mhz),
                (f_nmr_start_mhz, f_nmr_end_mhz, f_nmr_step_mhz),
                b_z_tesla,
                pair_difference,
                output.as_deref(),
            ),
        },
        Command::Fit { kind } => match kind {
            FitCmd::Esr {
                input,
                n_peaks,
                free,
                output,
            } => commands::fit_esr(&cfg, &input, n_peaks, free, output.as_deref()),
            FitCmd::Nmr {
                input,
                n_peaks,
                no_model,
                output,
            } => commands::fit_nmr(&cfg, &input, n_peaks, no_model, output.as_deref()),
        },
        Command::Calibrate {
            esr,
            nmr,
            a_z_init_mhz,
            kappa_init_mhz,
            g_n,
            report,
            emit_config,
        } => commands::calibrate(
            &cfg,
            &esr,
            &nmr,
            a_z_init_mhz,
            kappa_init_mhz,
            g_n,
            report.as_deref(),
            emit_config.as_deref(),
        ),
        Command::MakeDataset {
            out,
            noise_free,
            noise_frac,
            seed,
        } => commands::make_dataset(&cfg, out.as_deref(), noise_free, noise_frac, seed),
    }
}
