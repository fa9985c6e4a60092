//! The subcommand implementations. Each returns the process exit code on
//! success (0, or 3 for a best-effort result that did not converge) and a
//! [`CliError`] for input problems (exit 2) or hard numerical failures
//! (exit 3).

use crate::config::{DriveSection, PopulationKind, RunConfig, SpinSystemSection};
use crate::io;
use crate::CliError;
use endor_core::calibration::{
    fit_esr_peaks, fit_nmr_peaks, recursive_calibration, noise_estimate, CalibrationResult,
    EsrConstraint, Literature,
};
use endor_core::dataset::{synthesize_dataset, DatasetConfig};
use endor_core::lineshapes::{
    add_noise, apply_transfer, synth_endor_spectrum, synth_esr_spectrum, EndorObservable,
    EndorSynthesis, PopulationSource, Spectrum, TransferTable,
};
use endor_core::spinmodel::{
    diagonalize, esr_frequencies, field_sweep, transition_catalog, Channel, FieldConfig,
    DEFAULT_WEIGHT_FLOOR,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn core_err(e: endor_core::Error) -> CliError {
    match e {
        endor_core::Error::NoConvergence(m) => CliError::NonConvergence(m),
        other => CliError::Input(other.to_string()),
    }
}

fn resolve_out(cfg: &RunConfig, explicit: Option<&Path>, default_name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => cfg.output_dir.join(default_name),
    }
}

fn load_transfer(cfg: &RunConfig) -> Result<Option<TransferTable>, CliError> {
    match &cfg.transfer_table {
        None => Ok(None),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Input(format!(
                    "cannot read transfer table {}: {e}",
                    path.display()
                ))
            })?;
            TransferTable::from_csv_str(&text)
                .map(Some)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
        }
    }
}

/// Junction voltage → drive rate: the configured conversion factor applied
/// to the voltage actually delivered at `f_mhz` (attenuated by the transfer
/// table when one is configured).
fn drive_rate(
    drive: &DriveSection,
    table: Option<&TransferTable>,
    v_mv: f64,
    f_mhz: f64,
) -> f64 {
    if drive.rate_per_s_per_mv == 0.0 || v_mv == 0.0 {
        return 0.0;
    }
    let delivered = match table {
        Some(t) => apply_transfer(v_mv, f_mhz, t),
        None => v_mv,
    };
    drive.rate_per_s_per_mv * delivered
}

fn parse_channel(s: &str) -> Result<Channel, CliError> {
    s.parse::<Channel>().map_err(core_err)
}

/// Strictly ascending grid from `start` to at least `stop` in steps of
/// `step` (the last point may overshoot `stop` by less than one step).
fn ascending_grid(start: f64, stop: f64, step: f64, what: &str) -> Result<Vec<f64>, CliError> {
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) {
        return Err(CliError::Input(format!("{what}: grid bounds must be finite")));
    }
    if start >= stop {
        return Err(CliError::Input(format!(
            "{what}: start {start} must be below end {stop}"
        )));
    }
    if !(step > 0.0) {
        return Err(CliError::Input(format!("{what}: step {step} must be positive")));
    }
    let n = ((stop - start) / step).round().max(1.0) as usize;
    Ok((0..=n).map(|k| start + step * k as f64).collect())
}

fn with_b_z(field: &FieldConfig, b_z: Option<f64>) -> FieldConfig {
    match b_z {
        Some(b) => field.with_b_z(b),
        None => field.clone(),
    }
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

pub fn predict(
    cfg: &RunConfig,
    channel: &str,
    b_z: Option<f64>,
    weight_floor: Option<f64>,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    let channel = parse_channel(channel)?;
    let floor = weight_floor.unwrap_or(DEFAULT_WEIGHT_FLOOR);
    if !floor.is_finite() || floor < 0.0 {
        return Err(CliError::Input(format!(
            "weight floor {floor} must be finite and nonnegative"
        )));
    }
    let sys = cfg.spin_system.to_core()?;
    let field = with_b_z(&cfg.field.to_core()?, b_z);
    let sol = diagonalize(&sys, &field).map_err(core_err)?;
    let lines = transition_catalog(&sol, channel, floor).map_err(core_err)?;

    let channel_name = format!("{channel:?}").to_lowercase();
    let meta = vec![
        ("channel".to_string(), channel_name.clone()),
        ("b_z_tesla".to_string(), field.b_ext[2].to_string()),
        ("b_tip_tesla".to_string(), field.b_tip.to_string()),
        ("phi_rad".to_string(), field.phi.to_string()),
        ("weight_floor".to_string(), floor.to_string()),
    ];
    let path = resolve_out(cfg, output, &format!("lines_{channel_name}.csv"));
    io::write_lines_csv(&path, &meta, &lines)?;

    for l in lines.iter().take(20) {
        println!(
            "{:>10}  {:12.4} MHz  (weight {:.3e})",
            l.label.as_deref().unwrap_or("-"),
            l.frequency,
            l.weight
        );
    }
    if lines.len() > 20 {
        println!("... and {} more", lines.len() - 20);
    }
    println!("wrote {} lines to {}", lines.len(), path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn sweep(
    cfg: &RunConfig,
    b_start: f64,
    b_end: f64,
    steps: usize,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    if !(b_start.is_finite() && b_end.is_finite()) || b_start >= b_end {
        return Err(CliError::Input(format!(
            "field range [{b_start}, {b_end}] T must be finite and ascending"
        )));
    }
    if steps < 2 {
        return Err(CliError::Input(format!(
            "steps = {steps}; a sweep needs at least 2 field points"
        )));
    }
    let sys = cfg.spin_system.to_core()?;
    let field = cfg.field.to_core()?;
    // Hit both endpoints exactly so a two-point sweep reproduces two
    // single-field predictions bit for bit.
    let grid: Vec<f64> = (0..steps)
        .map(|k| {
            if k == steps - 1 {
                b_end
            } else {
                b_start + (b_end - b_start) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let rows = field_sweep(&sys, &field, &grid).map_err(core_err)?;
    let path = resolve_out(cfg, output, "sweep.csv");
    io::write_sweep_csv(&path, &rows)?;
    println!(
        "wrote {} field points over [{b_start}, {b_end}] T to {}",
        rows.len(),
        path.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn population_source(cfg: &RunConfig) -> Result<PopulationSource, CliError> {
    Ok(match cfg.lineshape.esr_populations {
        PopulationKind::Boltzmann => PopulationSource::Boltzmann {
            beta: cfg.lineshape.esr_boltzmann_beta,
        },
        PopulationKind::Pumped => {
            PopulationSource::Pumped(cfg.pump.to_core(&cfg.spin_system)?)
        }
    })
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_esr(
    cfg: &RunConfig,
    f_start: Option<f64>,
    f_end: Option<f64>,
    step: Option<f64>,
    b_z: Option<f64>,
    noise_sigma: Option<f64>,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    let sys = cfg.spin_system.to_core()?;
    let field = with_b_z(&cfg.field.to_core()?, b_z);
    let lines = esr_frequencies(&sys, &field).map_err(core_err)?;
    let lo = lines.first().map(|l| l.frequency).unwrap_or(0.0);
    let hi = lines.last().map(|l| l.frequency).unwrap_or(0.0);
    let grid = ascending_grid(
        f_start.unwrap_or(lo - 150.0),
        f_end.unwrap_or(hi + 150.0),
        step.unwrap_or(1.0),
        "frequency grid",
    )?;

    let mut populations = population_source(cfg)?;
    let table = load_transfer(cfg)?;
    if let PopulationSource::Pumped(pump) = &mut populations {
        // The drive conversion is evaluated once, at the multiplet centre.
        pump.omega_esr += drive_rate(&cfg.drive, table.as_ref(), cfg.drive.v_esr_mv, 0.5 * (lo + hi));
    }
    let synth = cfg.lineshape.esr_synthesis();
    let mut spec =
        synth_esr_spectrum(&sys, &field, &populations, &synth, &grid).map_err(core_err)?;
    spec.meta.insert("kind".to_string(), "esr".to_string());
    if let Some(sigma) = noise_sigma {
        spec = add_noise(&spec, sigma, cfg.seed).map_err(core_err)?;
    }
    let path = resolve_out(cfg, output, "esr.csv");
    io::write_spectrum(&path, &spec)?;
    println!("wrote {} points to {}", spec.len(), path.display());
    Ok(0)
}

fn endor_pump_for(
    cfg: &RunConfig,
    table: Option<&TransferTable>,
    f_esr: f64,
    f_nmr_center: f64,
) -> Result<endor_core::pumping::PumpConfig, CliError> {
    let mut pump = cfg.pump.to_core(&cfg.spin_system)?;
    pump.omega_esr += drive_rate(&cfg.drive, table, cfg.drive.v_esr_mv, f_esr);
    pump.omega_nmr += drive_rate(&cfg.drive, table, cfg.drive.v_nmr_mv, f_nmr_center);
    Ok(pump)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_endor(
    cfg: &RunConfig,
    f_esr: Option<f64>,
    f_start: f64,
    f_end: f64,
    step: f64,
    b_z: Option<f64>,
    pair_difference: bool,
    off_resonant: bool,
    noise_sigma: Option<f64>,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    let sys = cfg.spin_system.to_core()?;
    let field = with_b_z(&cfg.field.to_core()?, b_z);
    let f_esr = match f_esr {
        Some(f) => f,
        None => {
            let lines = esr_frequencies(&sys, &field).map_err(core_err)?;
            lines
                .first()
                .map(|l| l.frequency)
                .ok_or_else(|| CliError::Input("no electron line to read out on".to_string()))?
        }
    };
    let grid = ascending_grid(f_start, f_end, step, "radio-frequency grid")?;
    let table = load_transfer(cfg)?;
    let pump = endor_pump_for(cfg, table.as_ref(), f_esr, 0.5 * (f_start + f_end))?;
    let synth = EndorSynthesis {
        esr_fwhm: cfg.lineshape.esr_fwhm_mhz,
        nmr_fwhm: cfg.lineshape.nmr_fwhm_mhz,
        off_resonant,
        observable: if pair_difference {
            EndorObservable::PairDifference
        } else {
            EndorObservable::SublevelMarginal
        },
    };
    let mut spec =
        synth_endor_spectrum(&sys, &field, f_esr, &grid, &pump, &synth).map_err(core_err)?;
    spec.meta.insert("kind".to_string(), "endor".to_string());
    if let Some(sigma) = noise_sigma {
        spec = add_noise(&spec, sigma, cfg.seed).map_err(core_err)?;
    }
    let path = resolve_out(cfg, output, "endor.csv");
    io::write_spectrum(&path, &spec)?;
    println!(
        "wrote {} points (readout at {f_esr} MHz) to {}",
        spec.len(),
        path.display()
    );
    Ok(0)
}

/// Insert `suffix` before the extension of `path`.
fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_endor_map(
    cfg: &RunConfig,
    esr_window: (Option<f64>, Option<f64>, Option<f64>),
    nmr_window: (Option<f64>, Option<f64>, Option<f64>),
    b_z: Option<f64>,
    pair_difference: bool,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    let sys = cfg.spin_system.to_core()?;
    let field = with_b_z(&cfg.field.to_core()?, b_z);
    let lines = esr_frequencies(&sys, &field).map_err(core_err)?;
    if lines.is_empty() {
        return Err(CliError::Input("no electron lines to map".to_string()));
    }
    // Default readout span: the first three electron lines (or all of them
    // when fewer exist), padded by one default linewidth margin.
    let third = lines.get(2).unwrap_or(&lines[lines.len() - 1]).frequency;
    let esr_grid = ascending_grid(
        esr_window.0.unwrap_or(lines[0].frequency - 15.0),
        esr_window.1.unwrap_or(third + 15.0),
        esr_window.2.unwrap_or(2.0),
        "electron readout grid",
    )?;
    let nmr_grid = ascending_grid(
        nmr_window.0.unwrap_or(20.0),
        nmr_window.1.unwrap_or(130.0),
        nmr_window.2.unwrap_or(0.5),
        "radio-frequency grid",
    )?;
    let table = load_transfer(cfg)?;
    let f_nmr_center = 0.5 * (nmr_grid[0] + nmr_grid[nmr_grid.len() - 1]);

    // data[row = f_nmr][column = f_esr]
    let mut data = vec![vec![0.0f64; esr_grid.len()]; nmr_grid.len()];
    for (j, &f_esr) in esr_grid.iter().enumerate() {
        let detuning = lines
            .iter()
            .map(|l| (l.frequency - f_esr).abs())
            .fold(f64::INFINITY, f64::min);
        let synth = EndorSynthesis {
            esr_fwhm: cfg.lineshape.esr_fwhm_mhz,
            nmr_fwhm: cfg.lineshape.nmr_fwhm_mhz,
            // Columns detuned from every line report the undriven baseline.
            off_resonant: detuning > 5.0 * cfg.lineshape.esr_fwhm_mhz,
            observable: if pair_difference {
                EndorObservable::PairDifference
            } else {
                EndorObservable::SublevelMarginal
            },
        };
        let pump = endor_pump_for(cfg, table.as_ref(), f_esr, f_nmr_center)?;
        let spec =
            synth_endor_spectrum(&sys, &field, f_esr, &nmr_grid, &pump, &synth).map_err(core_err)?;
        for (i, y) in spec.signal.iter().enumerate() {
            data[i][j] = *y;
        }
    }

    let path = resolve_out(cfg, output, "endor_map.csv");
    io::write_map_csv(&path, "f_nmr_MHz\\f_esr_MHz", &nmr_grid, &esr_grid, &data)?;

    // Column-mean-subtracted variant: removes the per-readout baseline so
    // the drive-induced dips stand out.
    let mut colsub = data.clone();
    for j in 0..esr_grid.len() {
        let mean: f64 =
            colsub.iter().map(|row| row[j]).sum::<f64>() / nmr_grid.len() as f64;
        for row in colsub.iter_mut() {
            row[j] -= mean;
        }
    }
    let sub_path = sibling_with_suffix(&path, "_colsub");
    io::write_map_csv(
        &sub_path,
        "f_nmr_MHz\\f_esr_MHz",
        &nmr_grid,
        &esr_grid,
        &colsub,
    )?;

    println!(
        "wrote {} x {} map to {} (column-mean-subtracted: {})",
        nmr_grid.len(),
        esr_grid.len(),
        path.display(),
        sub_path.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PeakRow {
    label: Option<String>,
    center_mhz: f64,
    center_sigma_mhz: Option<f64>,
    amplitude: f64,
    width_mhz: f64,
    asymmetry_q: Option<f64>,
}

#[derive(Serialize)]
struct FitReport {
    command: String,
    input: String,
    b_z_tesla: Option<f64>,
    n_peaks: usize,
    constraint: Option<String>,
    converged: bool,
    center_f0_mhz: Option<f64>,
    f0_sigma_mhz: Option<f64>,
    mean_spacing_mhz: Option<f64>,
    peaks: Vec<PeakRow>,
    background_offset: f64,
    background_slope_per_mhz: f64,
    residual_norm: f64,
    rms_residual_per_point: f64,
    noise_estimate: f64,
    warning: Option<String>,
}

/// Flag a structurally wrong model: residual per point far above the noise
/// floor usually means the peak count is off.
fn misfit_warning(spec: &Spectrum, residual_norm: f64) -> (f64, f64, Option<String>) {
    let rms = residual_norm / (spec.len() as f64).sqrt();
    let noise = noise_estimate(spec);
    let warning = if noise > 0.0 && rms > 3.0 * noise {
        Some(format!(
            "residual per point ({rms:.3e}) exceeds 3x the noise estimate ({noise:.3e}); \
             the peak count or model may not match the data"
        ))
    } else {
        None
    };
    (rms, noise, warning)
}

pub fn fit_esr(
    cfg: &RunConfig,
    input: &Path,
    n_peaks: Option<usize>,
    free: bool,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    let spec = io::read_spectrum(input)?;
    let sys = cfg.spin_system.to_core()?;
    let n = n_peaks.unwrap_or_else(|| sys.i_nuclear.multiplicity().max(1));
    let constraint = if free {
        EsrConstraint::Free
    } else {
        EsrConstraint::EqualSpacingBoltzmann
    };
    let set = fit_esr_peaks(&spec, n, constraint).map_err(core_err)?;
    let (rms, noise, warning) = misfit_warning(&spec, set.fit_quality);

    let report = FitReport {
        command: "fit esr".to_string(),
        input: input.display().to_string(),
        b_z_tesla: spec.meta_f64("b_z"),
        n_peaks: n,
        constraint: Some(if free { "free" } else { "equal-spacing" }.to_string()),
        converged: set.converged,
        center_f0_mhz: Some(set.center_f0),
        f0_sigma_mhz: Some(set.f0_sigma),
        mean_spacing_mhz: Some(set.spacing),
        peaks: set
            .fano_params
            .iter()
            .map(|p| PeakRow {
                label: None,
                center_mhz: p.center,
                center_sigma_mhz: None,
                amplitude: p.amplitude,
                width_mhz: p.width,
                asymmetry_q: Some(p.asymmetry_q),
            })
            .collect(),
        background_offset: set.background.offset,
        background_slope_per_mhz: set.background.slope,
        residual_norm: set.fit_quality,
        rms_residual_per_point: rms,
        noise_estimate: noise,
        warning: warning.clone(),
    };
    let path = resolve_out(cfg, output, "fit_esr.json");
    io::write_json(&path, &report)?;
    if let Some(w) = &warning {
        eprintln!("warning: {w}");
    }
    println!(
        "fit {} lines (converged: {}), pattern centre {:.3} MHz, spacing {:.3} MHz -> {}",
        n,
        set.converged,
        set.center_f0,
        set.spacing,
        path.display()
    );
    Ok(if set.converged { 0 } else { 3 })
}

pub fn fit_nmr(
    cfg: &RunConfig,
    input: &Path,
    n_peaks: usize,
    no_model: bool,
    output: Option<&Path>,
) -> Result<i32, CliError> {
    let spec = io::read_spectrum(input)?;
    let sys = cfg.spin_system.to_core()?;
    let field = cfg.field.to_core()?;
    let field = match spec.meta_f64("b_z") {
        Some(b) => field.with_b_z(b),
        None => field,
    };
    let model = if no_model { None } else { Some((&sys, &field)) };
    let set = fit_nmr_peaks(&spec, n_peaks, model).map_err(core_err)?;
    let (rms, noise, warning) = misfit_warning(&spec, set.fit_quality);

    let report = FitReport {
        command: "fit nmr".to_string(),
        input: input.display().to_string(),
        b_z_tesla: spec.meta_f64("b_z"),
        n_peaks,
        constraint: None,
        converged: set.converged,
        center_f0_mhz: None,
        f0_sigma_mhz: None,
        mean_spacing_mhz: None,
        peaks: set
            .lorentzian_params
            .iter()
            .enumerate()
            .map(|(k, p)| PeakRow {
                label: set.labels.get(k).cloned(),
                center_mhz: p.center,
                center_sigma_mhz: set.uncertainties.get(k).copied(),
                amplitude: p.amplitude,
                width_mhz: p.fwhm,
                asymmetry_q: None,
            })
            .collect(),
        background_offset: set.background.offset,
        background_slope_per_mhz: set.background.slope,
        residual_norm: set.fit_quality,
        rms_residual_per_point: rms,
        noise_estimate: noise,
        warning: warning.clone(),
    };
    let path = resolve_out(cfg, output, "fit_nmr.json");
    io::write_json(&path, &report)?;
    if let Some(w) = &warning {
        eprintln!("warning: {w}");
    }
    for (label, p) in set.labels.iter().zip(&set.lorentzian_params) {
        println!("{:>8}  {:10.4} MHz", label, p.center);
    }
    println!(
        "fit {} lines (converged: {}) -> {}",
        n_peaks,
        set.converged,
        path.display()
    );
    Ok(if set.converged { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct LiteratureReport {
    a_z_init_mhz: f64,
    kappa_init_mhz: f64,
    g_n: f64,
    i_nuclear: f64,
}

#[derive(Serialize)]
struct CalibrationReport {
    esr_files: Vec<String>,
    nmr_files: Vec<String>,
    literature: LiteratureReport,
    result: CalibrationResult,
}

fn load_tagged(paths: &[PathBuf]) -> Result<Vec<Spectrum>, CliError> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let spec = io::read_spectrum(p)?;
        match spec.meta_f64("b_z") {
            Some(b) if b.is_finite() => {}
            _ => {
                return Err(CliError::Input(format!(
                    "{}: missing numeric b_z metadata (expected a `# b_z=<tesla>` header line)",
                    p.display()
                )));
            }
        }
        out.push(spec);
    }
    Ok(out)
}

/// Emit a config whose spin system and tip field carry the fitted values,
/// so a later run — including a repeat calibration — starts from them. The
/// nuclear g-factor keeps the literature prior: the slope-extracted value in
/// the report is a consistency diagnostic, not an adopted constant.
fn calibrated_config(cfg: &RunConfig, lit: &Literature, r: &CalibrationResult) -> RunConfig {
    let mut out = cfg.clone();
    out.spin_system.g_e[2] = r.g_e_z;
    out.spin_system.a_hyperfine_mhz = [0.1 * r.a_z, 0.1 * r.a_z, r.a_z];
    out.spin_system.kappa_mhz = r.kappa;
    out.spin_system.g_n = lit.g_n;
    out.field.b_tip_tesla = r.b_tip;
    out.field.phi_rad = r.phi;
    out
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    cfg: &RunConfig,
    esr: &[PathBuf],
    nmr: &[PathBuf],
    a_z_init: Option<f64>,
    kappa_init: Option<f64>,
    g_n: Option<f64>,
    report_path: Option<&Path>,
    emit_config: Option<&Path>,
) -> Result<i32, CliError> {
    if esr.is_empty() {
        return Err(CliError::Input(
            "calibrate needs at least one electron sweep (--esr)".to_string(),
        ));
    }
    let esr_specs = load_tagged(esr)?;
    let nmr_specs = load_tagged(nmr)?;

    let sys = cfg.spin_system.to_core()?;
    let lit = Literature {
        a_z_init: a_z_init.unwrap_or(cfg.spin_system.a_hyperfine_mhz[2]),
        kappa_init: kappa_init.unwrap_or(cfg.spin_system.kappa_mhz),
        g_n: g_n.unwrap_or(cfg.spin_system.g_n),
        i_nuclear: sys.i_nuclear,
    };

    let result = recursive_calibration(&esr_specs, &nmr_specs, &lit).map_err(core_err)?;

    let report = CalibrationReport {
        esr_files: esr.iter().map(|p| p.display().to_string()).collect(),
        nmr_files: nmr.iter().map(|p| p.display().to_string()).collect(),
        literature: LiteratureReport {
            a_z_init_mhz: lit.a_z_init,
            kappa_init_mhz: lit.kappa_init,
            g_n: lit.g_n,
            i_nuclear: lit.i_nuclear.value(),
        },
        result: result.clone(),
    };
    let rpath = resolve_out(cfg, report_path, "calibration.json");
    io::write_json(&rpath, &report)?;

    let cpath = resolve_out(cfg, emit_config, "calibrated.toml");
    let emitted = calibrated_config(cfg, &lit, &result);
    io::atomic_write(&cpath, emitted.to_toml_string()?.as_bytes())?;

    println!(
        "g_e_z   = {:.6} +/- {:.1e}",
        result.g_e_z, result.g_e_z_sigma
    );
    println!(
        "B_tip_z = {:.6} T +/- {:.1e}   (magnitude {:.6} T, tilt {:.4} rad)",
        result.b_tip_z, result.b_tip_z_sigma, result.b_tip, result.phi
    );
    println!("A_z     = {:.4} MHz +/- {:.1e}", result.a_z, result.a_z_sigma);
    println!(
        "kappa   = {:.4} MHz +/- {:.1e}   (per-level scale {:.4} MHz)",
        result.kappa, result.kappa_sigma, result.q_derived
    );
    println!("g_n     = {:.4} +/- {:.4} (field-slope diagnostic)", result.g_n, result.g_n_sigma);
    println!(
        "{} passes, converged: {}, partial: {} -> {} and {}",
        result.iterations,
        result.converged,
        result.partial,
        rpath.display(),
        cpath.display()
    );
    Ok(if result.converged && !result.partial { 0 } else { 3 })
}

// ---------------------------------------------------------------------------
// make-dataset
// ---------------------------------------------------------------------------

pub fn make_dataset(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    noise_free: bool,
    noise_frac: Option<f64>,
    seed: Option<u64>,
) -> Result<i32, CliError> {
    let mut ds_cfg = if noise_free {
        DatasetConfig::noise_free()
    } else {
        DatasetConfig::default()
    };
    if let Some(frac) = noise_frac {
        ds_cfg.noise_frac = frac;
    }
    ds_cfg.seed = seed.unwrap_or(cfg.seed);

    let dataset = synthesize_dataset(&ds_cfg).map_err(core_err)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("dataset"));

    let mut written: Vec<PathBuf> = Vec::new();
    for spec in &dataset.esr {
        let b = spec.meta_f64("b_z").unwrap_or(f64::NAN);
        let path = dir.join(format!("esr_{b:.3}T.csv"));
        io::write_spectrum(&path, spec)?;
        written.push(path);
    }
    for pair in dataset.endor.chunks(2) {
        for (w, spec) in pair.iter().enumerate() {
            let b = spec.meta_f64("b_z").unwrap_or(f64::NAN);
            let tag = if pair.len() == 2 && w == 0 { "low" } else { "high" };
            let path = dir.join(format!("endor_{b:.3}T_{tag}.csv"));
            io::write_spectrum(&path, spec)?;
            written.push(path);
        }
    }

    // Ground truth as a ready-to-use config.
    let mut truth = cfg.clone();
    truth.spin_system = SpinSystemSection::from_core(&dataset.truth_system);
    truth.field = crate::config::FieldSection::from_core(&dataset.truth_field);
    truth.seed = ds_cfg.seed;
    let truth_path = dir.join("truth.toml");
    io::atomic_write(&truth_path, truth.to_toml_string()?.as_bytes())?;
    written.push(truth_path);

    for p in &written {
        println!("{}", p.display());
    }
    println!(
        "wrote {} electron sweeps, {} double-resonance windows, and truth.toml to {}",
        dataset.esr.len(),
        dataset.endor.len(),
        dir.display()
    );
    Ok(0)
}
