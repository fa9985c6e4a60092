//! Bundled synthetic measurement campaign: full-model electron-resonance
//! and double-resonance sweeps with seeded noise over a ladder of external
//! fields. This is the dataset the calibration round-trip tests and the
//! `make-dataset` command both use, so the generator parameters double as
//! the ground truth those tests recover.

use crate::lineshapes::{
    add_noise, synth_endor_spectrum, synth_esr_spectrum, EndorObservable, EndorSynthesis,
    EsrSynthesis, LineShape, LinearBackground, PopulationSource, Spectrum,
};
use crate::numerics::HalfInt;
use crate::pumping::PumpConfig;
use crate::spinmodel::{
    diagonalize, esr_frequencies, find_line, hybridization_coefficient, transition_catalog,
    Channel, FieldConfig, SpinSystem,
};
use crate::{Error, Result};

/// Knobs of the synthetic campaign. Defaults reproduce the acceptance
/// dataset: seven electron sweeps over 0.2–1.4 T and, at the five upper
/// fields, two nuclear windows read out on the second electron line.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Fields (tesla) with an electron-resonance sweep.
    pub esr_fields_t: Vec<f64>,
    /// Fields (tesla) with the two double-resonance windows. Kept away
    /// from the weakest fields so adjacent-manifold lines stay separated
    /// by well over a linewidth.
    pub endor_fields_t: Vec<f64>,
    /// Thermal-like skew of the electron-sweep sublevel occupations.
    pub esr_beta: f64,
    pub esr_q: f64,
    pub esr_fwhm_mhz: f64,
    /// Half-width of the electron sweep around the sextet center.
    pub esr_window_mhz: f64,
    pub esr_step_mhz: f64,
    pub nmr_fwhm_mhz: f64,
    /// Margin added around the outer nuclear lines of each window.
    pub nmr_pad_mhz: f64,
    pub nmr_step_mhz: f64,
    /// Noise standard deviation as a fraction of each sweep's signal range;
    /// 0 disables noise entirely.
    pub noise_frac: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            esr_fields_t: (1..=7).map(|k| 0.2 * k as f64).collect(),
            endor_fields_t: (3..=7).map(|k| 0.2 * k as f64).collect(),
            esr_beta: 0.35,
            esr_q: 4.0,
            esr_fwhm_mhz: 8.0,
            esr_window_mhz: 500.0,
            esr_step_mhz: 1.0,
            nmr_fwhm_mhz: 3.0,
            nmr_pad_mhz: 7.0,
            nmr_step_mhz: 0.25,
            noise_frac: 0.05,
            seed: 20260819,
        }
    }
}

impl DatasetConfig {
    /// The default campaign without noise; useful as a convergence oracle.
    pub fn noise_free() -> Self {
        DatasetConfig {
            noise_frac: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.esr_fields_t.is_empty() {
            return Err(Error::invalid("dataset needs at least one electron sweep"));
        }
        for (name, fields) in [
            ("esr_fields_t", &self.esr_fields_t),
            ("endor_fields_t", &self.endor_fields_t),
        ] {
            if fields.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must contain positive finite fields"
                )));
            }
        }
        for (name, v) in [
            ("esr_fwhm_mhz", self.esr_fwhm_mhz),
            ("esr_window_mhz", self.esr_window_mhz),
            ("esr_step_mhz", self.esr_step_mhz),
            ("nmr_fwhm_mhz", self.nmr_fwhm_mhz),
            ("nmr_step_mhz", self.nmr_step_mhz),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.noise_frac >= 0.0) || !self.noise_frac.is_finite() {
            return Err(Error::invalid("noise_frac must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// The generated campaign plus the ground truth that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    /// One electron sweep per entry of `esr_fields_t`.
    pub esr: Vec<Spectrum>,
    /// Two nuclear windows per entry of `endor_fields_t`, low window first.
    pub endor: Vec<Spectrum>,
    pub truth_system: SpinSystem,
    /// Field template: per-spectrum fields replace only `b_ext[2]`.
    pub truth_field: FieldConfig,
}

fn ascending_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).round() as usize;
    (0..=n).map(|k| start + step * k as f64).collect()
}

fn range_sigma(spec: &Spectrum, frac: f64) -> f64 {
    let (lo, hi) = spec
        .signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    frac * (hi - lo)
}

/// Pump settings of the double-resonance acquisitions: a gentle sublevel
/// ladder (adjacent occupations differ by ~2, so all four bottom-pair
/// transitions stay well above the noise), a readout drive on the probed
/// electron line, and a nuclear drive matched to the slow flip-flop scale
/// at each field so the lines saturate on resonance yet stay resolved.
fn endor_pump(sys: &SpinSystem, field: &FieldConfig) -> Result<PumpConfig> {
    let gamma_ff = 1e4;
    let c = hybridization_coefficient(sys, field, HalfInt::from_twice(-3))?.coefficient;
    Ok(PumpConfig {
        gamma_e_down: 1e6,
        gamma_e_up: 7.5e5,
        gamma_ff,
        ff_asymmetry: 0.2,
        omega_esr: 5e5,
        omega_nmr: 2.0 * gamma_ff * c * c,
        ..Default::default()
    })
}

/// Generate the campaign. Deterministic: identical configs produce
/// identical spectra, noise included.
pub fn synthesize_dataset(cfg: &DatasetConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let sys = SpinSystem::ti47();
    let field0 = FieldConfig::probe_default();

    let mut esr = Vec::with_capacity(cfg.esr_fields_t.len());
    for (k, &b) in cfg.esr_fields_t.iter().enumerate() {
        let field = field0.with_b_z(b);
        let lines = esr_frequencies(&sys, &field)?;
        let f_mid = lines.iter().map(|l| l.frequency).sum::<f64>() / lines.len() as f64;
        let grid = ascending_grid(
            f_mid - cfg.esr_window_mhz,
            f_mid + cfg.esr_window_mhz,
            cfg.esr_step_mhz,
        );
        let synth = EsrSynthesis {
            fwhm: cfg.esr_fwhm_mhz,
            shape: LineShape::Fano { q: cfg.esr_q },
            amplitude: 1.0,
            background: LinearBackground {
                offset: 0.1,
                slope: 5e-6,
            },
        };
        let clean = synth_esr_spectrum(
            &sys,
            &field,
            &PopulationSource::Boltzmann { beta: cfg.esr_beta },
            &synth,
            &grid,
        )?;
        let sigma = range_sigma(&clean, cfg.noise_frac);
        esr.push(add_noise(&clean, sigma, cfg.seed.wrapping_add(k as u64))?);
    }

    let mut endor = Vec::with_capacity(2 * cfg.endor_fields_t.len());
    for (j, &b) in cfg.endor_fields_t.iter().enumerate() {
        let field = field0.with_b_z(b);
        let pump = endor_pump(&sys, &field)?;
        let lines = esr_frequencies(&sys, &field)?;
        // Read out on the second electron line: the probed -3/2 sublevel
        // responds strongly to all four bottom-pair transitions.
        let f_esr = lines[1].frequency;
        let sol = diagonalize(&sys, &field)?;
        let catalog = transition_catalog(&sol, Channel::Nmr, 0.0)?;
        let freq_of = |tag: &str| -> Result<f64> {
            Ok(find_line(&catalog, tag)
                .ok_or_else(|| Error::invalid(format!("transition {tag} missing from catalog")))?
                .frequency)
        };
        let windows = [
            (freq_of("I")?, freq_of("III")?),
            (freq_of("IV")?, freq_of("II")?),
        ];
        let synth = EndorSynthesis {
            esr_fwhm: cfg.esr_fwhm_mhz,
            nmr_fwhm: cfg.nmr_fwhm_mhz,
            off_resonant: false,
            observable: EndorObservable::SublevelMarginal,
        };
        for (w, &(f_lo, f_hi)) in windows.iter().enumerate() {
            let grid = ascending_grid(
                f_lo - cfg.nmr_pad_mhz,
                f_hi + cfg.nmr_pad_mhz,
                cfg.nmr_step_mhz,
            );
            let clean = synth_endor_spectrum(&sys, &field, f_esr, &grid, &pump, &synth)?;
            let sigma = range_sigma(&clean, cfg.noise_frac);
            let seed = cfg.seed.wrapping_add(1000 + 2 * j as u64 + w as u64);
            endor.push(add_noise(&clean, sigma, seed)?);
        }
    }

    Ok(SyntheticDataset {
        esr,
        endor,
        truth_system: sys,
        truth_field: field0,
    })
}
