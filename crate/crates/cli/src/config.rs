//! Run configuration: a single TOML file mapping onto the engine's types.
//!
//! Every numeric key carries its unit in its name (`b_tip_tesla`,
//! `a_hyperfine_mhz`, `gamma_e_down_per_s`) so a config file can never be
//! misread dimensionally. Unknown keys are rejected. Every section is
//! optional and defaults to the shipped Ti-47 probe setup.

use crate::CliError;
use endor_core::lineshapes::{EsrSynthesis, LineShape, LinearBackground};
use endor_core::numerics::HalfInt;
use endor_core::pumping::{PumpConfig, StatePair};
use endor_core::spinmodel::{FieldConfig, SpinSystem};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "ENDOR_CONFIG";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every stochastic step (noise synthesis); identical configs
    /// and flags produce byte-identical outputs.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Directory for outputs whose path is not given explicitly.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Optional CSV with the junction's frequency-dependent voltage
    /// transfer (columns `frequency_MHz,voltage_ratio`).
    #[serde(default)]
    pub transfer_table: Option<PathBuf>,
    #[serde(default)]
    pub spin_system: SpinSystemSection,
    #[serde(default)]
    pub field: FieldSection,
    #[serde(default)]
    pub pump: PumpSection,
    #[serde(default)]
    pub drive: DriveSection,
    #[serde(default)]
    pub lineshape: LineshapeSection,
}

fn default_seed() -> u64 {
    20260819
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            output_dir: default_output_dir(),
            transfer_table: None,
            spin_system: SpinSystemSection::default(),
            field: FieldSection::default(),
            pump: PumpSection::default(),
            drive: DriveSection::default(),
            lineshape: LineshapeSection::default(),
        }
    }
}

impl RunConfig {
    /// Load from an explicit path, else from the `ENDOR_CONFIG` environment
    /// variable, else use built-in defaults. An explicitly named file that
    /// does not load is an error; so is a broken `ENDOR_CONFIG`.
    pub fn load(explicit: Option<&Path>) -> Result<Self, CliError> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
        };
        match path {
            Some(p) => Self::from_file(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Input(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            CliError::Input(format!("config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-validate against the engine's own invariants so a bad file
    /// fails at load time with a field-level message.
    pub fn validate(&self) -> Result<(), CliError> {
        self.spin_system.to_core()?.validate().map_err(cfg_err)?;
        self.field.to_core()?.validate().map_err(cfg_err)?;
        self.pump.to_core(&self.spin_system)?.validate().map_err(cfg_err)?;
        self.drive.validate()?;
        self.lineshape.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::Input(format!("cannot serialize config: {e}")))
    }
}

fn cfg_err(e: endor_core::Error) -> CliError {
    CliError::Input(format!("config: {e}"))
}

/// Parse a half-integer quantum number given as a decimal (…, -1.5, 0, 0.5).
fn half_int(v: f64, name: &str) -> Result<HalfInt, CliError> {
    let twice = 2.0 * v;
    if !v.is_finite() || (twice - twice.round()).abs() > 1e-9 {
        return Err(CliError::Input(format!(
            "{name} = {v} is not a half-integer"
        )));
    }
    Ok(HalfInt::from_twice(twice.round() as i32))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpinSystemSection {
    pub s_electron: f64,
    pub i_nuclear: f64,
    /// Diagonal electron g-tensor (x, y, z).
    pub g_e: [f64; 3],
    pub g_n: f64,
    /// Diagonal hyperfine tensor (x, y, z), MHz.
    pub a_hyperfine_mhz: [f64; 3],
    pub kappa_mhz: f64,
    pub eta: f64,
}

impl Default for SpinSystemSection {
    fn default() -> Self {
        Self::from_core(&SpinSystem::ti47())
    }
}

impl SpinSystemSection {
    pub fn to_core(&self) -> Result<SpinSystem, CliError> {
        Ok(SpinSystem {
            s_electron: half_int(self.s_electron, "spin_system.s_electron")?,
            i_nuclear: half_int(self.i_nuclear, "spin_system.i_nuclear")?,
            g_e: self.g_e,
            g_n: self.g_n,
            a_hyperfine: self.a_hyperfine_mhz,
            kappa: self.kappa_mhz,
            eta: self.eta,
        })
    }

    pub fn from_core(sys: &SpinSystem) -> Self {
        SpinSystemSection {
            s_electron: sys.s_electron.value(),
            i_nuclear: sys.i_nuclear.value(),
            g_e: sys.g_e,
            g_n: sys.g_n,
            a_hyperfine_mhz: sys.a_hyperfine,
            kappa_mhz: sys.kappa,
            eta: sys.eta,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    pub b_ext_tesla: [f64; 3],
    pub b_tip_tesla: f64,
    /// Tip-field polar angle from z, radians.
    pub phi_rad: f64,
    /// Tip-field azimuthal angle, radians.
    pub theta_rad: f64,
    pub tip_couples_nucleus: bool,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self::from_core(&FieldConfig::probe_default())
    }
}

impl FieldSection {
    pub fn to_core(&self) -> Result<FieldConfig, CliError> {
        Ok(FieldConfig {
            b_ext: self.b_ext_tesla,
            b_tip: self.b_tip_tesla,
            phi: self.phi_rad,
            theta: self.theta_rad,
            tip_couples_nucleus: self.tip_couples_nucleus,
        })
    }

    pub fn from_core(f: &FieldConfig) -> Self {
        FieldSection {
            b_ext_tesla: f.b_ext,
            b_tip_tesla: f.b_tip,
            phi_rad: f.phi,
            theta_rad: f.theta,
            tip_couples_nucleus: f.tip_couples_nucleus,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpSection {
    pub gamma_e_down_per_s: f64,
    pub gamma_e_up_per_s: f64,
    pub gamma_ff_per_s: f64,
    pub ff_asymmetry: f64,
    pub omega_esr_per_s: f64,
    /// Driven electron pair as two `[m_s, m_i]` states.
    pub esr_pair: [[f64; 2]; 2],
    pub omega_nmr_per_s: f64,
    /// Driven nuclear pair as two `[m_s, m_i]` states.
    pub nmr_pair: [[f64; 2]; 2],
}

impl Default for PumpSection {
    fn default() -> Self {
        Self::from_core(&PumpConfig::default())
    }
}

fn pair_to_core(pair: &[[f64; 2]; 2], name: &str) -> Result<StatePair, CliError> {
    let state = |s: &[f64; 2], which: &str| -> Result<(HalfInt, HalfInt), CliError> {
        Ok((
            half_int(s[0], &format!("{name}.{which}[0] (m_s)"))?,
            half_int(s[1], &format!("{name}.{which}[1] (m_i)"))?,
        ))
    };
    Ok((state(&pair[0], "first")?, state(&pair[1], "second")?))
}

fn pair_from_core(pair: &StatePair) -> [[f64; 2]; 2] {
    [
        [pair.0 .0.value(), pair.0 .1.value()],
        [pair.1 .0.value(), pair.1 .1.value()],
    ]
}

impl PumpSection {
    pub fn to_core(&self, _sys: &SpinSystemSection) -> Result<PumpConfig, CliError> {
        Ok(PumpConfig {
            gamma_e_down: self.gamma_e_down_per_s,
            gamma_e_up: self.gamma_e_up_per_s,
            gamma_ff: self.gamma_ff_per_s,
            ff_asymmetry: self.ff_asymmetry,
            omega_esr: self.omega_esr_per_s,
            esr_pair: pair_to_core(&self.esr_pair, "pump.esr_pair")?,
            omega_nmr: self.omega_nmr_per_s,
            nmr_pair: pair_to_core(&self.nmr_pair, "pump.nmr_pair")?,
        })
    }

    pub fn from_core(p: &PumpConfig) -> Self {
        PumpSection {
            gamma_e_down_per_s: p.gamma_e_down,
            gamma_e_up_per_s: p.gamma_e_up,
            gamma_ff_per_s: p.gamma_ff,
            ff_asymmetry: p.ff_asymmetry,
            omega_esr_per_s: p.omega_esr,
            esr_pair: pair_from_core(&p.esr_pair),
            omega_nmr_per_s: p.omega_nmr,
            nmr_pair: pair_from_core(&p.nmr_pair),
        }
    }
}

/// Junction drive amplitudes. The engine works in rates (1/s); the mapping
/// from millivolts at the junction to a drive rate is not derivable from
/// first principles, so it is a user-set conversion factor. The delivered
/// voltage is attenuated by the transfer table (when configured) at the
/// drive frequency, then multiplied by the factor and added to the [pump]
/// rates.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveSection {
    pub rate_per_s_per_mv: f64,
    pub v_esr_mv: f64,
    pub v_nmr_mv: f64,
}

impl Default for DriveSection {
    fn default() -> Self {
        // Junction voltages in the few-mV (electron) / few-tens-of-mV
        // (nuclear) range. The conversion factor is tuned so the on-resonance
        // nuclear drive (here 5/s) wins against the slow sublevel
        // cross-relaxation while its Lorentzian tails stay below it, giving
        // deep yet sharp double-resonance dips out of the box.
        DriveSection {
            rate_per_s_per_mv: 0.5,
            v_esr_mv: 2.0,
            v_nmr_mv: 10.0,
        }
    }
}

impl DriveSection {
    pub fn validate(&self) -> Result<(), CliError> {
        for (name, v) in [
            ("drive.rate_per_s_per_mv", self.rate_per_s_per_mv),
            ("drive.v_esr_mv", self.v_esr_mv),
            ("drive.v_nmr_mv", self.v_nmr_mv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CliError::Input(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsrShapeKind {
    Fano,
    Lorentzian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    /// Thermal-like sublevel ladder with `esr_boltzmann_beta`.
    Boltzmann,
    /// Steady state of the [pump] configuration.
    Pumped,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineshapeSection {
    pub esr_fwhm_mhz: f64,
    pub nmr_fwhm_mhz: f64,
    pub esr_shape: EsrShapeKind,
    pub esr_q: f64,
    pub amplitude: f64,
    pub background_offset: f64,
    pub background_slope_per_mhz: f64,
    pub esr_populations: PopulationKind,
    pub esr_boltzmann_beta: f64,
}

impl Default for LineshapeSection {
    fn default() -> Self {
        LineshapeSection {
            esr_fwhm_mhz: 8.0,
            nmr_fwhm_mhz: 3.0,
            esr_shape: EsrShapeKind::Fano,
            esr_q: 4.0,
            amplitude: 1.0,
            background_offset: 0.0,
            background_slope_per_mhz: 0.0,
            esr_populations: PopulationKind::Boltzmann,
            esr_boltzmann_beta: 0.35,
        }
    }
}

impl LineshapeSection {
    pub fn validate(&self) -> Result<(), CliError> {
        for (name, v) in [
            ("lineshape.esr_fwhm_mhz", self.esr_fwhm_mhz),
            ("lineshape.nmr_fwhm_mhz", self.nmr_fwhm_mhz),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CliError::Input(format!("{name} = {v} must be positive")));
            }
        }
        if !self.esr_q.is_finite() || !self.amplitude.is_finite() {
            return Err(CliError::Input(
                "lineshape.esr_q and lineshape.amplitude must be finite".to_string(),
            ));
        }
        Ok(())
    }

    pub fn esr_synthesis(&self) -> EsrSynthesis {
        EsrSynthesis {
            fwhm: self.esr_fwhm_mhz,
            shape: match self.esr_shape {
                EsrShapeKind::Fano => LineShape::Fano { q: self.esr_q },
                EsrShapeKind::Lorentzian => LineShape::Lorentzian,
            },
            amplitude: self.amplitude,
            background: LinearBackground {
                offset: self.background_offset,
                slope: self.background_slope_per_mhz,
            },
        }
    }
}
