//! Line profiles and forward synthesis of frequency-swept spectra.
//!
//! Electron-resonance sweeps are sums of Fano (or Lorentzian) lines whose
//! amplitudes track the nuclear sublevel occupations; double-resonance
//! sweeps are computed point by point from the pumped steady state with a
//! frequency-rolled nuclear drive. All frequencies are in MHz, rates in 1/s.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{m_ladder, HalfInt};
use crate::pumping::{build_rate_matrix, steady_state, PumpConfig, StatePair};
use crate::spinmodel::{
    diagonalize, esr_frequencies, numeral_pair, transition_catalog, Channel, FieldConfig,
    SpinSystem, TransitionLine, DEFAULT_WEIGHT_FLOOR,
};
use crate::{Error, Result};

/// Default full width at half maximum of an electron line, MHz.
pub const DEFAULT_ESR_FWHM: f64 = 8.0;
/// Default full width at half maximum of a nuclear line, MHz.
pub const DEFAULT_NMR_FWHM: f64 = 4.0;

/// Fano profile: `amplitude * ((q + eps)^2 / (1 + eps^2) - 1)` with the
/// reduced detuning `eps = 2 (f - center) / width`. The constant offset -1
/// makes the profile vanish far from resonance for every `q`; `q = 0` gives
/// an inverted Lorentzian dip, large `|q|` a nearly symmetric peak of height
/// ~`q^2 * amplitude`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoParams {
    pub center: f64,
    /// Width parameter (acts as the FWHM scale); must be positive.
    pub width: f64,
    pub asymmetry_q: f64,
    pub amplitude: f64,
}

impl FanoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::invalid(format!(
                "line width {} must be positive",
                self.width
            )));
        }
        if ![self.center, self.asymmetry_q, self.amplitude]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::invalid("line parameters must be finite"));
        }
        Ok(())
    }
}

/// Evaluate a Fano line. `p.width` must be positive (see
/// [`FanoParams::validate`]).
pub fn fano(f: f64, p: &FanoParams) -> f64 {
    let eps = 2.0 * (f - p.center) / p.width;
    p.amplitude * ((p.asymmetry_q + eps) * (p.asymmetry_q + eps) / (1.0 + eps * eps) - 1.0)
}

/// Symmetric Lorentzian peak of height `amplitude` and full width at half
/// maximum `fwhm`. The amplitude may be negative (a dip).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorentzianParams {
    pub center: f64,
    pub fwhm: f64,
    pub amplitude: f64,
}

impl LorentzianParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm > 0.0) || !self.fwhm.is_finite() {
            return Err(Error::invalid(format!(
                "line width {} must be positive",
                self.fwhm
            )));
        }
        if !self.center.is_finite() || !self.amplitude.is_finite() {
            return Err(Error::invalid("line parameters must be finite"));
        }
        Ok(())
    }
}

/// Evaluate a Lorentzian line. `p.fwhm` must be positive.
pub fn lorentzian(f: f64, p: &LorentzianParams) -> f64 {
    let hw = p.fwhm / 2.0;
    p.amplitude * hw * hw / ((f - p.center) * (f - p.center) + hw * hw)
}

/// Unit-peak Lorentzian roll-off, 1 at `center`, 1/2 at `center ± fwhm/2`.
fn rolloff(f: f64, center: f64, fwhm: f64) -> f64 {
    let eps = 2.0 * (f - center) / fwhm;
    1.0 / (1.0 + eps * eps)
}

/// A sampled sweep: strictly ascending frequencies (MHz), one signal value
/// per point, and free-form string metadata (field, fixed drive frequency,
/// noise seed, warnings, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub signal: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Spectrum {
    pub fn new(
        frequencies: Vec<f64>,
        signal: Vec<f64>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        if frequencies.len() != signal.len() {
            return Err(Error::invalid(format!(
                "frequency and signal lengths differ: {} vs {}",
                frequencies.len(),
                signal.len()
            )));
        }
        validate_grid(&frequencies)?;
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("signal contains a non-finite value"));
        }
        Ok(Spectrum {
            frequencies,
            signal,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Parse a metadata entry as f64, if present and numeric.
    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|s| s.parse().ok())
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("frequency grid is empty"));
    }
    if grid.iter().any(|f| !f.is_finite()) {
        return Err(Error::invalid("frequency grid contains a non-finite value"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "frequency grid must be strictly ascending",
        ));
    }
    Ok(())
}

/// Profile used for each electron line in a synthesized sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineShape {
    Fano { q: f64 },
    Lorentzian,
}

/// Linear baseline `offset + slope * f` added to a synthesized sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearBackground {
    pub offset: f64,
    pub slope: f64,
}

impl LinearBackground {
    pub fn at(&self, f: f64) -> f64 {
        self.offset + self.slope * f
    }
}

/// Where the sublevel occupations of an electron sweep come from.
#[derive(Clone, Debug, PartialEq)]
pub enum PopulationSource {
    /// Per-sublevel weights in basis order (m_I descending from +I), used
    /// exactly as given — no normalisation, so synthesis is linear in them.
    Explicit(Vec<f64>),
    /// Thermal-like weights ∝ exp(-beta (m_I + I)), normalised to sum 1;
    /// positive beta favors the bottom of the ladder (m_I = -I).
    Boltzmann { beta: f64 },
    /// Sublevel marginals of the pumped steady state.
    Pumped(PumpConfig),
}

/// Shape options for [`synth_esr_spectrum`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsrSynthesis {
    pub fwhm: f64,
    pub shape: LineShape,
    /// Overall scale multiplying every per-line population weight.
    pub amplitude: f64,
    pub background: LinearBackground,
}

impl Default for EsrSynthesis {
    fn default() -> Self {
        EsrSynthesis {
            fwhm: DEFAULT_ESR_FWHM,
            shape: LineShape::Fano { q: 4.0 },
            amplitude: 1.0,
            background: LinearBackground::default(),
        }
    }
}

fn resolve_populations(
    sys: &SpinSystem,
    field: &FieldConfig,
    src: &PopulationSource,
) -> Result<Vec<f64>> {
    let n = sys.i_nuclear.multiplicity();
    match src {
        PopulationSource::Explicit(w) => {
            if w.len() != n {
                return Err(Error::invalid(format!(
                    "expected {n} sublevel weights (one per m_I), got {}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(
                    "sublevel weights must be finite and nonnegative",
                ));
            }
            Ok(w.clone())
        }
        PopulationSource::Boltzmann { beta } => {
            if !beta.is_finite() {
                return Err(Error::invalid("beta must be finite"));
            }
            let w: Vec<f64> = m_ladder(sys.i_nuclear)
                .into_iter()
                .map(|m| (-beta * (m.value() + sys.i_nuclear.value())).exp())
                .collect();
            let total: f64 = w.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::invalid(format!(
                    "beta = {beta} produces degenerate thermal weights"
                )));
            }
            Ok(w.into_iter().map(|v| v / total).collect())
        }
        PopulationSource::Pumped(cfg) => {
            let pop = steady_state(&build_rate_matrix(sys, field, cfg)?)?;
            Ok(m_ladder(sys.i_nuclear)
                .into_iter()
                .map(|m| pop.marginal_mi(m))
                .collect())
        }
    }
}

/// The m_I tag an electron line was built for.
fn line_mi(sys: &SpinSystem, line: &TransitionLine) -> Result<HalfInt> {
    let label = line.label.as_deref().unwrap_or("");
    m_ladder(sys.i_nuclear)
        .into_iter()
        .find(|m| format!("mI={m}") == label)
        .ok_or_else(|| Error::invalid(format!("electron line {label:?} lacks a sublevel tag")))
}

/// Synthesize an electron-resonance sweep over `grid` (MHz, strictly
/// ascending): one line per nuclear sublevel, each line's amplitude equal to
/// `synth.amplitude` times that sublevel's population weight, on top of a
/// linear background. Lines falling outside the grid are still summed but
/// flagged in the `warning` metadata entry.
pub fn synth_esr_spectrum(
    sys: &SpinSystem,
    field: &FieldConfig,
    populations: &PopulationSource,
    synth: &EsrSynthesis,
    grid: &[f64],
) -> Result<Spectrum> {
    validate_grid(grid)?;
    if !(synth.fwhm > 0.0) || !synth.fwhm.is_finite() {
        return Err(Error::invalid(format!(
            "line width {} must be positive",
            synth.fwhm
        )));
    }
    if !synth.amplitude.is_finite() {
        return Err(Error::invalid("amplitude must be finite"));
    }
    let lines = esr_frequencies(sys, field)?;
    let pops = resolve_populations(sys, field, populations)?;
    let ladder = m_ladder(sys.i_nuclear);

    let mut peaks = Vec::with_capacity(lines.len());
    for line in &lines {
        let mi = line_mi(sys, line)?;
        let idx = ladder.iter().position(|&m| m == mi).unwrap();
        peaks.push((line.frequency, synth.amplitude * pops[idx]));
    }

    let signal: Vec<f64> = grid
        .iter()
        .map(|&f| {
            let mut y = synth.background.at(f);
            for &(center, amp) in &peaks {
                y += match synth.shape {
                    LineShape::Fano { q } => fano(
                        f,
                        &FanoParams {
                            center,
                            width: synth.fwhm,
                            asymmetry_q: q,
                            amplitude: amp,
                        },
                    ),
                    LineShape::Lorentzian => lorentzian(
                        f,
                        &LorentzianParams {
                            center,
                            fwhm: synth.fwhm,
                            amplitude: amp,
                        },
                    ),
                };
            }
            y
        })
        .collect();

    let mut meta = BTreeMap::new();
    meta.insert("b_z".to_string(), field.b_ext[2].to_string());
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let outside = peaks.iter().filter(|(c, _)| *c < lo || *c > hi).count();
    if outside > 0 {
        meta.insert(
            "warning".to_string(),
            format!("{outside} electron lines fall outside the frequency grid"),
        );
    }
    Spectrum::new(grid.to_vec(), signal, meta)
}

/// What a double-resonance sweep reports at each point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndorObservable {
    /// Total occupation of the probed nuclear sublevel (both electron states).
    #[default]
    SublevelMarginal,
    /// Occupation difference across the probed electron-flip pair.
    PairDifference,
}

/// Options for [`synth_endor_spectrum`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndorSynthesis {
    /// Electron linewidth used for the on-resonance test (the readout must
    /// sit within 5 of these of some electron line).
    pub esr_fwhm: f64,
    /// Width of the Lorentzian roll-off of the nuclear drive around each
    /// nuclear line.
    pub nmr_fwhm: f64,
    /// Explicitly request a detuned control scan: the readout drive is
    /// dropped and the undriven baseline is reported at every point.
    pub off_resonant: bool,
    pub observable: EndorObservable,
}

impl Default for EndorSynthesis {
    fn default() -> Self {
        EndorSynthesis {
            esr_fwhm: DEFAULT_ESR_FWHM,
            nmr_fwhm: DEFAULT_NMR_FWHM,
            off_resonant: false,
            observable: EndorObservable::SublevelMarginal,
        }
    }
}

/// Synthesize a double-resonance sweep: hold an electron readout drive at
/// `f_esr_fixed` (rate `pump.omega_esr` on the electron-flip pair of the
/// nearest electron line) and scan a nuclear drive over `f_nmr_grid`. At
/// each point every single-quantum nuclear line receives a symmetric drive
/// `pump.omega_nmr` rolled off by a Lorentzian in the detuning from its
/// center, the pumped steady state is recomputed, and the probed sublevel's
/// occupation (or pair difference) is reported.
///
/// `pump.nmr_pair` and the stored `esr_pair` are ignored: the scan supplies
/// the nuclear drives and the readout pair follows from `f_esr_fixed`.
///
/// `f_esr_fixed` must land within 5 electron linewidths of some electron
/// line unless `synth.off_resonant` is set, in which case the entire sweep
/// reports the undriven steady state (a flat control curve).
pub fn synth_endor_spectrum(
    sys: &SpinSystem,
    field: &FieldConfig,
    f_esr_fixed: f64,
    f_nmr_grid: &[f64],
    pump: &PumpConfig,
    synth: &EndorSynthesis,
) -> Result<Spectrum> {
    validate_grid(f_nmr_grid)?;
    if !f_esr_fixed.is_finite() {
        return Err(Error::invalid("readout frequency must be finite"));
    }
    for (name, w) in [("esr_fwhm", synth.esr_fwhm), ("nmr_fwhm", synth.nmr_fwhm)] {
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!("{name} = {w} must be positive")));
        }
    }
    pump.validate()?;

    let esr_lines = esr_frequencies(sys, field)?;
    let nearest = esr_lines
        .iter()
        .min_by(|a, b| {
            let da = (a.frequency - f_esr_fixed).abs();
            let db = (b.frequency - f_esr_fixed).abs();
            da.partial_cmp(&db).unwrap()
        })
        .expect("at least one electron line");
    let detuning = (nearest.frequency - f_esr_fixed).abs();
    if detuning > 5.0 * synth.esr_fwhm && !synth.off_resonant {
        return Err(Error::invalid(format!(
            "readout frequency {f_esr_fixed} MHz sits {detuning:.1} MHz from the nearest \
             electron line at {:.1} MHz (more than 5 linewidths); set the off-resonant flag \
             to synthesize a detuned control scan",
            nearest.frequency
        )));
    }
    let probed = line_mi(sys, nearest)?;
    let dn = HalfInt::from_twice(-1);
    let up = HalfInt::from_twice(1);

    let mut cfg = pump.clone();
    cfg.omega_nmr = 0.0;
    cfg.esr_pair = ((dn, probed), (up, probed));
    if synth.off_resonant {
        cfg.omega_esr = 0.0;
    }

    let base = crate::pumping::build_rate_matrix(sys, field, &cfg)?;
    let read = |pop: &crate::pumping::Populations| match synth.observable {
        EndorObservable::SublevelMarginal => pop.marginal_mi(probed),
        EndorObservable::PairDifference => {
            pop.get(dn, probed).unwrap_or(0.0) - pop.get(up, probed).unwrap_or(0.0)
        }
    };

    let signal: Vec<f64> = if synth.off_resonant {
        // Detuned readout: nothing selects a sublevel, so the scan reports
        // the undriven baseline of the nearest line's sublevel throughout.
        let y = read(&steady_state(&base)?);
        vec![y; f_nmr_grid.len()]
    } else {
        // Every single-quantum nuclear line takes part, keyed by the
        // sublevel pair its numeral tag denotes.
        let sol = diagonalize(sys, field)?;
        let catalog = transition_catalog(&sol, Channel::Nmr, DEFAULT_WEIGHT_FLOOR)?;
        let mut drive_lines: Vec<(StatePair, f64)> = Vec::new();
        for line in &catalog {
            let Some(tag) = line.label.as_deref() else {
                continue;
            };
            let Some((ms, lo)) = numeral_pair(sys.i_nuclear, tag) else {
                continue;
            };
            let hi = lo + HalfInt::from_twice(2);
            drive_lines.push((((ms, lo), (ms, hi)), line.frequency));
        }
        let mut out = Vec::with_capacity(f_nmr_grid.len());
        for &f in f_nmr_grid {
            let mut m = base.clone();
            for &(pair, center) in &drive_lines {
                m.add_symmetric_drive(pair, pump.omega_nmr * rolloff(f, center, synth.nmr_fwhm))?;
            }
            out.push(read(&steady_state(&m)?));
        }
        out
    };

    let mut meta = BTreeMap::new();
    meta.insert("b_z".to_string(), field.b_ext[2].to_string());
    meta.insert("f_esr_fixed".to_string(), f_esr_fixed.to_string());
    meta.insert("probed_mi".to_string(), probed.to_string());
    if synth.off_resonant {
        meta.insert("off_resonant".to_string(), "true".to_string());
    }
    Spectrum::new(f_nmr_grid.to_vec(), signal, meta)
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Add i.i.d. Gaussian noise of standard deviation `sigma` to a spectrum.
/// Each point draws from its own counter-derived stream of a seeded ChaCha
/// generator, so the result depends only on (seed, point index) — never on
/// evaluation order — and identical seeds reproduce identical output.
/// `sigma = 0` returns the input unchanged.
pub fn add_noise(spec: &Spectrum, sigma: f64, seed: u64) -> Result<Spectrum> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "noise level {sigma} must be a finite nonnegative value"
        )));
    }
    if sigma == 0.0 {
        return Ok(spec.clone());
    }
    let mut out = spec.clone();
    for (i, y) in out.signal.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        *y += sigma * standard_normal(&mut rng);
    }
    out.meta.insert("seed".to_string(), seed.to_string());
    Ok(out)
}

/// Frequency-dependent junction transfer: delivered/requested voltage ratio
/// sampled at ascending frequencies, linearly interpolated and clamped at
/// the ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTable {
    knots: Vec<(f64, f64)>,
}

impl TransferTable {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("transfer table is empty"));
        }
        for &(f, r) in &knots {
            if !f.is_finite() || !r.is_finite() {
                return Err(Error::invalid("transfer table has a non-finite entry"));
            }
            if !(r > 0.0) {
                return Err(Error::invalid(format!(
                    "voltage ratio {r} at {f} MHz must be positive"
                )));
            }
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid(
                "transfer table frequencies must be strictly ascending",
            ));
        }
        Ok(TransferTable { knots })
    }

    /// Parse a two-column CSV (`frequency_MHz,voltage_ratio`). Blank lines
    /// and `#` comments are skipped; one non-numeric header row is allowed.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut knots = Vec::new();
        let mut seen_header = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (a, b) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(f), Ok(r)) => knots.push((f, r)),
                _ if knots.is_empty() && !seen_header => seen_header = true,
                _ => {
                    return Err(Error::invalid(format!(
                        "transfer table line {}: cannot parse {line:?} as frequency,ratio",
                        lineno + 1
                    )));
                }
            }
        }
        TransferTable::new(knots)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Interpolated ratio at `f`, clamped to the end values outside the
    /// sampled range.
    pub fn ratio_at(&self, f: f64) -> f64 {
        let k = &self.knots;
        if f <= k[0].0 {
            return k[0].1;
        }
        if f >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let j = k.partition_point(|&(x, _)| x < f);
        let (x0, y0) = k[j - 1];
        let (x1, y1) = k[j];
        y0 + (y1 - y0) * (f - x0) / (x1 - x0)
    }
}

/// Voltage actually delivered to the junction when `requested_amplitude` is
/// asked for at frequency `f`.
pub fn apply_transfer(requested_amplitude: f64, f: f64, table: &TransferTable) -> f64 {
    requested_amplitude * table.ratio_at(f)
}
