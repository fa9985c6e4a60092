//! Staged recovery of the spin-model parameters from measured sweeps.
//!
//! The pipeline mirrors the experimental workflow. Electron-resonance sweeps
//! at several external fields pin the line positions (stage 1); the field
//! dependence of the pattern centre gives the electron g-factor and the
//! static out-of-plane tip field (stage 2); the full six-line pattern then
//! refines the tip-field magnitude and tilt (stage 3); nuclear sweeps yield
//! per-line centres (stage 4) from which the hyperfine and quadrupole
//! couplings follow (stage 5). Stages 3–5 depend on each other's output, so
//! [`recursive_calibration`] loops them until the parameters settle.

use std::cmp::Ordering;

use serde::Serialize;

use crate::lineshapes::{
    fano, lorentzian, FanoParams, LinearBackground, LorentzianParams, Spectrum,
};
use crate::numerics::{least_squares, HalfInt, LsqOptions};
use crate::spinmodel::{
    diagonalize, esr_frequencies, find_line, numeral_pair, roman, transition_catalog, Channel,
    FieldConfig, SpinSystem,
};
use crate::{Error, Result, MU_B_MHZ_PER_T, MU_N_MHZ_PER_T};

/// Transverse hyperfine components are not independently measurable here;
/// the model ties them to the axial one by this factor throughout.
const TRANSVERSE_HYPERFINE_RATIO: f64 = 0.1;

const PHI_MIN_RAD: f64 = 0.1 * std::f64::consts::PI / 180.0;
const PHI_MAX_RAD: f64 = 20.0 * std::f64::consts::PI / 180.0;
const PHI_INIT_RAD: f64 = 5.0 * std::f64::consts::PI / 180.0;
const B_TIP_MAX_T: f64 = 0.5;
const MAX_OUTER_ITERATIONS: usize = 10;
const OUTER_REL_TOL: f64 = 1e-4;

// ---------------------------------------------------------------------------
// small statistics helpers
// ---------------------------------------------------------------------------

fn median_of(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Unweighted straight-line fit `y = offset + slope * x`; falls back to a
/// flat line through the mean when the abscissa carries no spread.
fn straight_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.len() < 2 {
        return (y.first().copied().unwrap_or(0.0), 0.0);
    }
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    if det.abs() <= 1e-12 * (n * sxx).abs().max(1e-300) {
        return (sy / n, 0.0);
    }
    let slope = (n * sxy - sx * sy) / det;
    ((sy - slope * sx) / n, slope)
}

fn detrended(spec: &Spectrum) -> Vec<f64> {
    let (offset, slope) = straight_line(&spec.frequencies, &spec.signal);
    spec.frequencies
        .iter()
        .zip(&spec.signal)
        .map(|(f, s)| s - offset - slope * f)
        .collect()
}

/// Robust scale (1.4826 times the median absolute deviation around the
/// median) of a sample.
fn robust_sigma(v: &[f64]) -> f64 {
    let med = median_of(v.to_vec());
    let abs_dev: Vec<f64> = v.iter().map(|r| (r - med).abs()).collect();
    1.4826 * median_of(abs_dev)
}

/// Robust per-point noise level of a sweep, from the scatter of first
/// differences. Smooth structure (lines, backgrounds) drops out of the
/// differences, so the estimate tracks the noise even when resonances cover
/// most of the window.
pub fn noise_estimate(spec: &Spectrum) -> f64 {
    if spec.len() < 3 {
        return 0.0;
    }
    let diffs: Vec<f64> = spec.signal.windows(2).map(|w| w[1] - w[0]).collect();
    robust_sigma(&diffs) / std::f64::consts::SQRT_2
}

/// Boxcar-smoothed copy (half-width 3 points), used to rank candidate
/// extrema without chasing single-point noise spikes.
fn smoothed(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let hw = 3usize.min(n.saturating_sub(1) / 2);
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(hw);
            let hi = (i + hw).min(n - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Interior local maxima of `|v|`, tolerant of flat tops (a plateau counts
/// once, at its first sample).
fn local_extrema_indices(v: &[f64]) -> Vec<usize> {
    let n = v.len();
    if n < 3 {
        return Vec::new();
    }
    (1..n - 1)
        .filter(|&i| {
            let (a, b, c) = (v[i - 1].abs(), v[i].abs(), v[i + 1].abs());
            b >= a && b >= c && (b > a || b > c)
        })
        .collect()
}

/// Indices of up to `n` extrema of `resid` (ranked after light smoothing),
/// each pair at least `min_sep` apart on the `x` axis, returned in
/// ascending-`x` order. Genuine interior extrema are preferred — a large
/// leftover at a window edge is detrending artefact, not a line — with
/// ranked points and finally evenly spaced indices as fallbacks when the
/// data offers fewer separated extrema.
fn detect_extrema(x: &[f64], resid: &[f64], n: usize, min_sep: f64) -> Vec<usize> {
    let smooth = smoothed(resid);
    let rank = |order: &mut Vec<usize>| {
        order.sort_by(|&a, &b| {
            smooth[b]
                .abs()
                .partial_cmp(&smooth[a].abs())
                .unwrap_or(Ordering::Equal)
        });
    };
    let mut extrema = local_extrema_indices(&smooth);
    rank(&mut extrema);
    let mut everything: Vec<usize> = (0..x.len()).collect();
    rank(&mut everything);
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    for i in extrema.into_iter().chain(everything) {
        if picked.len() == n {
            break;
        }
        if !picked.contains(&i) && picked.iter().all(|&j| (x[i] - x[j]).abs() >= min_sep) {
            picked.push(i);
        }
    }
    let mut k = 1;
    while picked.len() < n && k <= x.len() {
        let cand = (k * x.len() / (n + 1)).min(x.len() - 1);
        if !picked.contains(&cand) {
            picked.push(cand);
        }
        k += 1;
    }
    while picked.len() < n {
        picked.push(0);
    }
    picked.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    picked
}

/// A fitted peak amplitude only counts when it clears both the scatter left
/// in the fit residual and a relative floor tied to the signal scale.
fn significant_amplitude(peak_scale: f64, fit_residual: &[f64], spec: &Spectrum) -> bool {
    let noise = robust_sigma(fit_residual);
    let scale = spec.signal.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    peak_scale > (5.0 * noise).max(1e-9 * scale)
}

// ---------------------------------------------------------------------------
// weighted straight line with covariance (shared by the field-linear fits)
// ---------------------------------------------------------------------------

struct LineFit {
    slope: f64,
    intercept: f64,
    slope_var: f64,
    intercept_var: f64,
    cov_si: f64,
    residual_norm: f64,
}

fn weighted_line(points: &[(f64, f64)], sigmas: Option<&[f64]>) -> Result<LineFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("a line fit needs at least two points"));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("line-fit points must be finite"));
    }
    let w: Vec<f64> = match sigmas {
        Some(s) => {
            if s.len() != n {
                return Err(Error::invalid(format!(
                    "got {} uncertainties for {} points",
                    s.len(),
                    n
                )));
            }
            if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::invalid("uncertainties must be positive and finite"));
            }
            s.iter().map(|v| 1.0 / (v * v)).collect()
        }
        None => vec![1.0; n],
    };
    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(points).map(|(wi, (x, _))| wi * x).sum();
    let swy: f64 = w.iter().zip(points).map(|(wi, (_, y))| wi * y).sum();
    let swxx: f64 = w.iter().zip(points).map(|(wi, (x, _))| wi * x * x).sum();
    let swxy: f64 = w.iter().zip(points).map(|(wi, (x, y))| wi * x * y).sum();
    let det = sw * swxx - swx * swx;
    if det <= 1e-10 * (sw * swxx).abs().max(1e-300) {
        return Err(Error::invalid(
            "the sampled fields do not span a range; slope and intercept are degenerate",
        ));
    }
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swxx * swy - swx * swxy) / det;
    let mut chi2 = 0.0;
    let mut rss = 0.0;
    for (wi, (x, y)) in w.iter().zip(points) {
        let r = y - slope * x - intercept;
        chi2 += wi * r * r;
        rss += r * r;
    }
    let s2 = if n > 2 { chi2 / (n - 2) as f64 } else { 0.0 };
    Ok(LineFit {
        slope,
        intercept,
        slope_var: s2 * sw / det,
        intercept_var: s2 * swxx / det,
        cov_si: -s2 * swx / det,
        residual_norm: rss.sqrt(),
    })
}

// ---------------------------------------------------------------------------
// stage 2: electron g-factor and static tip projection
// ---------------------------------------------------------------------------

/// Result of the field-linear fit of the electron pattern centre,
/// `f0 = mu_B * g_e_z * (B + B_tip_z)`.
#[derive(Clone, Debug, Serialize)]
pub struct LinearZeemanFit {
    pub g_e_z: f64,
    pub g_e_z_sigma: f64,
    /// Out-of-plane projection of the tip field, tesla.
    pub b_tip_z: f64,
    pub b_tip_z_sigma: f64,
    pub residual_norm: f64,
}

/// Fit pattern-centre frequencies `(b_z, f0)` (tesla, MHz) against the
/// linear Zeeman model. Optional per-point uncertainties weight the fit;
/// the quoted uncertainties always come from the residual scatter.
pub fn fit_f0_linear(points: &[(f64, f64)], sigmas: Option<&[f64]>) -> Result<LinearZeemanFit> {
    let lf = weighted_line(points, sigmas)?;
    if lf.slope.abs() < 1e-9 {
        return Err(Error::invalid(
            "the pattern centre does not move with field; g_e_z is not identifiable",
        ));
    }
    let g = lf.slope / MU_B_MHZ_PER_T;
    let b_tip_z = lf.intercept / lf.slope;
    // Delta method for the ratio intercept/slope, including the covariance.
    let d_int = 1.0 / lf.slope;
    let d_sl = -lf.intercept / (lf.slope * lf.slope);
    let var = d_int * d_int * lf.intercept_var
        + d_sl * d_sl * lf.slope_var
        + 2.0 * d_int * d_sl * lf.cov_si;
    Ok(LinearZeemanFit {
        g_e_z: g,
        g_e_z_sigma: lf.slope_var.max(0.0).sqrt() / MU_B_MHZ_PER_T,
        b_tip_z,
        b_tip_z_sigma: var.max(0.0).sqrt(),
        residual_norm: lf.residual_norm,
    })
}

/// Result of the field-linear fit of a nuclear line, slope = mu_N * g_n.
#[derive(Clone, Debug, Serialize)]
pub struct NuclearGFit {
    pub g_n: f64,
    pub g_n_sigma: f64,
    /// Fitted line frequency at zero field, MHz.
    pub intercept_mhz: f64,
    pub intercept_sigma: f64,
    /// Signed slope in MHz per tesla (g_n takes its magnitude).
    pub slope_mhz_per_t: f64,
    pub residual_norm: f64,
}

/// Fit nuclear line centres `(b_z, frequency)` (tesla, MHz) against a
/// straight line; the magnitude of the slope gives the nuclear g-factor.
pub fn fit_nuclear_g(points: &[(f64, f64)], sigmas: Option<&[f64]>) -> Result<NuclearGFit> {
    let lf = weighted_line(points, sigmas)?;
    Ok(NuclearGFit {
        g_n: lf.slope.abs() / MU_N_MHZ_PER_T,
        g_n_sigma: lf.slope_var.max(0.0).sqrt() / MU_N_MHZ_PER_T,
        intercept_mhz: lf.intercept,
        intercept_sigma: lf.intercept_var.max(0.0).sqrt(),
        slope_mhz_per_t: lf.slope,
        residual_norm: lf.residual_norm,
    })
}

// ---------------------------------------------------------------------------
// stage 1: electron line extraction
// ---------------------------------------------------------------------------

/// How the electron multiplet is parametrised during peak extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EsrConstraint {
    /// One shared centre and spacing, amplitudes tied to a thermal ladder:
    /// robust on noisy data, the default for calibration.
    EqualSpacingBoltzmann,
    /// Independent centre, amplitude and asymmetry per line.
    Free,
}

/// Fitted electron multiplet of one sweep.
#[derive(Clone, Debug, Serialize)]
pub struct EsrPeakSet {
    /// External field of the sweep (NaN when the spectrum carries no tag).
    pub b_z: f64,
    /// Line centres, ascending, MHz.
    pub centers: Vec<f64>,
    /// Centre of the whole pattern, MHz.
    pub center_f0: f64,
    pub f0_sigma: f64,
    /// Mean adjacent spacing, MHz (0 for a single line).
    pub spacing: f64,
    pub fano_params: Vec<FanoParams>,
    pub background: LinearBackground,
    /// Euclidean norm of the fit residual.
    pub fit_quality: f64,
    /// False when the optimiser stalled or no line clears the noise.
    pub converged: bool,
}

fn peak_count_error(n_params: usize, n_points: usize) -> Error {
    Error::invalid(format!(
        "{n_points} samples cannot constrain {n_params} line parameters"
    ))
}

fn constrained_centers(f0: f64, spacing: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| f0 + spacing * (k as f64 - 0.5 * (n as f64 - 1.0)))
        .collect()
}

/// Thermal amplitude ladder: `amp` split over `n` lines with successive
/// ratios `exp(-beta)`, normalised so the amplitudes sum to `amp`.
fn boltzmann_amplitudes(amp: f64, beta: f64, n: usize) -> Vec<f64> {
    let exps: Vec<f64> = (0..n).map(|k| -beta * k as f64).collect();
    let m = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = exps.iter().map(|e| (e - m).exp()).collect();
    let total: f64 = ws.iter().sum();
    ws.iter().map(|w| amp * w / total).collect()
}

/// Extract an `n_peaks`-line electron multiplet from one sweep.
///
/// The model is a linear background plus one asymmetric (Fano) line per
/// resonance. With [`EsrConstraint::EqualSpacingBoltzmann`] the centres are
/// forced onto a regular comb and the amplitudes onto a thermal ladder,
/// which keeps the fit well-conditioned on noisy data; [`EsrConstraint::Free`]
/// releases every line. A peak set whose strongest line does not clear five
/// times the robust noise level is returned with `converged = false`.
pub fn fit_esr_peaks(
    spec: &Spectrum,
    n_peaks: usize,
    constraint: EsrConstraint,
) -> Result<EsrPeakSet> {
    if n_peaks == 0 {
        return Err(Error::invalid("n_peaks must be at least 1"));
    }
    let x = &spec.frequencies;
    let y = &spec.signal;
    let n_params = match (n_peaks, constraint) {
        (1, _) => 6,
        (_, EsrConstraint::EqualSpacingBoltzmann) => n_peaks + 7,
        (_, EsrConstraint::Free) => 3 * n_peaks + 3,
    };
    if spec.len() < n_params + 2 {
        return Err(peak_count_error(n_params, spec.len()));
    }
    let span = x[x.len() - 1] - x[0];
    let step = span / (x.len() - 1) as f64;
    let (bg_off, bg_slope) = straight_line(x, y);
    let resid = detrended(spec);
    let min_sep = 0.5 * span / (n_peaks as f64 + 1.0);
    let idx = detect_extrema(x, &resid, n_peaks, min_sep);
    let c_init: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let h_init: Vec<f64> = idx.iter().map(|&i| resid[i]).collect();
    let width_init = (3.0 * step).clamp(step, span / 4.0);
    let q_init = 2.0;
    // Initial peak height |h| maps to amplitude h / (q^2 + 1).
    let q_norm = q_init * q_init + 1.0;

    let b_z = spec.meta_f64("b_z").unwrap_or(f64::NAN);

    match (n_peaks, constraint) {
        (1, _) => {
            let p0 = vec![
                c_init[0],
                h_init[0] / q_norm,
                width_init,
                q_init,
                bg_off,
                bg_slope,
            ];
            let bounds = vec![
                (x[0], x[x.len() - 1]),
                (f64::NEG_INFINITY, f64::INFINITY),
                (0.5 * step, span),
                (-1e3, 1e3),
                (f64::NEG_INFINITY, f64::INFINITY),
                (f64::NEG_INFINITY, f64::INFINITY),
            ];
            let mut model = |p: &[f64]| -> Vec<f64> {
                let fp = FanoParams {
                    center: p[0],
                    width: p[2],
                    asymmetry_q: p[3],
                    amplitude: p[1],
                };
                x.iter()
                    .zip(y)
                    .map(|(f, s)| p[4] + p[5] * f + fano(*f, &fp) - s)
                    .collect()
            };
            let lm = least_squares(&mut model, &p0, Some(&bounds), &LsqOptions::default())?;
            let fit_resid = model(&lm.params);
            let p = &lm.params;
            let fp = FanoParams {
                center: p[0],
                width: p[2],
                asymmetry_q: p[3],
                amplitude: p[1],
            };
            let peak_scale = p[1].abs() * (1.0 + p[3] * p[3]);
            Ok(EsrPeakSet {
                b_z,
                centers: vec![p[0]],
                center_f0: p[0],
                f0_sigma: lm.sigma(0),
                spacing: 0.0,
                fano_params: vec![fp],
                background: LinearBackground {
                    offset: p[4],
                    slope: p[5],
                },
                fit_quality: lm.residual_norm,
                converged: lm.converged && significant_amplitude(peak_scale, &fit_resid, spec),
            })
        }
        (_, EsrConstraint::EqualSpacingBoltzmann) => {
            let n = n_peaks;
            let f0_init = c_init.iter().sum::<f64>() / n as f64;
            let sp_init = (c_init[n - 1] - c_init[0]) / (n - 1) as f64;
            let h_max = h_init.iter().fold(0.0_f64, |a, h| a.max(h.abs()));
            let amp_init = n as f64 * h_max / q_norm;
            let mut p0 = vec![f0_init, sp_init.max(step), amp_init, 0.0, width_init];
            p0.extend(std::iter::repeat_n(q_init, n));
            p0.push(bg_off);
            p0.push(bg_slope);
            let mut bounds = vec![
                (x[0], x[x.len() - 1]),
                (0.5 * step, span),
                (0.0, f64::INFINITY),
                (-30.0, 30.0),
                (0.5 * step, span),
            ];
            bounds.extend(std::iter::repeat_n((-1e3, 1e3), n));
            bounds.push((f64::NEG_INFINITY, f64::INFINITY));
            bounds.push((f64::NEG_INFINITY, f64::INFINITY));
            let mut model = |p: &[f64]| -> Vec<f64> {
                let centers = constrained_centers(p[0], p[1], n);
                let amps = boltzmann_amplitudes(p[2], p[3], n);
                let width = p[4];
                let bg0 = p[5 + n];
                let bg1 = p[6 + n];
                x.iter()
                    .zip(y)
                    .map(|(f, s)| {
                        let mut v = bg0 + bg1 * f - s;
                        for k in 0..n {
                            let fp = FanoParams {
                                center: centers[k],
                                width,
                                asymmetry_q: p[5 + k],
                                amplitude: amps[k],
                            };
                            v += fano(*f, &fp);
                        }
                        v
                    })
                    .collect()
            };
            let lm = least_squares(&mut model, &p0, Some(&bounds), &LsqOptions::default())?;
            let fit_resid = model(&lm.params);
            let p = &lm.params;
            let centers = constrained_centers(p[0], p[1], n);
            let amps = boltzmann_amplitudes(p[2], p[3], n);
            let fano_params: Vec<FanoParams> = (0..n)
                .map(|k| FanoParams {
                    center: centers[k],
                    width: p[4],
                    asymmetry_q: p[5 + k],
                    amplitude: amps[k],
                })
                .collect();
            let peak_scale = fano_params
                .iter()
                .map(|fp| fp.amplitude.abs() * (1.0 + fp.asymmetry_q * fp.asymmetry_q))
                .fold(0.0_f64, f64::max);
            Ok(EsrPeakSet {
                b_z,
                centers,
                center_f0: p[0],
                f0_sigma: lm.sigma(0),
                spacing: p[1],
                fano_params,
                background: LinearBackground {
                    offset: p[5 + n],
                    slope: p[6 + n],
                },
                fit_quality: lm.residual_norm,
                converged: lm.converged && significant_amplitude(peak_scale, &fit_resid, spec),
            })
        }
        (_, EsrConstraint::Free) => {
            let n = n_peaks;
            let mut p0 = c_init.clone();
            p0.extend(h_init.iter().map(|h| h / q_norm));
            p0.extend(std::iter::repeat_n(q_init, n));
            p0.push(width_init);
            p0.push(bg_off);
            p0.push(bg_slope);
            fit_esr_free_from(spec, &p0, n)
        }
    }
}

/// Run the unconstrained multi-line fit from an explicit starting point.
/// Parameter layout: `[center_1..n, amplitude_1..n, q_1..n, width, bg0, bg1]`.
fn fit_esr_free_from(spec: &Spectrum, p0: &[f64], n: usize) -> Result<EsrPeakSet> {
    let x = &spec.frequencies;
    let y = &spec.signal;
    let span = x[x.len() - 1] - x[0];
    let step = span / (x.len() - 1) as f64;
    let b_z = spec.meta_f64("b_z").unwrap_or(f64::NAN);
    let mut bounds = vec![(x[0], x[x.len() - 1]); n];
    bounds.extend(std::iter::repeat_n((f64::NEG_INFINITY, f64::INFINITY), n));
    bounds.extend(std::iter::repeat_n((-1e3, 1e3), n));
    bounds.push((0.5 * step, span));
    bounds.push((f64::NEG_INFINITY, f64::INFINITY));
    bounds.push((f64::NEG_INFINITY, f64::INFINITY));
    let mut model = |p: &[f64]| -> Vec<f64> {
        let width = p[3 * n];
        let bg0 = p[3 * n + 1];
        let bg1 = p[3 * n + 2];
        x.iter()
            .zip(y)
            .map(|(f, s)| {
                let mut v = bg0 + bg1 * f - s;
                for k in 0..n {
                    let fp = FanoParams {
                        center: p[k],
                        width,
                        asymmetry_q: p[2 * n + k],
                        amplitude: p[n + k],
                    };
                    v += fano(*f, &fp);
                }
                v
            })
            .collect()
    };
    let lm = least_squares(&mut model, p0, Some(&bounds), &LsqOptions::default())?;
    let fit_resid = model(&lm.params);
    let p = &lm.params;
    let mut peaks: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|k| (p[k], p[n + k], p[2 * n + k], lm.sigma(k)))
        .collect();
    peaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let centers: Vec<f64> = peaks.iter().map(|t| t.0).collect();
    let center_f0 = centers.iter().sum::<f64>() / n as f64;
    let f0_sigma = peaks.iter().map(|t| t.3 * t.3).sum::<f64>().sqrt() / n as f64;
    let spacing = if n > 1 {
        (centers[n - 1] - centers[0]) / (n - 1) as f64
    } else {
        0.0
    };
    let fano_params: Vec<FanoParams> = peaks
        .iter()
        .map(|t| FanoParams {
            center: t.0,
            width: p[3 * n],
            asymmetry_q: t.2,
            amplitude: t.1,
        })
        .collect();
    let peak_scale = fano_params
        .iter()
        .map(|fp| fp.amplitude.abs() * (1.0 + fp.asymmetry_q * fp.asymmetry_q))
        .fold(0.0_f64, f64::max);
    Ok(EsrPeakSet {
        b_z,
        centers,
        center_f0,
        f0_sigma,
        spacing,
        fano_params,
        background: LinearBackground {
            offset: p[3 * n + 1],
            slope: p[3 * n + 2],
        },
        fit_quality: lm.residual_norm,
        converged: lm.converged && significant_amplitude(peak_scale, &fit_resid, spec),
    })
}

/// Polish a constrained comb fit with the unconstrained model, seeded from
/// the comb solution. The equal-spacing model registers the pattern robustly
/// but leaves a small systematic center bias when the true lines are not
/// exactly equidistant; the seeded free fit removes that bias without the
/// registration risk of a cold free start. Falls back to the seed when the
/// free fit fails or loses significance.
fn refine_esr_peaks(spec: &Spectrum, seed: &EsrPeakSet) -> EsrPeakSet {
    let n = seed.centers.len();
    let mut p0: Vec<f64> = seed.centers.clone();
    p0.extend(seed.fano_params.iter().map(|fp| fp.amplitude));
    p0.extend(seed.fano_params.iter().map(|fp| fp.asymmetry_q));
    let width = seed
        .fano_params
        .first()
        .map(|fp| fp.width)
        .unwrap_or(1.0);
    p0.push(width);
    p0.push(seed.background.offset);
    p0.push(seed.background.slope);
    match fit_esr_free_from(spec, &p0, n) {
        Ok(refined) if refined.converged => refined,
        _ => seed.clone(),
    }
}

// ---------------------------------------------------------------------------
// stage 3: tip-field vector from the full electron pattern
// ---------------------------------------------------------------------------

/// Tip-field magnitude and tilt refined against electron line positions.
#[derive(Clone, Debug, Serialize)]
pub struct TipFieldFit {
    /// Tip-field magnitude, tesla.
    pub b_tip: f64,
    pub b_tip_sigma: f64,
    /// Tilt from the z axis, radians.
    pub phi: f64,
    pub phi_sigma: f64,
    /// True when a parameter finished pinned at a box bound.
    pub at_bound: bool,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Refine the tip-field magnitude and tilt against the electron line
/// centres of two or more sweeps, holding `g_e_z` and the axial hyperfine
/// coupling fixed (an isotropic g and a quadrupole-free nucleus suffice:
/// the quadrupole term does not move electron-flip lines at first order).
pub fn fit_tip_field(
    peak_sets: &[EsrPeakSet],
    g_e_z: f64,
    a_z: f64,
    b_tip_init: f64,
) -> Result<TipFieldFit> {
    if peak_sets.len() < 2 {
        return Err(Error::invalid(
            "the tip-field fit needs electron peak sets at two or more fields",
        ));
    }
    let n = peak_sets[0].centers.len();
    if n == 0 || peak_sets.iter().any(|s| s.centers.len() != n) {
        return Err(Error::invalid(
            "all electron peak sets must share one positive line count",
        ));
    }
    if peak_sets.iter().any(|s| !s.b_z.is_finite()) {
        return Err(Error::invalid("an electron peak set has no field tag"));
    }
    let mut bzs: Vec<f64> = peak_sets.iter().map(|s| s.b_z).collect();
    bzs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    if bzs[bzs.len() - 1] - bzs[0] < 1e-9 {
        return Err(Error::invalid(
            "the tip-field fit needs at least two distinct fields",
        ));
    }
    if !(g_e_z > 0.0) || !g_e_z.is_finite() || !a_z.is_finite() {
        return Err(Error::invalid("g_e_z must be positive and a_z finite"));
    }
    let sys = SpinSystem {
        s_electron: HalfInt::from_twice(1),
        i_nuclear: HalfInt::from_twice((n - 1) as i32),
        g_e: [g_e_z; 3],
        g_n: 0.0,
        a_hyperfine: [
            TRANSVERSE_HYPERFINE_RATIO * a_z,
            TRANSVERSE_HYPERFINE_RATIO * a_z,
            a_z,
        ],
        kappa: 0.0,
        eta: 0.0,
    };
    let model = |p: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(peak_sets.len() * n);
        for set in peak_sets {
            let field = FieldConfig {
                b_ext: [0.0, 0.0, set.b_z],
                b_tip: p[0],
                phi: p[1],
                theta: 0.0,
                tip_couples_nucleus: false,
            };
            match esr_frequencies(&sys, &field) {
                Ok(lines) => {
                    for (line, c) in lines.iter().zip(&set.centers) {
                        out.push(line.frequency - c);
                    }
                }
                Err(_) => out.extend(std::iter::repeat_n(1e9, n)),
            }
        }
        out
    };
    let bt0 = b_tip_init.clamp(0.0, B_TIP_MAX_T);
    let bounds = vec![(0.0, B_TIP_MAX_T), (PHI_MIN_RAD, PHI_MAX_RAD)];
    // The tilt enters the pattern only quadratically, so a single start can
    // stall on nearly aligned tips; a second start at the lower bound lets
    // the fit settle there when the data prefer it. The tight step tolerance
    // matters for the same reason: the cost surface is extremely flat along
    // the tilt, and an early stop would leave it drifting between calls.
    let opts = LsqOptions {
        max_iterations: 2000,
        rel_step_tol: 1e-12,
        rel_cost_tol: 1e-15,
        ..LsqOptions::default()
    };
    let starts = [[bt0, PHI_INIT_RAD], [bt0, PHI_MIN_RAD]];
    let mut lm = None;
    for s in &starts {
        let r = least_squares(&model, s, Some(&bounds), &opts)?;
        if lm
            .as_ref()
            .map(|b: &crate::numerics::LeastSquaresResult| r.residual_norm < b.residual_norm)
            .unwrap_or(true)
        {
            lm = Some(r);
        }
    }
    let lm = lm.expect("at least one start ran");
    let b_tip = lm.params[0];
    let phi = lm.params[1];
    // Pinned within 1% of the box: the optimiser may stall a small step
    // away from a bound on a flat cost surface, which is still "at bound"
    // for reporting purposes.
    let phi_tol = 1e-2 * (PHI_MAX_RAD - PHI_MIN_RAD);
    let tip_tol = 1e-2 * B_TIP_MAX_T;
    let at_bound = (phi - PHI_MIN_RAD) < phi_tol
        || (PHI_MAX_RAD - phi) < phi_tol
        || b_tip < tip_tol
        || (B_TIP_MAX_T - b_tip) < tip_tol;
    Ok(TipFieldFit {
        b_tip,
        b_tip_sigma: lm.sigma(0),
        phi,
        phi_sigma: lm.sigma(1),
        at_bound,
        residual_norm: lm.residual_norm,
        converged: lm.converged,
    })
}

// ---------------------------------------------------------------------------
// stage 4: nuclear line extraction
// ---------------------------------------------------------------------------

/// Fitted nuclear lines of one double-resonance sweep.
#[derive(Clone, Debug, Serialize)]
pub struct NmrPeakSet {
    /// External field of the sweep (NaN when the spectrum carries no tag).
    pub b_z: f64,
    /// Line centres, ascending, MHz.
    pub centers: Vec<f64>,
    /// One transition tag per centre (Roman numerals when a model is given
    /// or in plain frequency order otherwise).
    pub labels: Vec<String>,
    /// 1-sigma centre uncertainties, MHz.
    pub uncertainties: Vec<f64>,
    pub lorentzian_params: Vec<LorentzianParams>,
    pub background: LinearBackground,
    pub fit_quality: f64,
    /// False when the optimiser stalled or no line clears the noise.
    pub converged: bool,
}

/// One subtract-and-refit pass over jointly fitted nuclear lines: each line
/// is refit alone on its own neighbourhood with the other fitted profiles
/// removed from the data. Whatever lineshape mismatch a neighbour's tail
/// leaves behind is nearly linear across the narrow sub-window, so the
/// local background soaks it up instead of levering the centre; window
/// edges fall outside the sub-window entirely. Peaks are updated in place
/// (`(center, amplitude, fwhm, center_sigma)`); a sub-fit that fails or
/// wanders keeps the joint result.
fn refine_nmr_centers(spec: &Spectrum, peaks: &mut [(f64, f64, f64, f64)]) {
    let x = &spec.frequencies;
    let y = &spec.signal;
    let span = x[x.len() - 1] - x[0];
    let step = span / (x.len() - 1) as f64;
    let snapshot: Vec<(f64, f64, f64, f64)> = peaks.to_vec();
    for (k, peak) in peaks.iter_mut().enumerate() {
        let (c0, a0, w0, _) = *peak;
        // Narrow enough to exclude the neighbours' cores, wide enough to
        // cover the line top with a workable point count.
        let half = (1.2 * w0.abs()).clamp(2.5, 4.5);
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for (f, s) in x.iter().zip(y) {
            if (f - c0).abs() <= half {
                let mut v = *s;
                for (j, &(cj, aj, wj, _)) in snapshot.iter().enumerate() {
                    if j != k {
                        v -= lorentzian(
                            *f,
                            &LorentzianParams {
                                center: cj,
                                fwhm: wj,
                                amplitude: aj,
                            },
                        );
                    }
                }
                xs.push(*f);
                ys.push(v);
            }
        }
        if xs.len() < 8 {
            continue;
        }
        let (b0, b1) = straight_line(&xs, &ys);
        let p0 = [c0, a0, w0, b0, b1];
        let bounds = vec![
            (c0 - half, c0 + half),
            (f64::NEG_INFINITY, f64::INFINITY),
            (0.5 * step, span),
            (f64::NEG_INFINITY, f64::INFINITY),
            (f64::NEG_INFINITY, f64::INFINITY),
        ];
        let model = |p: &[f64]| -> Vec<f64> {
            let lp = LorentzianParams {
                center: p[0],
                fwhm: p[2],
                amplitude: p[1],
            };
            xs.iter()
                .zip(&ys)
                .map(|(f, s)| p[3] + p[4] * f + lorentzian(*f, &lp) - s)
                .collect()
        };
        if let Ok(lm) = least_squares(&model, &p0, Some(&bounds), &LsqOptions::default()) {
            if lm.converged && (lm.params[0] - c0).abs() < half {
                *peak = (lm.params[0], lm.params[1], lm.params[2], lm.sigma(0));
            }
        }
    }
    peaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
}

/// Extract up to four nuclear lines (symmetric Lorentzians over a linear
/// background, one width per line) from one sweep, followed by a local
/// subtract-and-refit pass per line. When a spin model and field are
/// supplied, each fitted centre is tagged with the Roman-numeral label of
/// the nearest predicted single-quantum transition within a distance gate
/// (each label used once); otherwise the lines are numbered in frequency
/// order.
pub fn fit_nmr_peaks(
    spec: &Spectrum,
    n_peaks: usize,
    model: Option<(&SpinSystem, &FieldConfig)>,
) -> Result<NmrPeakSet> {
    if n_peaks == 0 || n_peaks > 4 {
        return Err(Error::invalid("n_peaks must lie in 1..=4"));
    }
    let n_params = 3 * n_peaks + 2;
    if spec.len() < n_params + 2 {
        return Err(peak_count_error(n_params, spec.len()));
    }
    let x = &spec.frequencies;
    let y = &spec.signal;
    let span = x[x.len() - 1] - x[0];
    let step = span / (x.len() - 1) as f64;
    let (bg_off, bg_slope) = straight_line(x, y);
    let resid = detrended(spec);
    let min_sep = 0.5 * span / (n_peaks as f64 + 1.0);
    let idx = detect_extrema(x, &resid, n_peaks, min_sep);
    let n = n_peaks;

    // Every line carries its own width: a shared width lets a strong
    // neighbour's tail lever a weak line's centre.
    let fwhm_init = (3.0 * step).clamp(step, span / 3.0);
    let mut p0: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    p0.extend(idx.iter().map(|&i| resid[i]));
    p0.extend(std::iter::repeat_n(fwhm_init, n));
    p0.push(bg_off);
    p0.push(bg_slope);
    let mut bounds = vec![(x[0], x[x.len() - 1]); n];
    bounds.extend(std::iter::repeat_n((f64::NEG_INFINITY, f64::INFINITY), n));
    bounds.extend(std::iter::repeat_n((0.5 * step, span), n));
    bounds.push((f64::NEG_INFINITY, f64::INFINITY));
    bounds.push((f64::NEG_INFINITY, f64::INFINITY));
    let mut model_fn = |p: &[f64]| -> Vec<f64> {
        let bg0 = p[3 * n];
        let bg1 = p[3 * n + 1];
        x.iter()
            .zip(y)
            .map(|(f, s)| {
                let mut v = bg0 + bg1 * f - s;
                for k in 0..n {
                    let lp = LorentzianParams {
                        center: p[k],
                        fwhm: p[2 * n + k],
                        amplitude: p[n + k],
                    };
                    v += lorentzian(*f, &lp);
                }
                v
            })
            .collect()
    };
    let lm = least_squares(&mut model_fn, &p0, Some(&bounds), &LsqOptions::default())?;
    let fit_resid = model_fn(&lm.params);
    let p = &lm.params;
    let mut peaks: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|k| (p[k], p[n + k], p[2 * n + k], lm.sigma(k)))
        .collect();
    peaks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    refine_nmr_centers(spec, &mut peaks);
    let centers: Vec<f64> = peaks.iter().map(|t| t.0).collect();
    let uncertainties: Vec<f64> = peaks.iter().map(|t| t.3).collect();
    let lorentzian_params: Vec<LorentzianParams> = peaks
        .iter()
        .map(|t| LorentzianParams {
            center: t.0,
            fwhm: t.2,
            amplitude: t.1,
        })
        .collect();

    let labels = match model {
        Some((sys, field)) => {
            let sol = diagonalize(sys, field)?;
            let catalog = transition_catalog(&sol, Channel::Nmr, 0.0)?;
            let lines: Vec<(f64, String)> = catalog
                .iter()
                .filter_map(|l| {
                    l.label
                        .clone()
                        .filter(|lb| numeral_pair(sys.i_nuclear, lb).is_some())
                        .map(|lb| (l.frequency, lb))
                })
                .collect();
            // A label is only assigned when the fitted centre falls within a
            // couple of linewidths of the predicted line; a peak that matches
            // nothing keeps a neutral name so downstream fits ignore it. The
            // upper clamp keeps the gate meaningful when saturation inflates
            // the fitted width.
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (pi, c) in centers.iter().enumerate() {
                let gate = (2.0 * lorentzian_params[pi].fwhm.abs()).clamp(2.0, 5.0);
                for (li, (f, _)) in lines.iter().enumerate() {
                    let d = (c - f).abs();
                    if d <= gate {
                        pairs.push((d, pi, li));
                    }
                }
            }
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
            let mut labels: Vec<Option<String>> = vec![None; n];
            let mut line_taken = vec![false; lines.len()];
            for (_, pi, li) in pairs {
                if labels[pi].is_none() && !line_taken[li] {
                    labels[pi] = Some(lines[li].1.clone());
                    line_taken[li] = true;
                }
            }
            labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| l.unwrap_or_else(|| format!("peak{}", i + 1)))
                .collect()
        }
        None => (1..=n).map(roman).collect(),
    };

    let peak_scale = peaks.iter().map(|t| t.1.abs()).fold(0.0_f64, f64::max);
    Ok(NmrPeakSet {
        b_z: spec.meta_f64("b_z").unwrap_or(f64::NAN),
        centers,
        labels,
        uncertainties,
        lorentzian_params,
        background: LinearBackground {
            offset: p[3 * n],
            slope: p[3 * n + 1],
        },
        fit_quality: lm.residual_norm,
        converged: lm.converged && significant_amplitude(peak_scale, &fit_resid, spec),
    })
}

// ---------------------------------------------------------------------------
// stage 5: hyperfine and quadrupole couplings from labelled nuclear lines
// ---------------------------------------------------------------------------

/// Axial hyperfine and quadrupole couplings fitted to labelled lines.
#[derive(Clone, Debug, Serialize)]
pub struct HyperfineQuadrupoleFit {
    /// Axial hyperfine coupling, MHz.
    pub a_z: f64,
    pub a_z_sigma: f64,
    /// Quadrupole coupling, MHz.
    pub kappa: f64,
    pub kappa_sigma: f64,
    pub residual_norm: f64,
    pub converged: bool,
}

struct LabelledLine {
    label: String,
    center: f64,
    weight: f64,
    /// +1 when the transition lives in the lower electron manifold.
    manifold_sign: f64,
    /// Quadrupole ladder factor 3(2m+1) / (4I(2I-1)) of the sublevel pair.
    quad_factor: f64,
}

/// Fit the axial hyperfine coupling and the quadrupole coupling to the
/// labelled nuclear line centres of one or more sweeps, holding the
/// electron g-factor, the tip-field vector and the nuclear g-factor fixed.
///
/// A first-order closed form seeds the optimiser (and a mirrored-sign
/// start guards against the quadratic sign ambiguity); the refinement uses
/// the full Hamiltonian. Label sets whose first-order design cannot
/// separate the two couplings (for example only the central lines, which
/// carry no quadrupole shift) are rejected.
pub fn fit_hyperfine_quadrupole(
    nmr_sets: &[NmrPeakSet],
    g_e_z: f64,
    b_tip: f64,
    phi: f64,
    g_n: f64,
    i_nuclear: HalfInt,
) -> Result<HyperfineQuadrupoleFit> {
    if i_nuclear.twice() < 2 {
        return Err(Error::invalid(
            "the quadrupole term vanishes for I < 1; the joint fit is undefined",
        ));
    }
    if !(g_e_z > 0.0) || !b_tip.is_finite() || !phi.is_finite() || !g_n.is_finite() {
        return Err(Error::invalid(
            "g_e_z must be positive and b_tip, phi, g_n finite",
        ));
    }
    let ival = i_nuclear.value();
    let quad_denom = 4.0 * ival * (2.0 * ival - 1.0);

    // Gather labelled observations grouped per sweep.
    let mut groups: Vec<(f64, Vec<LabelledLine>)> = Vec::new();
    let mut sigmas: Vec<f64> = Vec::new();
    for set in nmr_sets {
        if !set.b_z.is_finite() {
            return Err(Error::invalid("a nuclear peak set has no field tag"));
        }
        let mut entries = Vec::new();
        for (i, label) in set.labels.iter().enumerate() {
            if let Some((ms, mi_low)) = numeral_pair(i_nuclear, label) {
                entries.push(LabelledLine {
                    label: label.clone(),
                    center: set.centers[i],
                    weight: 1.0,
                    manifold_sign: -f64::from(ms.twice()),
                    quad_factor: 3.0 * (2.0 * mi_low.value() + 1.0) / quad_denom,
                });
                sigmas.push(set.uncertainties.get(i).copied().unwrap_or(0.0));
            }
        }
        if !entries.is_empty() {
            groups.push((set.b_z, entries));
        }
    }
    let n_obs: usize = groups.iter().map(|(_, e)| e.len()).sum();
    if n_obs < 2 {
        return Err(Error::invalid(
            "need at least two labelled nuclear lines to fit two couplings",
        ));
    }
    // Inverse-uncertainty weights when every observation carries one.
    if sigmas.iter().all(|s| s.is_finite() && *s > 0.0) {
        let mut k = 0;
        for (_, entries) in &mut groups {
            for e in entries {
                e.weight = 1.0 / sigmas[k];
                k += 1;
            }
        }
    }

    // First-order seed: f = a/2 - s*(z + kappa*g), linear in (a, kappa).
    let (mut m11, mut m12, mut m22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (b_z, entries) in &groups {
        let z = MU_N_MHZ_PER_T * g_n * b_z;
        for e in entries {
            let w2 = e.weight * e.weight;
            let d1 = 0.5;
            let d2 = -e.manifold_sign * e.quad_factor;
            let t = e.center + e.manifold_sign * z;
            m11 += w2 * d1 * d1;
            m12 += w2 * d1 * d2;
            m22 += w2 * d2 * d2;
            r1 += w2 * d1 * t;
            r2 += w2 * d2 * t;
        }
    }
    let det = m11 * m22 - m12 * m12;
    if det <= 1e-9 * (m11 * m22).max(1e-300) {
        return Err(Error::invalid(
            "the labelled lines cannot separate the hyperfine and quadrupole couplings \
             (rank-deficient design at first order)",
        ));
    }
    let a0 = ((m22 * r1 - m12 * r2) / det).clamp(1.0, 1e4);
    let k0 = ((m11 * r2 - m12 * r1) / det).clamp(-1e3, 1e3);

    let model = |p: &[f64]| -> Vec<f64> {
        let sys = SpinSystem {
            s_electron: HalfInt::from_twice(1),
            i_nuclear,
            g_e: [g_e_z; 3],
            g_n,
            a_hyperfine: [
                TRANSVERSE_HYPERFINE_RATIO * p[0],
                TRANSVERSE_HYPERFINE_RATIO * p[0],
                p[0],
            ],
            kappa: p[1],
            eta: 0.0,
        };
        let mut out = Vec::with_capacity(n_obs);
        for (b_z, entries) in &groups {
            let field = FieldConfig {
                b_ext: [0.0, 0.0, *b_z],
                b_tip,
                phi,
                theta: 0.0,
                tip_couples_nucleus: false,
            };
            let catalog = diagonalize(&sys, &field)
                .and_then(|sol| transition_catalog(&sol, Channel::Nmr, 0.0));
            match catalog {
                Ok(lines) => {
                    for e in entries {
                        match find_line(&lines, &e.label) {
                            Some(l) => out.push((l.frequency - e.center) * e.weight),
                            None => out.push(1e6),
                        }
                    }
                }
                Err(_) => out.extend(std::iter::repeat_n(1e9, entries.len())),
            }
        }
        out
    };
    let bounds = vec![(1.0, 1e4), (-1e3, 1e3)];
    let mut starts = vec![[a0, k0]];
    if k0.abs() > 1e-6 {
        starts.push([a0, -k0]);
    }
    let mut best: Option<crate::numerics::LeastSquaresResult> = None;
    let mut first_err: Option<Error> = None;
    for s in &starts {
        match least_squares(model, s, Some(&bounds), &LsqOptions::default()) {
            Ok(r) => {
                if best
                    .as_ref()
                    .map(|b| r.residual_norm < b.residual_norm)
                    .unwrap_or(true)
                {
                    best = Some(r);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    let lm = match best {
        Some(r) => r,
        None => return Err(first_err.unwrap_or_else(|| Error::invalid("no fit attempted"))),
    };
    Ok(HyperfineQuadrupoleFit {
        a_z: lm.params[0],
        a_z_sigma: lm.sigma(0),
        kappa: lm.params[1],
        kappa_sigma: lm.sigma(1),
        residual_norm: lm.residual_norm,
        converged: lm.converged,
    })
}

// ---------------------------------------------------------------------------
// the outer recursion
// ---------------------------------------------------------------------------

/// Starting values taken from prior knowledge of the isotope.
#[derive(Clone, Debug)]
pub struct Literature {
    /// Starting axial hyperfine coupling, MHz.
    pub a_z_init: f64,
    /// Starting quadrupole coupling, MHz. Its sign and rough size anchor
    /// the line labelling on the first pass, before the data refine it.
    pub kappa_init: f64,
    /// Nuclear g-factor, held fixed during the loop and refit at the end
    /// from the field dependence of line I.
    pub g_n: f64,
    pub i_nuclear: HalfInt,
}

impl Default for Literature {
    fn default() -> Self {
        Literature {
            a_z_init: 130.0,
            kappa_init: -52.0,
            g_n: 0.315,
            i_nuclear: HalfInt::from_twice(5),
        }
    }
}

/// One pass of the stage 3–5 loop.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub b_tip: f64,
    pub phi: f64,
    pub a_z: f64,
    pub kappa: f64,
    /// Largest relative change of (b_tip, phi, a_z, kappa) in this pass.
    pub max_rel_change: f64,
}

/// Residual norm of one pipeline stage, for the report.
#[derive(Clone, Debug, Serialize)]
pub struct StageResidual {
    pub stage: String,
    pub residual_norm: f64,
}

/// Full output of [`recursive_calibration`].
#[derive(Clone, Debug, Serialize)]
pub struct CalibrationResult {
    pub g_e_z: f64,
    pub g_e_z_sigma: f64,
    /// Out-of-plane tip-field projection from the linear fit, tesla.
    pub b_tip_z: f64,
    pub b_tip_z_sigma: f64,
    /// Tip-field magnitude from the pattern fit, tesla.
    pub b_tip: f64,
    pub b_tip_sigma: f64,
    /// Tip-field tilt, radians.
    pub phi: f64,
    pub phi_sigma: f64,
    /// Axial hyperfine coupling, MHz.
    pub a_z: f64,
    pub a_z_sigma: f64,
    /// Quadrupole coupling, MHz.
    pub kappa: f64,
    pub kappa_sigma: f64,
    /// Per-level quadrupole scale kappa / (2I(2I-1)), MHz.
    pub q_derived: f64,
    pub g_n: f64,
    pub g_n_sigma: f64,
    /// Number of stage 3–5 passes that ran.
    pub iterations: usize,
    pub converged: bool,
    /// True when parts of the pipeline could not run (a single-field
    /// electron set or missing nuclear sweeps); the unfitted entries keep
    /// their starting values.
    pub partial: bool,
    pub tip_at_bound: bool,
    pub history: Vec<IterationRecord>,
    pub stage_residuals: Vec<StageResidual>,
    pub esr_peaks: Vec<EsrPeakSet>,
    pub nmr_peaks: Vec<NmrPeakSet>,
}

fn wrap_stage(stage: usize, name: &str, e: Error) -> Error {
    let wrap = |s: String| format!("stage {stage} ({name}): {s}");
    match e {
        Error::InvalidArgument(s) => Error::InvalidArgument(wrap(s)),
        Error::NoConvergence(s) => Error::NoConvergence(wrap(s)),
        Error::NotDefined(s) => Error::NotDefined(wrap(s)),
    }
}

fn quad_scale(kappa: f64, i_nuclear: HalfInt) -> f64 {
    let i = i_nuclear.value();
    let d = 2.0 * i * (2.0 * i - 1.0);
    if d > 0.0 {
        kappa / d
    } else {
        0.0
    }
}

/// Count the extrema of a sweep that clear three times the robust noise
/// level, clamped to `1..=cap`: the line count handed to the nuclear fit.
/// Erring on the high side is safe — an extra weak line picks up a large
/// centre uncertainty and barely weighs on the coupling fit.
fn count_significant_extrema(spec: &Spectrum, cap: usize) -> usize {
    let x = &spec.frequencies;
    let resid = smoothed(&detrended(spec));
    let span = x[x.len() - 1] - x[0];
    let min_sep = 0.5 * span / (cap as f64 + 1.0);
    // Only genuine interior local extrema of the magnitude count as line
    // candidates; [`detect_extrema`] pads its result to the requested number
    // of indexes, and a filler landing on the flank of a strong line would
    // inflate the count.
    let mut cands = local_extrema_indices(&resid);
    cands.sort_by(|&i, &j| {
        resid[j]
            .abs()
            .partial_cmp(&resid[i].abs())
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in cands {
        if kept.iter().all(|&k| (x[i] - x[k]).abs() >= min_sep) {
            kept.push(i);
        }
    }
    let scale = kept
        .iter()
        .map(|&i| resid[i].abs())
        .fold(1e-300_f64, f64::max);
    // The relative floor keeps baseline wiggles and window-edge leftovers
    // from being promoted to lines on very clean data.
    let thresh = (3.0 * noise_estimate(spec)).max(0.15 * scale);
    kept.iter()
        .filter(|&&i| resid[i].abs() >= thresh)
        .count()
        .clamp(1, cap)
}

fn distinct_fields(values: &[f64]) -> usize {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    1 + v
        .windows(2)
        .filter(|w| (w[1] - w[0]).abs() > 1e-12 * w[1].abs().max(1.0))
        .count()
}

/// Run the full staged calibration on electron sweeps (`esr_data`) and
/// double-resonance sweeps (`nmr_data`), both tagged with their field via
/// `b_z` metadata.
///
/// Stages 1 and 2 run once; stages 3–5 loop until the largest relative
/// change of (b_tip, phi, a_z, kappa) drops below 1e-4, the change stops
/// shrinking for three passes (flagged as not converged), or ten passes
/// elapse. With a single electron field or no nuclear sweeps the result is
/// returned `partial`, keeping literature values for the unfitted entries.
/// The nuclear g-factor stays fixed during the loop and is refit at the end
/// from the field dependence of line I when two or more fields carry it.
pub fn recursive_calibration(
    esr_data: &[Spectrum],
    nmr_data: &[Spectrum],
    lit: &Literature,
) -> Result<CalibrationResult> {
    if esr_data.is_empty() {
        return Err(Error::invalid("no electron sweeps supplied"));
    }
    if !(lit.a_z_init > 0.0) || !lit.a_z_init.is_finite() {
        return Err(Error::invalid("a_z_init must be positive and finite"));
    }
    if !lit.kappa_init.is_finite() || !lit.g_n.is_finite() {
        return Err(Error::invalid("kappa_init and g_n must be finite"));
    }
    if lit.i_nuclear.twice() < 0 {
        return Err(Error::invalid("i_nuclear must be nonnegative"));
    }
    let n_lines = lit.i_nuclear.multiplicity().max(1);

    // Stage 1: one constrained multiplet fit per electron sweep.
    let mut esr_peaks: Vec<EsrPeakSet> = Vec::with_capacity(esr_data.len());
    for spec in esr_data {
        if spec.meta_f64("b_z").is_none() {
            return Err(wrap_stage(
                1,
                "electron peaks",
                Error::invalid("an electron sweep is missing its b_z metadata"),
            ));
        }
        let set = fit_esr_peaks(spec, n_lines, EsrConstraint::EqualSpacingBoltzmann)
            .map_err(|e| wrap_stage(1, "electron peaks", e))?;
        if !set.converged {
            return Err(wrap_stage(
                1,
                "electron peaks",
                Error::NoConvergence(format!(
                    "the electron sweep at b_z = {} T did not yield {} significant lines",
                    set.b_z, n_lines
                )),
            ));
        }
        esr_peaks.push(refine_esr_peaks(spec, &set));
    }
    let stage1_residual = esr_peaks
        .iter()
        .map(|s| s.fit_quality * s.fit_quality)
        .sum::<f64>()
        .sqrt();

    let mut result = CalibrationResult {
        g_e_z: 0.0,
        g_e_z_sigma: 0.0,
        b_tip_z: 0.0,
        b_tip_z_sigma: 0.0,
        b_tip: 0.0,
        b_tip_sigma: 0.0,
        phi: 0.0,
        phi_sigma: 0.0,
        a_z: lit.a_z_init,
        a_z_sigma: 0.0,
        kappa: lit.kappa_init,
        kappa_sigma: 0.0,
        q_derived: quad_scale(lit.kappa_init, lit.i_nuclear),
        g_n: lit.g_n,
        g_n_sigma: 0.0,
        iterations: 0,
        converged: false,
        partial: true,
        tip_at_bound: false,
        history: Vec::new(),
        stage_residuals: vec![StageResidual {
            stage: "1: electron peaks".into(),
            residual_norm: stage1_residual,
        }],
        esr_peaks: esr_peaks.clone(),
        nmr_peaks: Vec::new(),
    };

    let bz_values: Vec<f64> = esr_peaks.iter().map(|s| s.b_z).collect();
    if distinct_fields(&bz_values) < 2 {
        // A single field cannot separate g from the tip projection.
        return Ok(result);
    }

    // Stage 2: linear Zeeman fit of the pattern centres.
    let points: Vec<(f64, f64)> = esr_peaks.iter().map(|s| (s.b_z, s.center_f0)).collect();
    let f0_sigmas: Vec<f64> = esr_peaks.iter().map(|s| s.f0_sigma).collect();
    let use_sigmas = f0_sigmas.iter().all(|s| s.is_finite() && *s > 0.0);
    let zeeman = fit_f0_linear(&points, use_sigmas.then_some(f0_sigmas.as_slice()))
        .map_err(|e| wrap_stage(2, "field-linear pattern centre", e))?;
    result.g_e_z = zeeman.g_e_z;
    result.g_e_z_sigma = zeeman.g_e_z_sigma;
    result.b_tip_z = zeeman.b_tip_z;
    result.b_tip_z_sigma = zeeman.b_tip_z_sigma;
    result.stage_residuals.push(StageResidual {
        stage: "2: field-linear pattern centre".into(),
        residual_norm: zeeman.residual_norm,
    });

    if nmr_data.is_empty() {
        // No nuclear sweeps: refine the tip field once and stop.
        let tip = fit_tip_field(&esr_peaks, result.g_e_z, lit.a_z_init, result.b_tip_z)
            .map_err(|e| wrap_stage(3, "tip-field refinement", e))?;
        result.b_tip = tip.b_tip;
        result.b_tip_sigma = tip.b_tip_sigma;
        result.phi = tip.phi;
        result.phi_sigma = tip.phi_sigma;
        result.tip_at_bound = tip.at_bound;
        result.iterations = 1;
        result.stage_residuals.push(StageResidual {
            stage: "3: tip-field refinement".into(),
            residual_norm: tip.residual_norm,
        });
        return Ok(result);
    }
    for spec in nmr_data {
        if spec.meta_f64("b_z").is_none() {
            return Err(wrap_stage(
                4,
                "nuclear peaks",
                Error::invalid("a nuclear sweep is missing its b_z metadata"),
            ));
        }
    }

    // Stage 3-5 loop, run as nuclear peaks -> couplings -> tip refinement:
    // the fresh axial coupling feeds the tip fit within the same pass, so
    // the whole chain settles one lap sooner than tip-first ordering would.
    // The first pass labels nuclear lines with the stage-2 projection spread
    // over the nominal tilt.
    let mut a_z = lit.a_z_init;
    let mut kappa = lit.kappa_init;
    let mut b_tip_cur = (result.b_tip_z / PHI_INIT_RAD.cos()).max(0.0);
    let mut phi_cur = PHI_INIT_RAD;
    let mut converged = false;
    let mut changes: Vec<f64> = Vec::new();
    let mut tip_last: Option<TipFieldFit> = None;
    let mut sets_last: Vec<NmrPeakSet> = Vec::new();
    let mut hq_last: Option<HyperfineQuadrupoleFit> = None;

    for iteration in 1..=MAX_OUTER_ITERATIONS {
        let sys_model = SpinSystem {
            s_electron: HalfInt::from_twice(1),
            i_nuclear: lit.i_nuclear,
            g_e: [result.g_e_z; 3],
            g_n: lit.g_n,
            a_hyperfine: [
                TRANSVERSE_HYPERFINE_RATIO * a_z,
                TRANSVERSE_HYPERFINE_RATIO * a_z,
                a_z,
            ],
            kappa,
            eta: 0.0,
        };
        let mut nmr_sets: Vec<NmrPeakSet> = Vec::with_capacity(nmr_data.len());
        for spec in nmr_data {
            let b_z = spec.meta_f64("b_z").unwrap_or(f64::NAN);
            let field = FieldConfig {
                b_ext: [0.0, 0.0, b_z],
                b_tip: b_tip_cur,
                phi: phi_cur,
                theta: 0.0,
                tip_couples_nucleus: false,
            };
            let n_peaks = count_significant_extrema(spec, 4);
            let set = fit_nmr_peaks(spec, n_peaks, Some((&sys_model, &field)))
                .map_err(|e| wrap_stage(4, "nuclear peaks", e))?;
            nmr_sets.push(set);
        }
        let usable: Vec<NmrPeakSet> = nmr_sets.iter().filter(|s| s.converged).cloned().collect();
        if usable.is_empty() {
            return Err(wrap_stage(
                4,
                "nuclear peaks",
                Error::NoConvergence("no nuclear sweep produced significant lines".into()),
            ));
        }

        let hq = fit_hyperfine_quadrupole(
            &usable,
            result.g_e_z,
            b_tip_cur,
            phi_cur,
            lit.g_n,
            lit.i_nuclear,
        )
        .map_err(|e| wrap_stage(5, "hyperfine and quadrupole couplings", e))?;
        if !hq.converged {
            return Err(wrap_stage(
                5,
                "hyperfine and quadrupole couplings",
                Error::NoConvergence("the coupling fit stalled".into()),
            ));
        }

        let tip = fit_tip_field(&esr_peaks, result.g_e_z, hq.a_z, b_tip_cur)
            .map_err(|e| wrap_stage(3, "tip-field refinement", e))?;
        if !tip.converged {
            return Err(wrap_stage(
                3,
                "tip-field refinement",
                Error::NoConvergence("the tip-field refinement stalled".into()),
            ));
        }

        // The tilt is a nearly flat direction of the electron pattern (it
        // enters quadratically), so it keeps drifting by amplified echoes
        // of already-negligible coupling updates; convergence is judged on
        // the parameters that actually feed back into the other stages.
        let rel = |new: f64, old: f64| (new - old).abs() / new.abs().max(old.abs()).max(1e-12);
        let change = rel(tip.b_tip, b_tip_cur)
            .max(rel(hq.a_z, a_z))
            .max(rel(hq.kappa, kappa));
        b_tip_cur = tip.b_tip;
        phi_cur = tip.phi;
        a_z = hq.a_z;
        kappa = hq.kappa;
        result.history.push(IterationRecord {
            iteration,
            b_tip: b_tip_cur,
            phi: phi_cur,
            a_z,
            kappa,
            max_rel_change: change,
        });
        changes.push(change);
        tip_last = Some(tip);
        sets_last = nmr_sets;
        hq_last = Some(hq);

        if change < OUTER_REL_TOL {
            converged = true;
            break;
        }
        let k = changes.len();
        if k >= 3 && changes[k - 1] >= changes[k - 2] && changes[k - 2] >= changes[k - 3] {
            // The loop has stopped contracting: report the state, flagged.
            break;
        }
    }

    let tip = tip_last.expect("at least one pass ran");
    let hq = hq_last.expect("at least one pass ran");
    result.b_tip = tip.b_tip;
    result.b_tip_sigma = tip.b_tip_sigma;
    result.phi = tip.phi;
    result.phi_sigma = tip.phi_sigma;
    result.tip_at_bound = tip.at_bound;
    result.a_z = hq.a_z;
    result.a_z_sigma = hq.a_z_sigma;
    result.kappa = hq.kappa;
    result.kappa_sigma = hq.kappa_sigma;
    result.q_derived = quad_scale(hq.kappa, lit.i_nuclear);
    result.iterations = result.history.len();
    result.converged = converged;
    result.partial = false;
    result.stage_residuals.push(StageResidual {
        stage: "3: tip-field refinement".into(),
        residual_norm: tip.residual_norm,
    });
    result.stage_residuals.push(StageResidual {
        stage: "4: nuclear peaks".into(),
        residual_norm: sets_last
            .iter()
            .map(|s| s.fit_quality * s.fit_quality)
            .sum::<f64>()
            .sqrt(),
    });
    result.stage_residuals.push(StageResidual {
        stage: "5: hyperfine and quadrupole couplings".into(),
        residual_norm: hq.residual_norm,
    });

    // Final pass: refit the nuclear g-factor from the field dependence of
    // line I when at least two fields carry it.
    let mut g_points: Vec<(f64, f64)> = Vec::new();
    let mut g_sigmas: Vec<f64> = Vec::new();
    for set in sets_last.iter().filter(|s| s.converged) {
        for (i, label) in set.labels.iter().enumerate() {
            if label == "I" {
                g_points.push((set.b_z, set.centers[i]));
                g_sigmas.push(set.uncertainties.get(i).copied().unwrap_or(0.0));
            }
        }
    }
    let g_bz: Vec<f64> = g_points.iter().map(|p| p.0).collect();
    if distinct_fields(&g_bz) >= 2 {
        let use_s = g_sigmas.iter().all(|s| s.is_finite() && *s > 0.0);
        if let Ok(gf) = fit_nuclear_g(&g_points, use_s.then_some(g_sigmas.as_slice())) {
            result.g_n = gf.g_n;
            result.g_n_sigma = gf.g_n_sigma;
        }
    }
    result.nmr_peaks = sets_last;
    Ok(result)
}
