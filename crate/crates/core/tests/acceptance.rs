//! End-to-end acceptance checks of the engine at its reference operating
//! point: line positions, multiplet structure, field dependence, pumping
//! behaviour, full-campaign calibration, and the numerical kernels.
//!
//! Each test prints one `PASS:` line with the measured numbers when its
//! assertions hold, so a full run reads as a checklist.

use endor_core::calibration::{fit_nuclear_g, recursive_calibration, Literature};
use endor_core::dataset::{synthesize_dataset, DatasetConfig};
use endor_core::lineshapes::{synth_endor_spectrum, EndorSynthesis};
use endor_core::numerics::{angular_momentum_ops, eigh, least_squares, ComplexMatrix, HalfInt, LsqOptions};
use endor_core::pumping::{
    build_rate_matrix, build_rate_matrix_with, endor_signal, evolve_rk4,
    population_ratio_vs_drive, steady_state, PumpConfig, StatePair,
};
use endor_core::spinmodel::{
    build_hamiltonian, diagonalize, double_quantum_frequencies, esr_frequencies, find_line,
    hybridization_coefficient, transition_catalog, Channel, FieldConfig, SpinSystem,
    DEFAULT_WEIGHT_FLOOR,
};
use num_complex::Complex64;

fn dn() -> HalfInt {
    HalfInt::from_twice(-1)
}

fn up() -> HalfInt {
    HalfInt::from_twice(1)
}

fn mi(twice: i32) -> HalfInt {
    HalfInt::from_twice(twice)
}

/// Nuclear single-quantum lines at the reference field sit where they
/// should: line I near 49.3 MHz, line II near 85 MHz (both within 3 MHz),
/// and the (-3/2, -1/2) doublet III/IV between them, straddling half the
/// axial hyperfine coupling.
#[test]
fn nuclear_transition_frequencies_at_reference_field() {
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();
    let sol = diagonalize(&sys, &field).unwrap();
    let catalog = transition_catalog(&sol, Channel::Nmr, DEFAULT_WEIGHT_FLOOR).unwrap();

    let f = |label: &str| find_line(&catalog, label).unwrap().frequency;
    let (f1, f2, f3, f4) = (f("I"), f("II"), f("III"), f("IV"));

    assert!(
        (f1 - 49.3).abs() <= 3.0,
        "line I at {f1:.4} MHz, expected 49.3 +/- 3 MHz"
    );
    assert!(
        (f2 - 85.0).abs() <= 3.0,
        "line II at {f2:.4} MHz, expected 85 +/- 3 MHz"
    );
    for (name, fx) in [("III", f3), ("IV", f4)] {
        assert!(
            f1 < fx && fx < f2,
            "line {name} at {fx:.4} MHz not between I ({f1:.4}) and II ({f2:.4})"
        );
    }
    let half_a = sys.a_hyperfine[2] / 2.0;
    assert!(
        f3 < half_a && half_a < f4,
        "III ({f3:.4}) and IV ({f4:.4}) do not straddle A_z/2 = {half_a:.3} MHz"
    );

    println!(
        "PASS: nuclear lines I = {f1:.4} MHz, II = {f2:.4} MHz; III = {f3:.4}, IV = {f4:.4} \
         straddle A_z/2 = {half_a:.3} MHz"
    );
}

/// The electron spectrum is a six-line hyperfine multiplet starting in the
/// 3.6-3.9 GHz window with a mean adjacent spacing equal to the axial
/// hyperfine coupling within 2 MHz.
#[test]
fn electron_multiplet_six_lines_and_hyperfine_spacing() {
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();
    let lines = esr_frequencies(&sys, &field).unwrap();

    assert_eq!(lines.len(), 6, "expected exactly six electron lines");
    let first = lines[0].frequency;
    assert!(
        (3600.0..=3900.0).contains(&first),
        "first electron line at {first:.2} MHz, expected within [3600, 3900] MHz"
    );
    let mean_spacing = (lines[5].frequency - lines[0].frequency) / 5.0;
    assert!(
        (mean_spacing - 132.1).abs() <= 2.0,
        "mean adjacent spacing {mean_spacing:.3} MHz, expected 132.1 +/- 2 MHz"
    );

    println!(
        "PASS: six electron lines, first at {first:.2} MHz, mean spacing {mean_spacing:.3} MHz"
    );
}

/// The per-level quadrupole scale kappa / (2I(2I-1)) derived from the
/// shipped coupling equals -2.835 MHz and sits inside the -2.8 +/- 0.8 MHz
/// reference band.
#[test]
fn quadrupole_level_scale_from_coupling() {
    let sys = SpinSystem::ti47();
    let i = sys.i_nuclear.value();
    let q_derived = sys.kappa / (2.0 * i * (2.0 * i - 1.0));

    assert!(
        (q_derived - (-2.835)).abs() < 1e-12,
        "q_derived = {q_derived} MHz, expected -2.835 MHz exactly from kappa = {}",
        sys.kappa
    );
    assert!(
        (q_derived - (-2.8)).abs() <= 0.8,
        "q_derived = {q_derived} MHz outside -2.8 +/- 0.8 MHz"
    );

    println!("PASS: quadrupole level scale q = {q_derived:.4} MHz (band -2.8 +/- 0.8 MHz)");
}

/// The flip-flop admixture of the bottom sublevel pair decreases strictly
/// with field over 0.2-1.4 T, shrinking by a factor of 4-15 across the
/// range.
#[test]
fn flip_flop_admixture_decreases_with_field() {
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();
    let fields: Vec<f64> = (0..=12).map(|k| 0.2 + 0.1 * k as f64).collect();
    let coeffs: Vec<f64> = fields
        .iter()
        .map(|&b| {
            hybridization_coefficient(&sys, &field.with_b_z(b), mi(-3))
                .unwrap()
                .coefficient
        })
        .collect();

    for (w, pair) in coeffs.windows(2).zip(fields.windows(2)) {
        assert!(
            w[1] < w[0],
            "coefficient not strictly decreasing: c({:.1} T) = {:.6}, c({:.1} T) = {:.6}",
            pair[0],
            w[0],
            pair[1],
            w[1]
        );
    }
    let ratio = coeffs[0] / coeffs[coeffs.len() - 1];
    assert!(
        (4.0..=15.0).contains(&ratio),
        "endpoint reduction factor {ratio:.3} outside [4, 15]"
    );

    println!(
        "PASS: flip-flop coefficient falls from {:.5} (0.2 T) to {:.5} (1.4 T), factor {:.2}",
        coeffs[0],
        coeffs[coeffs.len() - 1],
        ratio
    );
}

/// The staged calibration recovers the generating parameters of the bundled
/// synthetic campaign: on the noisy set (5% of range, seeded) within
/// 2% / 2% / 1% / 5% for g_e_z / B_tip_z / A_z / kappa in at most five
/// passes; on the noise-free set within 0.1% for g_e_z, A_z and kappa and
/// 0.5% for both tip-field measures in at most three passes.
#[test]
fn recursive_calibration_recovers_ground_truth() {
    let truth = SpinSystem::ti47();
    let g_true = truth.g_e[2];
    let a_true = truth.a_hyperfine[2];
    let kappa_true = truth.kappa;
    let tip = FieldConfig::probe_default();
    let btz_true = tip.b_tip * tip.phi.cos();
    let bt_true = tip.b_tip;
    let rel = |x: f64, t: f64| (x - t).abs() / t.abs();

    // Noisy campaign.
    let noisy = synthesize_dataset(&DatasetConfig::default()).unwrap();
    let r = recursive_calibration(&noisy.esr, &noisy.endor, &Literature::default()).unwrap();
    assert!(r.converged, "noisy calibration did not converge");
    assert!(!r.partial, "noisy calibration was partial");
    assert!(
        r.iterations <= 5,
        "noisy calibration took {} passes (> 5)",
        r.iterations
    );
    assert!(
        rel(r.g_e_z, g_true) <= 0.02,
        "noisy g_e_z = {} vs {} (> 2%)",
        r.g_e_z,
        g_true
    );
    assert!(
        rel(r.b_tip_z, btz_true) <= 0.02,
        "noisy b_tip_z = {} vs {} (> 2%)",
        r.b_tip_z,
        btz_true
    );
    assert!(
        rel(r.a_z, a_true) <= 0.01,
        "noisy a_z = {} vs {} (> 1%)",
        r.a_z,
        a_true
    );
    assert!(
        rel(r.kappa, kappa_true) <= 0.05,
        "noisy kappa = {} vs {} (> 5%)",
        r.kappa,
        kappa_true
    );
    let noisy_iters = r.iterations;
    let noisy_summary = format!(
        "g {:+.2}%, B_tip_z {:+.2}%, A_z {:+.2}%, kappa {:+.2}%",
        100.0 * (r.g_e_z / g_true - 1.0),
        100.0 * (r.b_tip_z / btz_true - 1.0),
        100.0 * (r.a_z / a_true - 1.0),
        100.0 * (r.kappa / kappa_true - 1.0),
    );

    // Noise-free campaign.
    let clean = synthesize_dataset(&DatasetConfig::noise_free()).unwrap();
    let r = recursive_calibration(&clean.esr, &clean.endor, &Literature::default()).unwrap();
    assert!(r.converged, "noise-free calibration did not converge");
    assert!(
        r.iterations <= 3,
        "noise-free calibration took {} passes (> 3)",
        r.iterations
    );
    for (name, got, want, tol) in [
        ("g_e_z", r.g_e_z, g_true, 1e-3),
        ("a_z", r.a_z, a_true, 1e-3),
        ("kappa", r.kappa, kappa_true, 1e-3),
        ("b_tip_z", r.b_tip_z, btz_true, 5e-3),
        ("b_tip", r.b_tip, bt_true, 5e-3),
    ] {
        assert!(
            rel(got, want) <= tol,
            "noise-free {name} = {got} vs {want} (relative {:.2e} > {tol:.0e})",
            rel(got, want)
        );
    }

    println!(
        "PASS: calibration noisy ({noisy_iters} passes: {noisy_summary}); noise-free \
         ({} passes: g {:+.4}%, A_z {:+.4}%, kappa {:+.4}%, B_tip_z {:+.3}%, B_tip {:+.3}%)",
        r.iterations,
        100.0 * (r.g_e_z / g_true - 1.0),
        100.0 * (r.a_z / a_true - 1.0),
        100.0 * (r.kappa / kappa_true - 1.0),
        100.0 * (r.b_tip_z / btz_true - 1.0),
        100.0 * (r.b_tip / bt_true - 1.0),
    );
}

/// Line I computed from the full Hamiltonian moves linearly with field at
/// the nuclear Zeeman rate: |slope| = 2.40 +/- 0.36 MHz/T over 0.2-1.4 T.
#[test]
fn nuclear_line_field_slope_tracks_zeeman() {
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();
    let points: Vec<(f64, f64)> = (0..=12)
        .map(|k| {
            let b = 0.2 + 0.1 * k as f64;
            let sol = diagonalize(&sys, &field.with_b_z(b)).unwrap();
            let catalog = transition_catalog(&sol, Channel::Nmr, DEFAULT_WEIGHT_FLOOR).unwrap();
            (b, find_line(&catalog, "I").unwrap().frequency)
        })
        .collect();
    let fit = fit_nuclear_g(&points, None).unwrap();
    let slope = fit.slope_mhz_per_t.abs();

    assert!(
        (slope - 2.40).abs() <= 0.36,
        "line-I slope magnitude {slope:.4} MHz/T outside 2.40 +/- 0.36 MHz/T"
    );

    println!(
        "PASS: line I moves at {:.4} MHz/T across 0.2-1.4 T (band 2.40 +/- 0.36)",
        fit.slope_mhz_per_t
    );
}

/// Radio-frequency drive reshapes the nuclear sublevel populations the way
/// a double-resonance measurement relies on: a saturating drive on the pair
/// of line I equalizes the -5/2 and -3/2 occupations within 1%, a drive on
/// the (-3/2, -1/2) pair of lines III/IV strictly drains the -5/2 readout,
/// and with no drive at all the scan is flat.
#[test]
fn nuclear_drive_reshapes_sublevel_populations() {
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();

    // Readout configuration: electron drive on the -5/2 line, no nuclear
    // drive yet.
    let readout = PumpConfig {
        omega_esr: 2e5,
        esr_pair: ((dn(), mi(-5)), (up(), mi(-5))),
        omega_nmr: 0.0,
        ..PumpConfig::default()
    };
    let baseline = steady_state(&build_rate_matrix(&sys, &field, &readout).unwrap()).unwrap();
    let signal_base = endor_signal(&baseline, mi(-5));

    // (a) Saturating drive on the pair of line I: (-5/2 <-> -3/2), electron
    // down. The electron readout drive stays off here: it pumps the probed
    // sublevel asymmetrically and would bias the very populations under
    // test.
    let drive_i = PumpConfig {
        omega_esr: 0.0,
        omega_nmr: 1e9,
        nmr_pair: ((dn(), mi(-5)), (dn(), mi(-3))),
        ..readout.clone()
    };
    let pop = steady_state(&build_rate_matrix(&sys, &field, &drive_i).unwrap()).unwrap();
    let (m5, m3) = (pop.marginal_mi(mi(-5)), pop.marginal_mi(mi(-3)));
    let imbalance = (m5 - m3).abs() / m5.max(m3);
    assert!(
        imbalance <= 0.01,
        "saturating line-I drive leaves marginals {m5:.5} vs {m3:.5} ({:.2}% apart)",
        100.0 * imbalance
    );

    // (b) Drive on the (-3/2, -1/2) pair in both electron manifolds (lines
    // III and IV) strictly reduces the -5/2 readout.
    let extra: Vec<(StatePair, f64)> = vec![
        (((dn(), mi(-3)), (dn(), mi(-1))), 1e6),
        (((up(), mi(-3)), (up(), mi(-1))), 1e6),
    ];
    let pop = steady_state(&build_rate_matrix_with(&sys, &field, &readout, &extra).unwrap())
        .unwrap();
    let signal_remote = endor_signal(&pop, mi(-5));
    assert!(
        signal_remote < signal_base,
        "remote-pair drive did not reduce the -5/2 signal: {signal_remote:.6} vs {signal_base:.6}"
    );

    // (c) Zero nuclear drive: the synthesized double-resonance scan is flat.
    let esr_lines = esr_frequencies(&sys, &field).unwrap();
    let grid: Vec<f64> = (0..=200).map(|k| 40.0 + 0.25 * k as f64).collect();
    let spec = synth_endor_spectrum(
        &sys,
        &field,
        esr_lines[0].frequency,
        &grid,
        &readout,
        &EndorSynthesis::default(),
    )
    .unwrap();
    let (lo, hi) = spec
        .signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    assert!(
        hi - lo <= 1e-12 * hi.abs().max(1e-300),
        "undriven scan is not flat: spans [{lo}, {hi}]"
    );

    println!(
        "PASS: line-I saturation balances -5/2/-3/2 to {:.3}%; III/IV drive drops the -5/2 \
         signal {:.4} -> {:.4}; undriven scan flat to {:.1e}",
        100.0 * imbalance,
        signal_base,
        signal_remote,
        hi - lo
    );
}

/// The electron population ratio on the probed sublevel rises monotonically
/// with the readout drive rate and saturates at unity.
#[test]
fn electron_population_ratio_saturates() {
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();
    let cfg = PumpConfig::default();
    let grid: Vec<f64> = std::iter::once(0.0)
        .chain((2..=11).map(|k| 10f64.powi(k)))
        .collect();
    let curve = population_ratio_vs_drive(&sys, &field, &cfg, &grid).unwrap();

    for w in curve.windows(2) {
        assert!(
            w[1].1 >= w[0].1 - 1e-12,
            "ratio decreased: {:?} -> {:?}",
            w[0],
            w[1]
        );
    }
    let first = curve[0].1;
    let last = curve[curve.len() - 1].1;
    assert!(
        last > 0.99 && last <= 1.0 + 1e-9,
        "saturated ratio {last:.6} does not approach 1"
    );

    println!(
        "PASS: P_up/P_down rises monotonically {first:.4} -> {last:.6} over drive 0-1e11 /s"
    );
}

/// Every double-quantum line telescopes exactly: its frequency equals the
/// sum of the two single-quantum lines that span the same sublevel interval.
#[test]
fn double_quantum_frequencies_telescope() {
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();
    let sol = diagonalize(&sys, &field).unwrap();
    let single = transition_catalog(&sol, Channel::Nmr, 0.0).unwrap();
    let double = double_quantum_frequencies(&sol).unwrap();

    // Two electron manifolds, four adjacent m_I pairs each.
    assert_eq!(double.len(), 8, "expected eight double-quantum lines");

    let mut worst = 0.0f64;
    for dq in &double {
        let chain: Vec<f64> = single
            .iter()
            .filter(|a| a.from_index == dq.from_index)
            .flat_map(|a| {
                single
                    .iter()
                    .filter(move |b| b.from_index == a.to_index && b.to_index == dq.to_index)
                    .map(move |b| a.frequency + b.frequency)
            })
            .collect();
        assert_eq!(
            chain.len(),
            1,
            "no unique single-quantum chain for {:?}",
            dq.label
        );
        let err = (dq.frequency - chain[0]).abs();
        worst = worst.max(err);
        assert!(
            err <= 1e-9,
            "{:?}: double-quantum {:.9} MHz vs chained {:.9} MHz (err {err:.2e})",
            dq.label,
            dq.frequency,
            chain[0]
        );
    }

    println!(
        "PASS: all 8 double-quantum lines telescope into single-quantum sums (worst error \
         {worst:.2e} MHz)"
    );
}

/// The numerical kernels meet their accuracy budgets: spin-operator algebra
/// to 1e-12, eigendecomposition orthonormality to 1e-10 and reconstruction
/// to 1e-9, least-squares recovery of exact data to 1e-5, and the
/// steady-state solver against direct time integration to 1e-6.
#[test]
fn numerical_kernels_meet_tolerances() {
    // Spin-operator algebra for the shipped nucleus: [Jx, Jy] = i Jz and
    // cyclic permutations, plus the Casimir invariant.
    let ops = angular_momentum_ops(2.5).unwrap();
    let n = ops.sx.dim();
    let max_abs = |m: &ComplexMatrix| {
        let mut w = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                w = w.max(m[(i, j)].norm());
            }
        }
        w
    };
    let sub = |a: &ComplexMatrix, b: &ComplexMatrix| {
        ComplexMatrix::from_fn(n, |i, j| a[(i, j)] - b[(i, j)])
    };
    let mut algebra_err = 0.0f64;
    for (a, b, c) in [
        (&ops.sx, &ops.sy, &ops.sz),
        (&ops.sy, &ops.sz, &ops.sx),
        (&ops.sz, &ops.sx, &ops.sy),
    ] {
        let comm = sub(&a.matmul(b), &b.matmul(a));
        algebra_err = algebra_err.max(max_abs(&sub(&comm, &c.scaled(Complex64::I))));
    }
    let mut cas = ComplexMatrix::zeros(n);
    for m in [&ops.sx, &ops.sy, &ops.sz] {
        let sq = m.matmul(m);
        for i in 0..n {
            for j in 0..n {
                cas[(i, j)] += sq[(i, j)];
            }
        }
    }
    let expect = 2.5 * 3.5;
    let cas_err = max_abs(&sub(&cas, &ComplexMatrix::identity(n).scaled(expect.into())));
    assert!(
        algebra_err <= 1e-12,
        "commutation error {algebra_err:.2e} > 1e-12"
    );
    assert!(cas_err <= 1e-12, "Casimir error {cas_err:.2e} > 1e-12");

    // Eigendecomposition of the full reference Hamiltonian.
    let sys = SpinSystem::ti47();
    let field = FieldConfig::probe_default();
    let h = build_hamiltonian(&sys, &field).unwrap();
    let dim = h.dim();
    let sol = eigh(&h).unwrap();
    let vt_v = sol.vectors.dagger().matmul(&sol.vectors);
    let mut ortho_err = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            let want = if i == j { 1.0 } else { 0.0 };
            ortho_err = ortho_err.max((vt_v[(i, j)] - Complex64::from(want)).norm());
        }
    }
    assert!(
        ortho_err <= 1e-10,
        "eigenvector orthonormality error {ortho_err:.2e} > 1e-10"
    );
    let mut d = ComplexMatrix::zeros(dim);
    for k in 0..dim {
        d[(k, k)] = sol.values[k].into();
    }
    let rebuilt = sol.vectors.matmul(&d).matmul(&sol.vectors.dagger());
    let mut recon_err = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            recon_err = recon_err.max((rebuilt[(i, j)] - h[(i, j)]).norm());
        }
    }
    assert!(
        recon_err <= 1e-9,
        "eigendecomposition reconstruction error {recon_err:.2e} > 1e-9"
    );

    // Least squares on exact data: recover a Lorentzian profile from a
    // detuned start.
    let truth = [30.0, 2.0, 5.0]; // center, amplitude, fwhm
    let grid: Vec<f64> = (0..=240).map(|k| 0.25 * k as f64).collect();
    let profile = |p: &[f64], f: f64| {
        let half = p[2] / 2.0;
        p[1] * half * half / ((f - p[0]) * (f - p[0]) + half * half)
    };
    let data: Vec<f64> = grid.iter().map(|&f| profile(&truth, f)).collect();
    let fit = least_squares(
        |p: &[f64]| {
            grid.iter()
                .zip(&data)
                .map(|(&f, &y)| profile(p, f) - y)
                .collect()
        },
        &[27.0, 1.4, 3.2],
        None,
        &LsqOptions::default(),
    )
    .unwrap();
    assert!(fit.converged, "least squares did not converge");
    let mut lsq_err = 0.0f64;
    for (got, want) in fit.params.iter().zip(truth) {
        lsq_err = lsq_err.max((got - want).abs() / want);
    }
    assert!(
        lsq_err <= 1e-5,
        "least-squares recovery error {lsq_err:.2e} > 1e-5"
    );

    // Steady state against direct Runge-Kutta integration of the same
    // generator. The pump rates are chosen with modest stiffness so the
    // explicit integrator reaches the stationary point quickly.
    let pump = PumpConfig {
        gamma_e_down: 1e4,
        gamma_e_up: 5e3,
        gamma_ff: 5e8,
        ff_asymmetry: 0.5,
        omega_esr: 2e4,
        esr_pair: ((dn(), mi(-5)), (up(), mi(-5))),
        omega_nmr: 1e4,
        nmr_pair: ((dn(), mi(-5)), (dn(), mi(-3))),
    };
    let m = build_rate_matrix(&sys, &field, &pump).unwrap();
    let stationary = steady_state(&m).unwrap();
    let dim = stationary.probabilities.len();
    let p0 = vec![1.0 / dim as f64; dim];
    let evolved = evolve_rk4(&m, &p0, 1.2e-2, 480_000);
    let mut ss_err = 0.0f64;
    for (a, b) in evolved.iter().zip(&stationary.probabilities) {
        ss_err = ss_err.max((a - b).abs());
    }
    assert!(
        ss_err <= 1e-6,
        "steady state vs time integration differ by {ss_err:.2e} > 1e-6"
    );

    println!(
        "PASS: kernels within budget (algebra {algebra_err:.1e}/{cas_err:.1e}, eigh \
         {ortho_err:.1e}/{recon_err:.1e}, lsq {lsq_err:.1e}, steady-state {ss_err:.1e})"
    );
}
