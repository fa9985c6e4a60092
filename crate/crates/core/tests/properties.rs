//! Property-based invariants of the engine: structural facts that must hold
//! for whole parameter regions, not just the shipped reference point.

use endor_core::lineshapes::{
    add_noise, apply_transfer, synth_esr_spectrum, EsrSynthesis, LineShape, LinearBackground,
    PopulationSource, Spectrum, TransferTable,
};
use endor_core::numerics::{eigh, least_squares, ComplexMatrix, HalfInt, LsqOptions};
use endor_core::pumping::{build_rate_matrix, steady_state, PumpConfig};
use endor_core::spinmodel::{
    build_hamiltonian, diagonalize, double_quantum_frequencies, transition_catalog, Channel,
    FieldConfig, SpinSystem,
};
use num_complex::Complex64;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn arb_system() -> impl Strategy<Value = SpinSystem> {
    (
        0u8..=2,
        (0.1f64..4.0, 0.1f64..4.0, 0.1f64..4.0),
        -1.5f64..1.5,
        (-200.0f64..200.0, -200.0f64..200.0, -200.0f64..200.0),
        -100.0f64..100.0,
        0.0f64..1.0,
    )
        .prop_map(|(i_step, g_e, g_n, a, kappa, eta)| SpinSystem {
            s_electron: HalfInt::from_twice(1),
            // I in {1/2, 3/2, 5/2}; the quadrupole term needs I >= 1 and is
            // zeroed by the builder otherwise, which the map respects.
            i_nuclear: HalfInt::from_twice(1 + 2 * i_step as i32),
            g_e: [g_e.0, g_e.1, g_e.2],
            g_n,
            a_hyperfine: [a.0, a.1, a.2],
            kappa: if i_step == 0 { 0.0 } else { kappa },
            eta,
        })
}

fn arb_field() -> impl Strategy<Value = FieldConfig> {
    (
        (-2.0f64..2.0, -2.0f64..2.0, 0.05f64..2.0),
        0.0f64..0.3,
        0.0f64..std::f64::consts::PI,
        -3.0f64..3.0,
        any::<bool>(),
    )
        .prop_map(|(b, b_tip, phi, theta, couples)| FieldConfig {
            b_ext: [b.0, b.1, b.2],
            b_tip,
            phi,
            theta,
            tip_couples_nucleus: couples,
        })
}

/// Random Hermitian matrix with entries of order `scale`.
fn arb_hermitian(dim: usize, scale: f64) -> impl Strategy<Value = ComplexMatrix> {
    proptest::collection::vec(
        (-1.0f64..1.0, -1.0f64..1.0),
        dim * dim,
    )
    .prop_map(move |raw| {
        let full = ComplexMatrix::from_fn(dim, |i, j| {
            let (re, im) = raw[i * dim + j];
            Complex64::new(scale * re, scale * im)
        });
        ComplexMatrix::from_fn(dim, |i, j| {
            (full[(i, j)] + full[(j, i)].conj()) * 0.5
        })
    })
}

fn max_abs_diff(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    let n = a.dim();
    let mut w = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            w = w.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The assembled Hamiltonian is Hermitian for any valid system and
    /// field configuration.
    #[test]
    fn hamiltonian_is_hermitian(sys in arb_system(), field in arb_field()) {
        let h = build_hamiltonian(&sys, &field).unwrap();
        prop_assert!(h.max_hermiticity_violation() <= 1e-10 * h.frobenius_norm().max(1.0));
    }

    /// The eigensolver returns an orthonormal basis that reconstructs its
    /// input, with eigenvalues in ascending order.
    #[test]
    fn eigh_orthonormal_and_reconstructs(
        dim in 2usize..=8,
        scale in 0.1f64..1e4,
        seed_h in arb_hermitian(8, 1.0),
    ) {
        let h = ComplexMatrix::from_fn(dim, |i, j| seed_h[(i, j)] * Complex64::from(scale));
        let sol = eigh(&h).unwrap();

        prop_assert!(sol.values.windows(2).all(|w| w[0] <= w[1]));

        let gram = sol.vectors.dagger().matmul(&sol.vectors);
        prop_assert!(max_abs_diff(&gram, &ComplexMatrix::identity(dim)) <= 1e-10);

        let mut d = ComplexMatrix::zeros(dim);
        for k in 0..dim {
            d[(k, k)] = sol.values[k].into();
        }
        let rebuilt = sol.vectors.matmul(&d).matmul(&sol.vectors.dagger());
        prop_assert!(max_abs_diff(&rebuilt, &h) <= 1e-9 * scale.max(1.0));
    }

    /// On 2x2 Hermitian matrices the eigenvalues match the closed form
    /// (a+d)/2 +/- sqrt(((a-d)/2)^2 + |b|^2).
    #[test]
    fn eigh_two_by_two_closed_form(
        a in -1e3f64..1e3,
        d in -1e3f64..1e3,
        b_re in -1e3f64..1e3,
        b_im in -1e3f64..1e3,
    ) {
        let b = Complex64::new(b_re, b_im);
        let h = ComplexMatrix::from_rows(&[
            vec![Complex64::from(a), b],
            vec![b.conj(), Complex64::from(d)],
        ]);
        let sol = eigh(&h).unwrap();
        let mid = (a + d) / 2.0;
        let rad = (((a - d) / 2.0).powi(2) + b.norm_sqr()).sqrt();
        let scale = a.abs().max(d.abs()).max(b.norm()).max(1.0);
        prop_assert!((sol.values[0] - (mid - rad)).abs() <= 1e-10 * scale);
        prop_assert!((sol.values[1] - (mid + rad)).abs() <= 1e-10 * scale);
    }

    /// The pumped steady state is a probability distribution annihilated by
    /// the generator.
    #[test]
    fn steady_state_is_stationary(
        b_z in 0.2f64..1.5,
        log_down in 4.0f64..6.5,
        log_up in 3.5f64..6.0,
        log_ff in 3.0f64..5.0,
        asym in 0.0f64..0.9,
        omega_esr in 0.0f64..1e6,
        omega_nmr in 0.0f64..1e6,
    ) {
        let sys = SpinSystem::ti47();
        let field = FieldConfig::probe_default().with_b_z(b_z);
        let cfg = PumpConfig {
            gamma_e_down: 10f64.powf(log_down),
            gamma_e_up: 10f64.powf(log_up),
            gamma_ff: 10f64.powf(log_ff),
            ff_asymmetry: asym,
            omega_esr,
            omega_nmr,
            ..PumpConfig::default()
        };
        let m = build_rate_matrix(&sys, &field, &cfg).unwrap();
        let p = steady_state(&m).unwrap();

        let total: f64 = p.probabilities.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(p.probabilities.iter().all(|&x| x >= 0.0));

        let flow = m.apply(&p.probabilities);
        let max_rate = m
            .generator
            .iter()
            .flatten()
            .fold(0.0f64, |w, &x| w.max(x.abs()))
            .max(1.0);
        prop_assert!(flow.iter().all(|&x| x.abs() <= 1e-10 * max_rate));
    }

    /// Electron-sweep synthesis is linear in the sublevel weights: the
    /// background-subtracted signal of a weighted sum of populations equals
    /// the weighted sum of the individual signals.
    #[test]
    fn esr_synthesis_linear_in_populations(
        w1 in proptest::collection::vec(0.0f64..2.0, 6),
        w2 in proptest::collection::vec(0.0f64..2.0, 6),
        alpha in 0.0f64..3.0,
        beta in 0.0f64..3.0,
        q in 0.5f64..10.0,
    ) {
        let sys = SpinSystem::ti47();
        let field = FieldConfig::probe_default();
        let synth = EsrSynthesis {
            fwhm: 8.0,
            shape: LineShape::Fano { q },
            amplitude: 1.0,
            background: LinearBackground { offset: 0.3, slope: 1e-4 },
        };
        let grid: Vec<f64> = (0..=300).map(|k| 3650.0 + 2.5 * k as f64).collect();
        let synth_of = |w: Vec<f64>| {
            synth_esr_spectrum(&sys, &field, &PopulationSource::Explicit(w), &synth, &grid)
                .unwrap()
                .signal
        };

        let mixed: Vec<f64> = w1
            .iter()
            .zip(&w2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let s1 = synth_of(w1);
        let s2 = synth_of(w2);
        let sm = synth_of(mixed);

        for ((&y1, &y2), (&ym, &f)) in s1.iter().zip(&s2).zip(sm.iter().zip(&grid)) {
            let bg = synth.background.at(f);
            let expect = alpha * (y1 - bg) + beta * (y2 - bg) + bg;
            prop_assert!(
                (ym - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                "at {f} MHz: {ym} vs {expect}"
            );
        }
    }

    /// Double-quantum frequencies telescope into their two single-quantum
    /// constituents at any field and tilt, not just the reference point.
    #[test]
    fn double_quantum_lines_telescope_anywhere(
        b_z in 0.05f64..2.0,
        b_tip in 0.0f64..0.15,
        phi_deg in 0.0f64..20.0,
    ) {
        let sys = SpinSystem::ti47();
        let field = FieldConfig {
            b_tip,
            phi: phi_deg.to_radians(),
            ..FieldConfig::probe_default().with_b_z(b_z)
        };
        let sol = diagonalize(&sys, &field).unwrap();
        let single = transition_catalog(&sol, Channel::Nmr, 0.0).unwrap();
        for dq in double_quantum_frequencies(&sol).unwrap() {
            let mut matched = 0usize;
            for a in single.iter().filter(|a| a.from_index == dq.from_index) {
                for b in single
                    .iter()
                    .filter(|b| b.from_index == a.to_index && b.to_index == dq.to_index)
                {
                    matched += 1;
                    prop_assert!(
                        (dq.frequency - (a.frequency + b.frequency)).abs() <= 1e-9,
                        "{:?} does not telescope at b_z = {b_z}",
                        dq.label
                    );
                }
            }
            prop_assert!(matched == 1, "{:?}: {matched} chains", dq.label);
        }
    }

    /// Junction transfer scales amplitudes by an interpolated ratio bounded
    /// by the neighbouring knots, and reproduces the knots exactly.
    #[test]
    fn transfer_table_interpolates_within_knots(
        raw in proptest::collection::vec((0.0f64..500.0, 0.05f64..1.5), 2..10),
        amp in 0.0f64..10.0,
        f in -50.0f64..600.0,
    ) {
        let mut knots = raw;
        knots.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        knots.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-6);
        let table = TransferTable::new(knots.clone()).unwrap();

        for &(kf, kr) in &knots {
            prop_assert!((apply_transfer(1.0, kf, &table) - kr).abs() <= 1e-12);
        }

        let lo = knots.iter().map(|k| k.1).fold(f64::INFINITY, f64::min);
        let hi = knots.iter().map(|k| k.1).fold(0.0f64, f64::max);
        let out = apply_transfer(amp, f, &table);
        prop_assert!(out >= amp * lo - 1e-12 && out <= amp * hi + 1e-12);
    }

    /// Least squares recovers a straight line through exact data from a
    /// cold start.
    #[test]
    fn least_squares_recovers_straight_line(
        slope in -10.0f64..10.0,
        intercept in -10.0f64..10.0,
        n in 8usize..40,
    ) {
        let xs: Vec<f64> = (0..n).map(|k| k as f64 * 0.5).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| intercept + slope * x).collect();
        let fit = least_squares(
            |p: &[f64]| {
                xs.iter()
                    .zip(&ys)
                    .map(|(&x, &y)| p[0] + p[1] * x - y)
                    .collect()
            },
            &[0.0, 0.0],
            None,
            &LsqOptions::default(),
        )
        .unwrap();
        prop_assert!(fit.converged);
        let scale = slope.abs().max(intercept.abs()).max(1.0);
        prop_assert!((fit.params[0] - intercept).abs() <= 1e-6 * scale);
        prop_assert!((fit.params[1] - slope).abs() <= 1e-6 * scale);
    }

    /// Seeded noise is reproducible, seed-sensitive, and vanishes at zero
    /// amplitude.
    #[test]
    fn noise_is_seeded_and_scaled(
        seed in any::<u64>(),
        sigma in 0.001f64..0.5,
    ) {
        let grid: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let signal: Vec<f64> = grid.iter().map(|&f| (0.05 * f).sin()).collect();
        let spec = Spectrum::new(grid, signal, BTreeMap::new()).unwrap();

        let a = add_noise(&spec, sigma, seed).unwrap();
        let b = add_noise(&spec, sigma, seed).unwrap();
        prop_assert!(a.signal == b.signal, "same seed must reproduce the same sweep");

        let c = add_noise(&spec, sigma, seed.wrapping_add(1)).unwrap();
        prop_assert!(a.signal != c.signal, "different seeds must differ");

        let clean = add_noise(&spec, 0.0, seed).unwrap();
        prop_assert!(clean.signal == spec.signal, "zero sigma must be the identity");
    }

    /// Half-integer arithmetic is consistent with its integer encoding.
    #[test]
    fn half_int_arithmetic_matches_encoding(a in -20i32..20, b in -20i32..20) {
        let x = HalfInt::from_twice(a);
        let y = HalfInt::from_twice(b);
        prop_assert!((x + y).twice() == a + b);
        prop_assert!((x - y).twice() == a - b);
        prop_assert!((-x).twice() == -a);
        prop_assert!((x.value() - a as f64 / 2.0).abs() == 0.0);
        if a >= 0 {
            prop_assert!(x.multiplicity() == (a + 1) as usize);
        }
    }
}
