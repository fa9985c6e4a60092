//! Effective spin Hamiltonian of a coupled electron–nucleus pair, its
//! eigenstructure, and derived spectroscopic quantities.
//!
//! Units: energies in MHz (E/h), magnetic fields in tesla, angles in
//! radians. The product basis is ordered electron-outer, nucleus-inner,
//! with magnetic quantum numbers descending (m = j first), so index 0 is
//! |m_s = +S, m_I = +I⟩.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    angular_momentum_ops_exact, eigh, kron, m_ladder, ComplexMatrix, EigenSolution, HalfInt,
};
use crate::{Error, Result, MU_B_MHZ_PER_T, MU_N_MHZ_PER_T};

/// Physical parameters of the coupled electron–nucleus spin pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    pub s_electron: HalfInt,
    pub i_nuclear: HalfInt,
    /// Diagonal electron g-tensor (x, y, z), dimensionless.
    pub g_e: [f64; 3],
    /// Nuclear g-factor, dimensionless.
    pub g_n: f64,
    /// Diagonal hyperfine tensor (x, y, z) in MHz.
    pub a_hyperfine: [f64; 3],
    /// Quadrupole coupling constant in MHz.
    pub kappa: f64,
    /// Quadrupole asymmetry, in [0, 1].
    pub eta: f64,
}

impl SpinSystem {
    /// Hydrogenated Ti-47 on a bridge-bound oxygen site: the parameter set
    /// recovered by the calibration pipeline and used throughout the docs.
    /// The transverse hyperfine components are not independently measured;
    /// they default to A_z/10 as a documented assumption.
    pub fn ti47() -> Self {
        SpinSystem {
            s_electron: HalfInt::from_twice(1),
            i_nuclear: HalfInt::from_twice(5),
            g_e: [0.56, 0.56, 0.56],
            g_n: 0.315,
            a_hyperfine: [13.21, 13.21, 132.1],
            kappa: -56.7,
            eta: 0.0,
        }
    }

    /// Spin-zero isotope variant (single ESR line, no NMR): control case.
    pub fn spinless_isotope() -> Self {
        SpinSystem {
            i_nuclear: HalfInt::from_twice(0),
            g_n: 0.0,
            a_hyperfine: [0.0; 3],
            kappa: 0.0,
            ..Self::ti47()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_electron.twice() < 0 || self.i_nuclear.twice() < 0 {
            return Err(Error::invalid("spin quantum numbers must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!(
                "eta = {} must lie in [0, 1]",
                self.eta
            )));
        }
        for (name, v) in [
            ("g_e", &self.g_e[..]),
            ("a_hyperfine", &self.a_hyperfine[..]),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("{name} has a non-finite component")));
            }
        }
        if !self.g_n.is_finite() || !self.kappa.is_finite() {
            return Err(Error::invalid("g_n and kappa must be finite"));
        }
        Ok(())
    }

    /// Hilbert-space dimension (2S+1)(2I+1).
    pub fn dim(&self) -> usize {
        self.s_electron.multiplicity() * self.i_nuclear.multiplicity()
    }

    /// Product-basis labels (m_s, m_I), electron outer, both descending.
    pub fn basis_labels(&self) -> Vec<(HalfInt, HalfInt)> {
        let mut labels = Vec::with_capacity(self.dim());
        for ms in m_ladder(self.s_electron) {
            for mi in m_ladder(self.i_nuclear) {
                labels.push((ms, mi));
            }
        }
        labels
    }
}

/// External field plus the local tip field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// External field vector in tesla.
    pub b_ext: [f64; 3],
    /// Tip-field magnitude in tesla.
    pub b_tip: f64,
    /// Tip-field polar angle from z, radians, in [0, pi].
    pub phi: f64,
    /// Tip-field azimuthal angle, radians.
    pub theta: f64,
    /// Whether the tip field also enters the nuclear Zeeman term.
    pub tip_couples_nucleus: bool,
}

impl FieldConfig {
    /// Axial external field of magnitude `b_z`, no tip field.
    pub fn axial(b_z: f64) -> Self {
        FieldConfig {
            b_ext: [0.0, 0.0, b_z],
            b_tip: 0.0,
            phi: 0.0,
            theta: 0.0,
            tip_couples_nucleus: false,
        }
    }

    /// Tunnel-junction conditions matched to [`SpinSystem::ti47`]:
    /// B = 450 mT along z plus a 67.9 mT tip field tilted 5 degrees.
    pub fn probe_default() -> Self {
        FieldConfig {
            b_ext: [0.0, 0.0, 0.45],
            b_tip: 0.0679,
            phi: 5.0_f64.to_radians(),
            theta: 0.0,
            tip_couples_nucleus: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_ext.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("b_ext has a non-finite component"));
        }
        if !(self.b_tip >= 0.0) {
            return Err(Error::invalid(format!(
                "b_tip = {} must be nonnegative",
                self.b_tip
            )));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.phi) {
            return Err(Error::invalid(format!(
                "phi = {} must lie in [0, pi]",
                self.phi
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::invalid("theta must be finite"));
        }
        Ok(())
    }

    /// Tip-field vector b_tip * (sin phi cos theta, sin phi sin theta, cos phi).
    pub fn tip_vector(&self) -> [f64; 3] {
        [
            self.b_tip * self.phi.sin() * self.theta.cos(),
            self.b_tip * self.phi.sin() * self.theta.sin(),
            self.b_tip * self.phi.cos(),
        ]
    }

    pub fn with_b_z(&self, b_z: f64) -> Self {
        let mut f = self.clone();
        f.b_ext[2] = b_z;
        f
    }
}

/// One spectral line between two eigenstates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitionLine {
    pub from_index: usize,
    pub to_index: usize,
    /// |E_to - E_from| in MHz.
    pub frequency: f64,
    /// Squared transition matrix element of the drive operator.
    pub weight: f64,
    /// Change in ⟨S_z⟩ between the two eigenstates.
    pub delta_ms: f64,
    /// Change in ⟨I_z⟩ between the two eigenstates.
    pub delta_mi: f64,
    /// Roman numeral for single-quantum nuclear lines, "mI=…" for electron
    /// lines, descriptive tag otherwise.
    pub label: Option<String>,
}

/// Flip-flop admixture of one (m_I, m_I - 1) sublevel pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HybridizationReport {
    pub b_z: f64,
    /// (m_I, m_I - 1) of the admixed pair.
    pub pair: (HalfInt, HalfInt),
    /// |⟨↑, m_I - 1 | ψ⟩| for the predominantly |↓, m_I⟩ eigenstate.
    pub coefficient: f64,
}

/// Drive channel selecting which transition weights to report.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Esr,
    Nmr,
    All,
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esr" => Ok(Channel::Esr),
            "nmr" => Ok(Channel::Nmr),
            "all" => Ok(Channel::All),
            other => Err(Error::invalid(format!(
                "unknown channel '{other}' (expected esr, nmr, or all)"
            ))),
        }
    }
}

/// Default weight threshold below which transition lines are dropped.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-6;

fn quadrupole_diag(sys: &SpinSystem) -> [f64; 3] {
    if sys.kappa == 0.0 {
        return [0.0; 3];
    }
    let iv = sys.i_nuclear.value();
    let k = sys.kappa / (2.0 * iv * (2.0 * iv - 1.0));
    [
        -k * (1.0 - sys.eta) / 2.0,
        -k * (1.0 + sys.eta) / 2.0,
        k,
    ]
}

/// Assemble the effective Hamiltonian in MHz:
/// sum over axes of electron Zeeman (external + tip field), nuclear Zeeman,
/// diagonal hyperfine coupling, and the nuclear quadrupole term.
pub fn build_hamiltonian(sys: &SpinSystem, field: &FieldConfig) -> Result<ComplexMatrix> {
    sys.validate()?;
    field.validate()?;
    if sys.kappa != 0.0 && sys.i_nuclear.twice() < 2 {
        return Err(Error::invalid(format!(
            "quadrupole coupling is undefined for I = {} (needs I >= 1)",
            sys.i_nuclear
        )));
    }
    let e = angular_momentum_ops_exact(sys.s_electron);
    let n = angular_momentum_ops_exact(sys.i_nuclear);
    let id_e = ComplexMatrix::identity(e.dim());
    let id_n = ComplexMatrix::identity(n.dim());
    let btip = field.tip_vector();
    let qdiag = quadrupole_diag(sys);

    let e_axes = [&e.sx, &e.sy, &e.sz];
    let n_axes = [&n.sx, &n.sy, &n.sz];
    let mut h = ComplexMatrix::zeros(sys.dim());
    for i in 0..3 {
        let b_e = field.b_ext[i] + btip[i];
        let b_n = field.b_ext[i]
            + if field.tip_couples_nucleus {
                btip[i]
            } else {
                0.0
            };
        let re = |x: f64| Complex64::new(x, 0.0);
        if sys.g_e[i] * b_e != 0.0 {
            h.add_scaled(&kron(e_axes[i], &id_n), re(MU_B_MHZ_PER_T * sys.g_e[i] * b_e));
        }
        if sys.g_n * b_n != 0.0 {
            h.add_scaled(&kron(&id_e, n_axes[i]), re(MU_N_MHZ_PER_T * sys.g_n * b_n));
        }
        if sys.a_hyperfine[i] != 0.0 {
            h.add_scaled(&kron(e_axes[i], n_axes[i]), re(sys.a_hyperfine[i]));
        }
        if qdiag[i] != 0.0 {
            h.add_scaled(&kron(&id_e, &n_axes[i].matmul(n_axes[i])), re(qdiag[i]));
        }
    }
    Ok(h)
}

/// Diagonalize the system and attach product-basis labels.
pub fn diagonalize(sys: &SpinSystem, field: &FieldConfig) -> Result<EigenSolution> {
    let h = build_hamiltonian(sys, field)?;
    let mut sol = eigh(&h)?;
    sol.basis_labels = sys.basis_labels();
    Ok(sol)
}

/// For each eigenstate column, the product-basis index with largest overlap.
pub fn dominant_basis_of_eigenstates(sol: &EigenSolution) -> Vec<usize> {
    let n = sol.vectors.dim();
    (0..n)
        .map(|k| {
            let mut best = (0, -1.0);
            for b in 0..n {
                let ov = sol.vectors[(b, k)].norm_sqr();
                if ov > best.1 {
                    best = (b, ov);
                }
            }
            best.0
        })
        .collect()
}

/// For each product-basis index, the eigenstate with largest overlap.
pub fn dominant_eigenstate_of_basis(sol: &EigenSolution) -> Vec<usize> {
    let n = sol.vectors.dim();
    (0..n)
        .map(|b| {
            let mut best = (0, -1.0);
            for k in 0..n {
                let ov = sol.vectors[(b, k)].norm_sqr();
                if ov > best.1 {
                    best = (k, ov);
                }
            }
            best.0
        })
        .collect()
}

fn basis_index(labels: &[(HalfInt, HalfInt)], ms: HalfInt, mi: HalfInt) -> Option<usize> {
    labels.iter().position(|&(s, i)| s == ms && i == mi)
}

pub(crate) fn roman(n: usize) -> String {
    const VALS: [(usize, &str); 13] = [
        (1000, "M"),
        (900, "CM"),
        (500, "D"),
        (400, "CD"),
        (100, "C"),
        (90, "XC"),
        (50, "L"),
        (40, "XL"),
        (10, "X"),
        (9, "IX"),
        (5, "V"),
        (4, "IV"),
        (1, "I"),
    ];
    let mut out = String::new();
    let mut rest = n;
    for (v, s) in VALS {
        while rest >= v {
            out.push_str(s);
            rest -= v;
        }
    }
    out
}

/// Roman-numeral tag of a single-quantum nuclear line in the |m_s| = 1/2
/// system: pairs ordered from the bottom of the ladder up, odd numerals for
/// the lower (m_s = -1/2) manifold, even for the upper.
fn numeral_for(i_nuclear: HalfInt, ms: HalfInt, mi_low: HalfInt) -> Option<String> {
    if ms.twice().abs() != 1 {
        return None;
    }
    // pair index 0 = (-I, -I+1), counting upward.
    let pair_idx = (mi_low.twice() + i_nuclear.twice()) / 2;
    if pair_idx < 0 || mi_low.twice() >= i_nuclear.twice() {
        return None;
    }
    let base = 2 * pair_idx as usize;
    let ordinal = if ms.twice() < 0 { base + 1 } else { base + 2 };
    Some(roman(ordinal))
}

/// Inverse of the numeral assignment: the (m_s, lower m_I) pair a numeral
/// tag refers to, for the given nuclear spin.
pub fn numeral_pair(i_nuclear: HalfInt, numeral: &str) -> Option<(HalfInt, HalfInt)> {
    let pairs = i_nuclear.twice().max(0) as usize; // number of adjacent sublevel pairs
    (1..=2 * pairs).find_map(|n| {
        if roman(n) != numeral {
            return None;
        }
        let pair_idx = ((n - 1) / 2) as i32;
        let ms = HalfInt::from_twice(if n % 2 == 1 { -1 } else { 1 });
        let mi_low = HalfInt::from_twice(-i_nuclear.twice() + 2 * pair_idx);
        Some((ms, mi_low))
    })
}

struct EigenObservables {
    ms_expect: Vec<f64>,
    mi_expect: Vec<f64>,
    dominant: Vec<usize>,
}

fn observables(sol: &EigenSolution) -> Result<EigenObservables> {
    let n = sol.vectors.dim();
    if sol.basis_labels.len() != n {
        return Err(Error::invalid(
            "eigensolution has no product-basis labels; diagonalize the system first".to_string(),
        ));
    }
    let mut ms_expect = vec![0.0; n];
    let mut mi_expect = vec![0.0; n];
    for k in 0..n {
        for b in 0..n {
            let w = sol.vectors[(b, k)].norm_sqr();
            ms_expect[k] += w * sol.basis_labels[b].0.value();
            mi_expect[k] += w * sol.basis_labels[b].1.value();
        }
    }
    Ok(EigenObservables {
        ms_expect,
        mi_expect,
        dominant: dominant_basis_of_eigenstates(sol),
    })
}

/// Transition operators Sx⊗1 and 1⊗Ix in the product basis of `sol`.
fn drive_operators(sol: &EigenSolution) -> (ComplexMatrix, ComplexMatrix) {
    let (s, i) = sol.basis_labels[0];
    let e = angular_momentum_ops_exact(s);
    let n = angular_momentum_ops_exact(i);
    (
        kron(&e.sx, &ComplexMatrix::identity(n.dim())),
        kron(&ComplexMatrix::identity(e.dim()), &n.sx),
    )
}

/// Enumerate all eigenstate pairs, weighting each by the squared matrix
/// element of the corresponding transverse drive operator, and drop lines
/// weaker than `weight_floor`. Lines are sorted by ascending frequency.
pub fn transition_catalog(
    sol: &EigenSolution,
    channel: Channel,
    weight_floor: f64,
) -> Result<Vec<TransitionLine>> {
    let obs = observables(sol)?;
    let n = sol.vectors.dim();
    let (sx_full, ix_full) = drive_operators(sol);
    let mut lines = Vec::new();
    for from in 0..n {
        let col_from = sol.vectors.column(from);
        let sx_from = sx_full.apply(&col_from);
        let ix_from = ix_full.apply(&col_from);
        for to in (from + 1)..n {
            let col_to = sol.vectors.column(to);
            let esr_amp: Complex64 = col_to
                .iter()
                .zip(&sx_from)
                .map(|(a, b)| a.conj() * b)
                .sum();
            let nmr_amp: Complex64 = col_to
                .iter()
                .zip(&ix_from)
                .map(|(a, b)| a.conj() * b)
                .sum();
            let weight = match channel {
                Channel::Esr => esr_amp.norm_sqr(),
                Channel::Nmr => nmr_amp.norm_sqr(),
                Channel::All => esr_amp.norm_sqr() + nmr_amp.norm_sqr(),
            };
            if weight < weight_floor {
                continue;
            }
            let (ms_f, mi_f) = sol.basis_labels[obs.dominant[from]];
            let (ms_t, mi_t) = sol.basis_labels[obs.dominant[to]];
            let label = if ms_f == ms_t && (mi_f - mi_t).twice().abs() == 2 {
                let (s, i) = sol.basis_labels[0];
                let _ = s;
                let mi_low = if mi_f < mi_t { mi_f } else { mi_t };
                numeral_for(i, ms_f, mi_low)
            } else {
                None
            };
            lines.push(TransitionLine {
                from_index: from,
                to_index: to,
                frequency: (sol.values[to] - sol.values[from]).abs(),
                weight,
                delta_ms: obs.ms_expect[to] - obs.ms_expect[from],
                delta_mi: obs.mi_expect[to] - obs.mi_expect[from],
                label,
            });
        }
    }
    lines.sort_by(|a, b| {
        a.frequency
            .partial_cmp(&b.frequency)
            .unwrap()
            .then(a.from_index.cmp(&b.from_index))
            .then(a.to_index.cmp(&b.to_index))
    });
    Ok(lines)
}

/// The 2I+1 electron-flip lines (one per nuclear sublevel), ascending in
/// frequency, each tagged with its dominant m_I.
pub fn esr_frequencies(sys: &SpinSystem, field: &FieldConfig) -> Result<Vec<TransitionLine>> {
    if sys.s_electron.twice() != 1 {
        return Err(Error::invalid(format!(
            "electron-flip lines require S = 1/2, got S = {}",
            sys.s_electron
        )));
    }
    let sol = diagonalize(sys, field)?;
    let obs = observables(&sol)?;
    let by_basis = dominant_eigenstate_of_basis(&sol);
    let labels = &sol.basis_labels;
    let (sx_full, _) = drive_operators(&sol);
    let up = HalfInt::from_twice(1);
    let dn = HalfInt::from_twice(-1);

    let mut lines = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for mi in m_ladder(sys.i_nuclear) {
        let b_dn = basis_index(labels, dn, mi).unwrap();
        let b_up = basis_index(labels, up, mi).unwrap();
        let k_dn = by_basis[b_dn];
        let k_up = by_basis[b_up];
        if k_dn == k_up || !seen.insert((k_dn.min(k_up), k_dn.max(k_up))) {
            return Err(Error::NotDefined(format!(
                "degenerate spectrum: fewer than {} distinct electron-flip lines",
                sys.i_nuclear.multiplicity()
            )));
        }
        let col_dn = sol.vectors.column(k_dn);
        let col_up = sol.vectors.column(k_up);
        let amp: Complex64 = col_up
            .iter()
            .zip(sx_full.apply(&col_dn))
            .map(|(a, b)| a.conj() * b)
            .sum();
        let (from, to) = (k_dn.min(k_up), k_dn.max(k_up));
        lines.push(TransitionLine {
            from_index: from,
            to_index: to,
            frequency: (sol.values[to] - sol.values[from]).abs(),
            weight: amp.norm_sqr(),
            delta_ms: obs.ms_expect[k_up] - obs.ms_expect[k_dn],
            delta_mi: obs.mi_expect[k_up] - obs.mi_expect[k_dn],
            label: Some(format!("mI={mi}")),
        });
    }
    lines.sort_by(|a, b| a.frequency.partial_cmp(&b.frequency).unwrap());
    Ok(lines)
}

/// Flip-flop admixture of the predominantly |↓, m_i⟩ eigenstate onto
/// |↑, m_i - 1⟩. Errors when the product-basis picture has broken down
/// (largest overlap below 1/2).
pub fn hybridization_coefficient(
    sys: &SpinSystem,
    field: &FieldConfig,
    m_i: HalfInt,
) -> Result<HybridizationReport> {
    if sys.s_electron.twice() != 1 {
        return Err(Error::invalid("hybridization requires S = 1/2".to_string()));
    }
    let m_lower = m_i - HalfInt::from_twice(2);
    if m_i.twice() > sys.i_nuclear.twice() || m_lower.twice() < -sys.i_nuclear.twice() {
        return Err(Error::invalid(format!(
            "sublevel pair ({m_i}, {m_lower}) invalid for I = {}",
            sys.i_nuclear
        )));
    }
    let sol = diagonalize(sys, field)?;
    let labels = &sol.basis_labels;
    let b_dn = basis_index(labels, HalfInt::from_twice(-1), m_i).unwrap();
    let b_target = basis_index(labels, HalfInt::from_twice(1), m_lower).unwrap();
    let n = sol.vectors.dim();
    let (mut k_best, mut ov_best) = (0, -1.0);
    for k in 0..n {
        let ov = sol.vectors[(b_dn, k)].norm_sqr();
        if ov > ov_best {
            k_best = k;
            ov_best = ov;
        }
    }
    if ov_best < 0.5 {
        return Err(Error::NotDefined(format!(
            "hybridization too strong: largest overlap with the product state is {ov_best:.3} (< 0.5), \
             the product-basis description has broken down"
        )));
    }
    Ok(HybridizationReport {
        b_z: field.b_ext[2],
        pair: (m_i, m_lower),
        coefficient: sol.vectors[(b_target, k_best)].norm(),
    })
}

/// One grid point of a field sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub b_z: f64,
    /// Eigenvalues in ascending order, MHz.
    pub values: Vec<f64>,
    /// Numeral-tagged nuclear lines and mI-tagged electron lines, computed
    /// between continuity-tracked eigenstates.
    pub transitions: Vec<TransitionLine>,
    /// Flip-flop coefficient of the bottom sublevel pair, when defined.
    pub hybridization: Option<f64>,
}

/// Greedy one-to-one matching of current eigenvectors to reference columns
/// by descending overlap magnitude. Entry k of the result is the reference
/// column matched to current column k.
fn match_columns(reference: &ComplexMatrix, current: &ComplexMatrix) -> Vec<usize> {
    let n = reference.dim();
    let mut overlaps = Vec::with_capacity(n * n);
    for k in 0..n {
        for l in 0..n {
            let mut amp = Complex64::ZERO;
            for r in 0..n {
                amp += reference[(r, l)].conj() * current[(r, k)];
            }
            overlaps.push((amp.norm_sqr(), k, l));
        }
    }
    overlaps.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut cur_taken = vec![false; n];
    let mut ref_taken = vec![false; n];
    let mut map = vec![usize::MAX; n];
    for (_, k, l) in overlaps {
        if !cur_taken[k] && !ref_taken[l] {
            cur_taken[k] = true;
            ref_taken[l] = true;
            map[k] = l;
        }
    }
    map
}

/// Diagonalize along an ascending grid of axial field values, tracking
/// eigenstate identity between neighboring points by eigenvector overlap so
/// transition labels stay consistent through crossings.
pub fn field_sweep(
    sys: &SpinSystem,
    field_template: &FieldConfig,
    b_z_grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if b_z_grid.is_empty() {
        return Err(Error::invalid("field grid is empty"));
    }
    if b_z_grid.windows(2).any(|w| w[0] >= w[1]) && b_z_grid.len() > 1 {
        return Err(Error::invalid("field grid must be strictly ascending"));
    }
    let labels = sys.basis_labels();
    let n = sys.dim();
    let up = HalfInt::from_twice(1);
    let dn = HalfInt::from_twice(-1);
    let has_electron_pair = sys.s_electron.twice() == 1;

    // tracked[b] = eigenstate index currently identified with basis label b.
    let mut tracked: Vec<usize> = Vec::new();
    let mut prev_vectors: Option<ComplexMatrix> = None;
    let mut rows = Vec::with_capacity(b_z_grid.len());

    for &b_z in b_z_grid {
        let field = field_template.with_b_z(b_z);
        let sol = diagonalize(sys, &field)?;
        match &prev_vectors {
            None => {
                // Identify against the product basis itself.
                let ident = ComplexMatrix::identity(n);
                let to_basis = match_columns(&ident, &sol.vectors);
                tracked = vec![0; n];
                for k in 0..n {
                    tracked[to_basis[k]] = k;
                }
            }
            Some(prev) => {
                let to_prev = match_columns(prev, &sol.vectors);
                let mut new_tracked = vec![0; n];
                for k in 0..n {
                    // prev column to_prev[k] carried some basis label; find it.
                    let b = tracked.iter().position(|&e| e == to_prev[k]).unwrap();
                    new_tracked[b] = k;
                }
                tracked = new_tracked;
            }
        }

        let obs = observables(&sol)?;
        let (sx_full, ix_full) = drive_operators(&sol);
        let mut transitions = Vec::new();
        let mut push_line = |k_a: usize, k_b: usize, op: &ComplexMatrix, label: String| {
            let (from, to) = (k_a.min(k_b), k_a.max(k_b));
            let amp: Complex64 = sol
                .vectors
                .column(to)
                .iter()
                .zip(op.apply(&sol.vectors.column(from)))
                .map(|(a, b)| a.conj() * b)
                .sum();
            transitions.push(TransitionLine {
                from_index: from,
                to_index: to,
                frequency: (sol.values[to] - sol.values[from]).abs(),
                weight: amp.norm_sqr(),
                delta_ms: obs.ms_expect[to] - obs.ms_expect[from],
                delta_mi: obs.mi_expect[to] - obs.mi_expect[from],
                label: Some(label),
            });
        };

        if has_electron_pair {
            // Nuclear single-quantum lines in both manifolds.
            for ms in [dn, up] {
                for w in m_ladder(sys.i_nuclear).windows(2) {
                    let (hi, lo) = (w[0], w[1]);
                    let k_a = tracked[basis_index(&labels, ms, lo).unwrap()];
                    let k_b = tracked[basis_index(&labels, ms, hi).unwrap()];
                    if let Some(tag) = numeral_for(sys.i_nuclear, ms, lo) {
                        push_line(k_a, k_b, &ix_full, tag);
                    }
                }
            }
            // Electron lines per nuclear sublevel.
            for mi in m_ladder(sys.i_nuclear) {
                let k_a = tracked[basis_index(&labels, dn, mi).unwrap()];
                let k_b = tracked[basis_index(&labels, up, mi).unwrap()];
                push_line(k_a, k_b, &sx_full, format!("mI={mi}"));
            }
        }

        let hybridization = if has_electron_pair && sys.i_nuclear.twice() >= 1 {
            let m_i = HalfInt::from_twice(-sys.i_nuclear.twice() + 2);
            let k = tracked[basis_index(&labels, dn, m_i).unwrap()];
            let b_target =
                basis_index(&labels, up, m_i - HalfInt::from_twice(2)).unwrap();
            Some(sol.vectors[(b_target, k)].norm())
        } else {
            None
        };

        rows.push(SweepRow {
            b_z,
            values: sol.values.clone(),
            transitions,
            hybridization,
        });
        prev_vectors = Some(sol.vectors);
    }
    Ok(rows)
}

/// All lines whose dominant-label nuclear quantum numbers differ by 2 within
/// one electron manifold. Their frequencies telescope exactly into sums of
/// the two intervening single-quantum lines.
pub fn double_quantum_frequencies(sol: &EigenSolution) -> Result<Vec<TransitionLine>> {
    let obs = observables(sol)?;
    let n = sol.vectors.dim();
    let (_, ix_full) = drive_operators(sol);
    let mut lines = Vec::new();
    for from in 0..n {
        for to in (from + 1)..n {
            let (ms_f, mi_f) = sol.basis_labels[obs.dominant[from]];
            let (ms_t, mi_t) = sol.basis_labels[obs.dominant[to]];
            if ms_f != ms_t || (mi_f - mi_t).twice().abs() != 4 {
                continue;
            }
            let amp: Complex64 = sol
                .vectors
                .column(to)
                .iter()
                .zip(ix_full.apply(&sol.vectors.column(from)))
                .map(|(a, b)| a.conj() * b)
                .sum();
            let (lo, hi) = if mi_f < mi_t { (mi_f, mi_t) } else { (mi_t, mi_f) };
            lines.push(TransitionLine {
                from_index: from,
                to_index: to,
                frequency: (sol.values[to] - sol.values[from]).abs(),
                weight: amp.norm_sqr(),
                delta_ms: obs.ms_expect[to] - obs.ms_expect[from],
                delta_mi: obs.mi_expect[to] - obs.mi_expect[from],
                label: Some(format!("dq ms={ms_f} mI={lo}..{hi}")),
            });
        }
    }
    lines.sort_by(|a, b| a.frequency.partial_cmp(&b.frequency).unwrap());
    Ok(lines)
}

/// First-order estimate of the m_I → m_I + 1 nuclear line in the m_s
/// manifold: nuclear Zeeman + hyperfine offset + quadrupole ladder shift.
/// Returns a magnitude, like measured line positions.
pub fn first_order_nmr_frequency(
    sys: &SpinSystem,
    b_z: f64,
    m_s: HalfInt,
    m_i_lower: HalfInt,
) -> f64 {
    let m = m_i_lower.value();
    let iv = sys.i_nuclear.value();
    let quad = if sys.kappa == 0.0 {
        0.0
    } else {
        3.0 * sys.kappa / (4.0 * iv * (2.0 * iv - 1.0)) * ((m + 1.0).powi(2) - m * m)
    };
    (MU_N_MHZ_PER_T * sys.g_n * b_z + sys.a_hyperfine[2] * m_s.value() + quad).abs()
}

/// Look up a labeled line in a catalog.
pub fn find_line<'a>(lines: &'a [TransitionLine], label: &str) -> Option<&'a TransitionLine> {
    lines.iter().find(|l| l.label.as_deref() == Some(label))
}
