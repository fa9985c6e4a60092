//! Classical rate-equation model over the (m_s, m_I) product states:
//! spin-polarized electron pumping, hybridization-scaled flip-flop
//! relaxation, and resonant ESR/NMR drives, solved for steady-state
//! populations.
//!
//! The generator convention is column-stochastic: `generator[i][j]` is the
//! rate from state j into state i (1/s), columns summing to zero, so
//! populations evolve as dp/dt = G p.

use serde::{Deserialize, Serialize};

use crate::numerics::HalfInt;
use crate::spinmodel::{hybridization_coefficient, FieldConfig, SpinSystem};
use crate::{Error, Result};

/// A product-basis state addressed by its quantum numbers.
pub type StateLabel = (HalfInt, HalfInt);

/// An unordered pair of product-basis states a drive couples.
pub type StatePair = (StateLabel, StateLabel);

/// Rates of the pumping model. All rates in 1/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PumpConfig {
    /// Electron relaxation (↑, m) → (↓, m).
    pub gamma_e_down: f64,
    /// Electron excitation (↓, m) → (↑, m).
    pub gamma_e_up: f64,
    /// Base flip-flop rate; each (↑, m) ↔ (↓, m+1) link is scaled by the
    /// squared hybridization coefficient of its pair.
    pub gamma_ff: f64,
    /// Directional bias in [0, 1]: the m_I-lowering direction of each
    /// flip-flop link is weighted (1 + bias), the reverse (1 - bias),
    /// producing net polarization toward m_I = -I.
    pub ff_asymmetry: f64,
    /// Symmetric ESR drive rate on `esr_pair`.
    pub omega_esr: f64,
    pub esr_pair: StatePair,
    /// Symmetric NMR drive rate on `nmr_pair`.
    pub omega_nmr: f64,
    pub nmr_pair: StatePair,
}

impl Default for PumpConfig {
    fn default() -> Self {
        let dn = HalfInt::from_twice(-1);
        let up = HalfInt::from_twice(1);
        let m52 = HalfInt::from_twice(-5);
        let m32 = HalfInt::from_twice(-3);
        PumpConfig {
            gamma_e_down: 1e6,
            gamma_e_up: 1e5,
            gamma_ff: 1e4,
            ff_asymmetry: 0.5,
            omega_esr: 0.0,
            esr_pair: ((dn, m52), (up, m52)),
            omega_nmr: 0.0,
            nmr_pair: ((dn, m52), (dn, m32)),
        }
    }
}

impl PumpConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_e_down", self.gamma_e_down),
            ("gamma_e_up", self.gamma_e_up),
            ("gamma_ff", self.gamma_ff),
            ("omega_esr", self.omega_esr),
            ("omega_nmr", self.omega_nmr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} = {v} must be a finite nonnegative rate"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.ff_asymmetry) {
            return Err(Error::invalid(format!(
                "ff_asymmetry = {} must lie in [0, 1]",
                self.ff_asymmetry
            )));
        }
        Ok(())
    }
}

/// Column-stochastic generator over labeled product states.
#[derive(Clone, Debug)]
pub struct RateMatrix {
    /// `generator[i][j]` = rate j → i; columns sum to zero.
    pub generator: Vec<Vec<f64>>,
    pub labels: Vec<StateLabel>,
}

impl RateMatrix {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: StateLabel) -> Result<usize> {
        self.labels.iter().position(|&l| l == label).ok_or_else(|| {
            Error::invalid(format!(
                "state (m_s={}, m_I={}) is outside this system's basis",
                label.0, label.1
            ))
        })
    }

    /// Add `rate` in both directions between two states.
    pub fn add_symmetric_drive(&mut self, pair: StatePair, rate: f64) -> Result<()> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::invalid(format!(
                "drive rate {rate} must be a finite nonnegative rate"
            )));
        }
        let a = self.index_of(pair.0)?;
        let b = self.index_of(pair.1)?;
        if a == b {
            return Err(Error::invalid("drive pair must couple two distinct states".to_string()));
        }
        self.add_rate(a, b, rate);
        self.add_rate(b, a, rate);
        Ok(())
    }

    fn add_rate(&mut self, from: usize, to: usize, rate: f64) {
        self.generator[to][from] += rate;
        self.generator[from][from] -= rate;
    }

    /// Time derivative G·p.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.generator[i][j] * p[j]).sum())
            .collect()
    }
}

/// Steady-state probabilities over labeled product states.
#[derive(Clone, Debug)]
pub struct Populations {
    pub probabilities: Vec<f64>,
    pub labels: Vec<StateLabel>,
}

impl Populations {
    pub fn get(&self, ms: HalfInt, mi: HalfInt) -> Option<f64> {
        self.labels
            .iter()
            .position(|&l| l == (ms, mi))
            .map(|i| self.probabilities[i])
    }

    /// Σ_{m_s} p(m_s, m_I): the nuclear-sublevel marginal read out by an
    /// electron resonance sitting on that sublevel.
    pub fn marginal_mi(&self, mi: HalfInt) -> f64 {
        self.labels
            .iter()
            .zip(&self.probabilities)
            .filter(|((_, l_mi), _)| *l_mi == mi)
            .map(|(_, p)| p)
            .sum()
    }

    /// Σ_{m_I} p(m_s, m_I).
    pub fn manifold_probability(&self, ms: HalfInt) -> f64 {
        self.labels
            .iter()
            .zip(&self.probabilities)
            .filter(|((l_ms, _), _)| *l_ms == ms)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Assemble the generator for the configured pump rates; `extra_drives` adds
/// further symmetric drive links (used when scanning an RF drive across
/// several resonances at once).
pub fn build_rate_matrix_with(
    sys: &SpinSystem,
    field: &FieldConfig,
    cfg: &PumpConfig,
    extra_drives: &[(StatePair, f64)],
) -> Result<RateMatrix> {
    cfg.validate()?;
    if sys.s_electron.twice() != 1 {
        return Err(Error::invalid(format!(
            "pumping model requires S = 1/2, got S = {}",
            sys.s_electron
        )));
    }
    let labels = sys.basis_labels();
    let n = labels.len();
    let mut m = RateMatrix {
        generator: vec![vec![0.0; n]; n],
        labels,
    };
    let dn = HalfInt::from_twice(-1);
    let up = HalfInt::from_twice(1);

    // Electron relaxation / excitation within each nuclear sublevel.
    for mi in crate::numerics::m_ladder(sys.i_nuclear) {
        let i_up = m.index_of((up, mi))?;
        let i_dn = m.index_of((dn, mi))?;
        if cfg.gamma_e_down > 0.0 {
            m.add_rate(i_up, i_dn, cfg.gamma_e_down);
        }
        if cfg.gamma_e_up > 0.0 {
            m.add_rate(i_dn, i_up, cfg.gamma_e_up);
        }
    }

    // Flip-flop links (↑, m) ↔ (↓, m+1), scaled by hybridization² and biased
    // toward lower m_I.
    if cfg.gamma_ff > 0.0 && sys.i_nuclear.twice() >= 1 {
        let ladder = crate::numerics::m_ladder(sys.i_nuclear);
        for w in ladder.windows(2) {
            let (m_hi, m_lo) = (w[0], w[1]); // descending order: m_hi = m_lo + 1
            let c = hybridization_coefficient(sys, field, m_hi)?.coefficient;
            let base = cfg.gamma_ff * c * c;
            if base == 0.0 {
                continue;
            }
            let i_up_lo = m.index_of((up, m_lo))?;
            let i_dn_hi = m.index_of((dn, m_hi))?;
            // (↓, m+1) → (↑, m) lowers m_I: favored direction.
            m.add_rate(i_dn_hi, i_up_lo, base * (1.0 + cfg.ff_asymmetry));
            m.add_rate(i_up_lo, i_dn_hi, base * (1.0 - cfg.ff_asymmetry));
        }
    }

    if cfg.omega_esr > 0.0 {
        m.add_symmetric_drive(cfg.esr_pair, cfg.omega_esr)?;
    }
    if cfg.omega_nmr > 0.0 {
        m.add_symmetric_drive(cfg.nmr_pair, cfg.omega_nmr)?;
    }
    for &(pair, rate) in extra_drives {
        if rate > 0.0 {
            m.add_symmetric_drive(pair, rate)?;
        }
    }
    Ok(m)
}

pub fn build_rate_matrix(
    sys: &SpinSystem,
    field: &FieldConfig,
    cfg: &PumpConfig,
) -> Result<RateMatrix> {
    build_rate_matrix_with(sys, field, cfg, &[])
}

/// Strongly connected components of the positive-rate digraph, via Kosaraju.
fn strongly_connected_components(m: &RateMatrix) -> Vec<Vec<usize>> {
    let n = m.dim();
    let edge = |from: usize, to: usize| from != to && m.generator[to][from] > 0.0;

    // First pass: order vertices by DFS finish time on the forward graph.
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for start in 0..n {
        if visited[start] {
            continue;
        }
        // Iterative DFS with an explicit neighbor cursor.
        let mut stack = vec![(start, 0usize)];
        visited[start] = true;
        while let Some(&mut (v, ref mut cursor)) = stack.last_mut() {
            let mut advanced = false;
            while *cursor < n {
                let u = *cursor;
                *cursor += 1;
                if edge(v, u) && !visited[u] {
                    visited[u] = true;
                    stack.push((u, 0));
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                order.push(v);
                stack.pop();
            }
        }
    }

    // Second pass: DFS on the reversed graph in reverse finish order.
    let mut component = vec![usize::MAX; n];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for &start in order.iter().rev() {
        if component[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = Vec::new();
        let mut stack = vec![start];
        component[start] = id;
        while let Some(v) = stack.pop() {
            members.push(v);
            for u in 0..n {
                if edge(u, v) && component[u] == usize::MAX {
                    component[u] = id;
                    stack.push(u);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

/// Components with no outgoing rate: exactly one must exist for the steady
/// state to be unique.
fn terminal_components(m: &RateMatrix) -> Vec<Vec<usize>> {
    let comps = strongly_connected_components(m);
    comps
        .into_iter()
        .filter(|members| {
            !members.iter().any(|&v| {
                (0..m.dim()).any(|u| !members.contains(&u) && u != v && m.generator[u][v] > 0.0)
            })
        })
        .collect()
}

/// Stationary distribution of the irreducible chain on the states `members`
/// by Grassmann–Taksar–Heyman elimination. All arithmetic adds nonnegative
/// terms, so components keep full relative accuracy even when the rates (and
/// the resulting probabilities) span many orders of magnitude.
fn gth_stationary(m: &RateMatrix, members: &[usize]) -> Result<Vec<f64>> {
    let k = members.len();
    // Row-convention rates restricted to the component: q[a][b] = rate a → b.
    let mut q = vec![vec![0.0; k]; k];
    for (a, &ia) in members.iter().enumerate() {
        for (b, &ib) in members.iter().enumerate() {
            if a != b {
                q[a][b] = m.generator[ib][ia];
            }
        }
    }
    let mut departure = vec![0.0; k];
    for step in (1..k).rev() {
        let total: f64 = q[step][..step].iter().sum();
        departure[step] = total;
        if !(total > 0.0) {
            return Err(Error::NoConvergence(
                "stationary solve hit a zero pivot (component not irreducible)".to_string(),
            ));
        }
        for i in 0..step {
            let f = q[i][step] / total;
            if f == 0.0 {
                continue;
            }
            for j in 0..step {
                if i != j {
                    q[i][j] += f * q[step][j];
                }
            }
        }
    }
    let mut pi = vec![0.0; k];
    pi[0] = 1.0;
    for step in 1..k {
        let inflow: f64 = (0..step).map(|i| pi[i] * q[i][step]).sum();
        pi[step] = inflow / departure[step];
    }
    let total: f64 = pi.iter().sum();
    Ok(pi.into_iter().map(|x| x / total).collect())
}

/// Steady state of the rate equation: the normalized null vector of the
/// generator. Errors when the rate graph admits more than one terminal
/// component (the steady state is then not unique).
pub fn steady_state(m: &RateMatrix) -> Result<Populations> {
    let terminals = terminal_components(m);
    if terminals.len() != 1 {
        let desc: Vec<String> = terminals
            .iter()
            .map(|members| {
                let names: Vec<String> = members
                    .iter()
                    .map(|&v| format!("({}, {})", m.labels[v].0, m.labels[v].1))
                    .collect();
                format!("[{}]", names.join(", "))
            })
            .collect();
        return Err(Error::NotDefined(format!(
            "degenerate steady state: {} terminal components: {}",
            terminals.len(),
            desc.join(" ")
        )));
    }
    // All stationary mass lives on the terminal component; transient states
    // carry exactly zero.
    let members = &terminals[0];
    let pi = gth_stationary(m, members)?;
    let mut p = vec![0.0; m.dim()];
    for (a, &ia) in members.iter().enumerate() {
        p[ia] = pi[a].max(0.0);
    }
    Ok(Populations {
        probabilities: p,
        labels: m.labels.clone(),
    })
}

/// Uniform leak rate used by [`steady_state_with_leak`].
pub const DEFAULT_LEAK_RATE: f64 = 1e-12;

/// Like [`steady_state`], but when the rate graph is disconnected a uniform
/// all-to-all leak of `DEFAULT_LEAK_RATE` is added to make the chain ergodic
/// instead of erroring. Connected graphs are solved without the leak.
pub fn steady_state_with_leak(m: &RateMatrix) -> Result<Populations> {
    if terminal_components(m).len() == 1 {
        return steady_state(m);
    }
    let n = m.dim();
    let mut leaky = m.clone();
    for j in 0..n {
        for i in 0..n {
            if i != j {
                leaky.generator[i][j] += DEFAULT_LEAK_RATE;
            }
        }
        leaky.generator[j][j] -= DEFAULT_LEAK_RATE * (n as f64 - 1.0);
    }
    steady_state(&leaky)
}

/// ENDOR readout observable: the nuclear-sublevel marginal Σ_{m_s} p(m_s, m_I).
pub fn endor_signal(pop: &Populations, probed_mi: HalfInt) -> f64 {
    pop.marginal_mi(probed_mi)
}

/// P↑/P↓ restricted to the probed nuclear sublevel, as a function of the ESR
/// drive rate. The probed sublevel is the one the configured ESR pair sits on.
pub fn population_ratio_vs_drive(
    sys: &SpinSystem,
    field: &FieldConfig,
    cfg: &PumpConfig,
    omega_esr_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if omega_esr_grid.is_empty() {
        return Err(Error::invalid("omega grid is empty"));
    }
    if omega_esr_grid.windows(2).any(|w| w[0] >= w[1]) && omega_esr_grid.len() > 1 {
        return Err(Error::invalid("omega grid must be strictly ascending"));
    }
    if omega_esr_grid[0] < 0.0 {
        return Err(Error::invalid("omega grid must be nonnegative"));
    }
    let ((ms_a, mi_a), (ms_b, mi_b)) = cfg.esr_pair;
    if mi_a != mi_b || ms_a == ms_b {
        return Err(Error::invalid(
            "esr_pair must flip the electron within one nuclear sublevel".to_string(),
        ));
    }
    let probed = mi_a;
    let dn = HalfInt::from_twice(-1);
    let up = HalfInt::from_twice(1);
    let mut out = Vec::with_capacity(omega_esr_grid.len());
    for &omega in omega_esr_grid {
        let mut c = cfg.clone();
        c.omega_esr = omega;
        let m = build_rate_matrix(sys, field, &c)?;
        let pop = steady_state(&m)?;
        let p_up = pop.get(up, probed).unwrap_or(0.0);
        let p_dn = pop.get(dn, probed).unwrap_or(0.0);
        out.push((omega, p_up / p_dn));
    }
    Ok(out)
}

/// Integrate dp/dt = G p with classical Runge-Kutta from `p0` to `t_end`.
pub fn evolve_rk4(m: &RateMatrix, p0: &[f64], t_end: f64, steps: usize) -> Vec<f64> {
    assert!(steps > 0 && t_end >= 0.0);
    let h = t_end / steps as f64;
    let n = p0.len();
    let mut p = p0.to_vec();
    let add = |a: &[f64], b: &[f64], f: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + f * y).collect()
    };
    for _ in 0..steps {
        let k1 = m.apply(&p);
        let k2 = m.apply(&add(&p, &k1, h / 2.0));
        let k3 = m.apply(&add(&p, &k2, h / 2.0));
        let k4 = m.apply(&add(&p, &k3, h));
        for i in 0..n {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    p
}
