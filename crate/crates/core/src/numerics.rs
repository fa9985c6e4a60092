//! Self-contained numeric kernel: angular-momentum operators, tensor
//! products, a complex Hermitian eigensolver, and damped least squares.
//!
//! Everything here is dependency-free by design (only the complex scalar
//! type comes from `num-complex`): the matrices involved never exceed
//! dimension 12, so a cyclic Jacobi eigensolver and dense Gaussian
//! elimination are both fast and bit-deterministic across platforms.

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Exact half-integer (…, -1, -1/2, 0, 1/2, 1, …) stored as twice its value.
///
/// Spin quantum numbers and magnetic quantum numbers are half-integers; storing
/// `2m` as an integer keeps basis labels exact and hashable (no float keys).
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct HalfInt {
    twice: i32,
}

impl HalfInt {
    /// Construct from twice the value, e.g. `HalfInt::from_twice(5)` is 5/2.
    pub const fn from_twice(twice: i32) -> Self {
        HalfInt { twice }
    }

    /// Convert from a float that must be a half-integer to within 1e-9.
    pub fn try_from_f64(x: f64) -> Result<Self> {
        let twice = 2.0 * x;
        let rounded = twice.round();
        if !twice.is_finite() || (twice - rounded).abs() > 1e-9 || rounded.abs() > i32::MAX as f64
        {
            return Err(Error::invalid(format!(
                "{x} is not a half-integer (expected n/2 for integer n)"
            )));
        }
        Ok(HalfInt {
            twice: rounded as i32,
        })
    }

    pub const fn twice(self) -> i32 {
        self.twice
    }

    pub fn value(self) -> f64 {
        f64::from(self.twice) / 2.0
    }

    pub const fn is_integer(self) -> bool {
        self.twice % 2 == 0
    }

    /// Multiplicity 2j+1 of a spin-j ladder. Negative j has none.
    pub fn multiplicity(self) -> usize {
        if self.twice < 0 {
            0
        } else {
            (self.twice as usize) + 1
        }
    }
}

impl std::fmt::Display for HalfInt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.twice % 2 == 0 {
            write!(f, "{}", self.twice / 2)
        } else {
            write!(f, "{}/2", self.twice)
        }
    }
}

impl Serialize for HalfInt {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for HalfInt {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let x = f64::deserialize(d)?;
        HalfInt::try_from_f64(x).map_err(serde::de::Error::custom)
    }
}

impl std::ops::Add for HalfInt {
    type Output = HalfInt;
    fn add(self, rhs: HalfInt) -> HalfInt {
        HalfInt::from_twice(self.twice + rhs.twice)
    }
}

impl std::ops::Sub for HalfInt {
    type Output = HalfInt;
    fn sub(self, rhs: HalfInt) -> HalfInt {
        HalfInt::from_twice(self.twice - rhs.twice)
    }
}

impl std::ops::Neg for HalfInt {
    type Output = HalfInt;
    fn neg(self) -> HalfInt {
        HalfInt::from_twice(-self.twice)
    }
}

/// Dense square complex matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    dim: usize,
    entries: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(dim: usize) -> Self {
        ComplexMatrix {
            dim,
            entries: vec![Complex64::ZERO; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = Complex64::ONE;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Build from nested rows; panics if the rows are not square.
    pub fn from_rows(rows: &[Vec<Complex64>]) -> Self {
        let dim = rows.len();
        assert!(rows.iter().all(|r| r.len() == dim), "rows must be square");
        Self::from_fn(dim, |i, j| rows[i][j])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, other.dim, "dimension mismatch in matmul");
        let n = self.dim;
        let mut out = ComplexMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == Complex64::ZERO {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// Conjugate transpose.
    pub fn dagger(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.dim, |i, j| self[(j, i)].conj())
    }

    pub fn scaled(&self, factor: Complex64) -> ComplexMatrix {
        ComplexMatrix {
            dim: self.dim,
            entries: self.entries.iter().map(|e| e * factor).collect(),
        }
    }

    pub fn add(&self, other: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.dim, other.dim, "dimension mismatch in add");
        ComplexMatrix {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &ComplexMatrix) -> ComplexMatrix {
        self.add(&other.scaled(-Complex64::ONE))
    }

    /// In-place `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ComplexMatrix, factor: Complex64) {
        assert_eq!(self.dim, other.dim, "dimension mismatch in add_scaled");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += factor * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest |a_ij - conj(a_ji)| over all entry pairs.
    pub fn max_hermiticity_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in i..self.dim {
                let v = (self[(i, j)] - self[(j, i)].conj()).norm();
                worst = worst.max(v);
            }
        }
        worst
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.dim).map(|i| self[(i, j)]).collect()
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.dim, "dimension mismatch in apply");
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.entries[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.entries[i * self.dim + j]
    }
}

/// Kronecker product with the first factor outermost.
///
/// `kron(a, b)[(i1*db + i2, j1*db + j2)] = a[(i1,j1)] * b[(i2,j2)]`, so when
/// `a` acts on the electron and `b` on the nucleus, the combined basis orders
/// electron states outer and nuclear states inner.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let (da, db) = (a.dim(), b.dim());
    let mut out = ComplexMatrix::zeros(da * db);
    for i1 in 0..da {
        for j1 in 0..da {
            let f = a[(i1, j1)];
            if f == Complex64::ZERO {
                continue;
            }
            for i2 in 0..db {
                for j2 in 0..db {
                    out[(i1 * db + i2, j1 * db + j2)] = f * b[(i2, j2)];
                }
            }
        }
    }
    out
}

/// Spin matrices for one angular momentum, dimensionless (ħ = 1).
///
/// Basis ordering is m = j, j-1, …, -j (highest projection first), so `sz`
/// is diagonal with descending entries.
#[derive(Clone, Debug)]
pub struct SpinOperators {
    pub j: HalfInt,
    pub sx: ComplexMatrix,
    pub sy: ComplexMatrix,
    pub sz: ComplexMatrix,
}

impl SpinOperators {
    pub fn dim(&self) -> usize {
        self.j.multiplicity()
    }

    /// Magnetic quantum numbers in basis order: j, j-1, …, -j.
    pub fn m_values(&self) -> Vec<HalfInt> {
        m_ladder(self.j)
    }
}

/// Magnetic quantum numbers of a spin-j ladder in basis order (descending).
pub fn m_ladder(j: HalfInt) -> Vec<HalfInt> {
    let mut out = Vec::with_capacity(j.multiplicity());
    let mut m = j.twice();
    while m >= -j.twice() {
        out.push(HalfInt::from_twice(m));
        m -= 2;
    }
    out
}

/// Build sx, sy, sz for spin j by the ladder construction
/// ⟨m±1|S±|m⟩ = √(j(j+1) − m(m±1)).
pub fn angular_momentum_ops(j: f64) -> Result<SpinOperators> {
    let j = HalfInt::try_from_f64(j)
        .map_err(|_| Error::invalid(format!("spin quantum number {j} is not a half-integer")))?;
    if j.twice() < 0 {
        return Err(Error::invalid(format!(
            "spin quantum number {j} must be nonnegative"
        )));
    }
    Ok(angular_momentum_ops_exact(j))
}

/// Same as [`angular_momentum_ops`] for an already-exact half-integer.
pub fn angular_momentum_ops_exact(j: HalfInt) -> SpinOperators {
    let dim = j.multiplicity();
    let jv = j.value();
    let ms = m_ladder(j);
    let mut sp = ComplexMatrix::zeros(dim); // raising operator S+
    for (k, &m) in ms.iter().enumerate().skip(1) {
        // S+ maps |m⟩ (index k) to |m+1⟩ (index k-1).
        let mv = m.value();
        let amp = (jv * (jv + 1.0) - mv * (mv + 1.0)).sqrt();
        sp[(k - 1, k)] = Complex64::new(amp, 0.0);
    }
    let sm = sp.dagger();
    let sx = sp.add(&sm).scaled(Complex64::new(0.5, 0.0));
    let sy = sp.sub(&sm).scaled(Complex64::new(0.0, -0.5));
    let sz = ComplexMatrix::from_fn(dim, |i, k| {
        if i == k {
            Complex64::new(ms[i].value(), 0.0)
        } else {
            Complex64::ZERO
        }
    });
    SpinOperators { j, sx, sy, sz }
}

/// Eigendecomposition of a Hermitian matrix, with product-basis labels
/// attached by the caller (empty until then).
#[derive(Clone, Debug)]
pub struct EigenSolution {
    /// Eigenvalues in ascending order (MHz when the input is a Hamiltonian).
    pub values: Vec<f64>,
    /// Unitary matrix whose k-th column is the eigenvector of `values[k]`.
    pub vectors: ComplexMatrix,
    /// (m_s, m_I) label of each basis index; filled by the spin-model layer.
    pub basis_labels: Vec<(HalfInt, HalfInt)>,
}

/// Cyclic Jacobi eigendecomposition of a Hermitian matrix.
///
/// Deterministic: fixed sweep order, ascending eigenvalues, and each
/// eigenvector phased so its largest-magnitude component is real positive.
pub fn eigh(h: &ComplexMatrix) -> Result<EigenSolution> {
    let n = h.dim();
    let norm = h.frobenius_norm();
    let asym = h.max_hermiticity_violation();
    if asym > 1e-10 * norm.max(1.0) {
        return Err(Error::invalid(format!(
            "matrix is not Hermitian: max |a_ij - conj(a_ji)| = {asym:.3e} (norm {norm:.3e})"
        )));
    }

    let mut a = h.clone();
    // Symmetrize exactly so rounding in the input cannot bias the sweep.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = avg;
            a[(j, i)] = avg.conj();
        }
        a[(i, i)] = Complex64::new(a[(i, i)].re, 0.0);
    }
    let mut v = ComplexMatrix::identity(n);

    let off = |a: &ComplexMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    };

    let tol = 1e-13 * norm;
    let max_sweeps = 100;
    let mut converged = norm == 0.0 || off(&a) <= tol;
    for _sweep in 0..max_sweeps {
        if converged {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let hpq = a[(p, q)];
                let mag = hpq.norm();
                if mag < 1e-300 {
                    continue;
                }
                let phase = hpq / mag; // e^{i alpha}
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let tau = (aqq - app) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let cs = Complex64::new(c, 0.0);
                let s_ph = phase * s; // s * e^{i alpha}
                let s_ph_c = s_ph.conj();

                // Columns: B[:,p] = c*A[:,p] - conj(s_ph)*A[:,q]
                //          B[:,q] = s_ph*A[:,p] + c*A[:,q]
                for r in 0..n {
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    a[(r, p)] = cs * arp - s_ph_c * arq;
                    a[(r, q)] = s_ph * arp + cs * arq;
                }
                // Rows: A'[p,:] = c*B[p,:] - s_ph*B[q,:]
                //       A'[q,:] = conj(s_ph)*B[p,:] + c*B[q,:]
                for rcol in 0..n {
                    let apr = a[(p, rcol)];
                    let aqr = a[(q, rcol)];
                    a[(p, rcol)] = cs * apr - s_ph * aqr;
                    a[(q, rcol)] = s_ph_c * apr + cs * aqr;
                }
                a[(p, q)] = Complex64::ZERO;
                a[(q, p)] = Complex64::ZERO;
                a[(p, p)] = Complex64::new(a[(p, p)].re, 0.0);
                a[(q, q)] = Complex64::new(a[(q, q)].re, 0.0);

                // Accumulate V <- V * U with the same column combination.
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = cs * vrp - s_ph_c * vrq;
                    v[(r, q)] = s_ph * vrp + cs * vrq;
                }
            }
        }
        converged = off(&a) <= tol;
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "Jacobi eigensolver: off-diagonal norm {:.3e} above tolerance {:.3e} after {max_sweeps} sweeps",
            off(&a),
            tol
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());

    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = ComplexMatrix::zeros(n);
    for (k, &src) in order.iter().enumerate() {
        // Phase convention: largest-magnitude component real positive.
        let mut imax = 0;
        let mut best = -1.0f64;
        for r in 0..n {
            let mag = v[(r, src)].norm();
            if mag > best {
                best = mag;
                imax = r;
            }
        }
        let pivot = v[(imax, src)];
        let rot = if best > 0.0 {
            pivot.conj() / best
        } else {
            Complex64::ONE
        };
        for r in 0..n {
            vectors[(r, k)] = v[(r, src)] * rot;
        }
    }

    Ok(EigenSolution {
        values,
        vectors,
        basis_labels: Vec::new(),
    })
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, m[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pivot_abs == 0.0 || !pivot_abs.is_finite() {
            return Err(Error::invalid(format!(
                "singular linear system (pivot {pivot_abs:.3e} in column {col})"
            )));
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for r in (col + 1)..n {
            let f = m[r][col] / m[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for c in (row + 1)..n {
            s -= m[row][c] * x[c];
        }
        x[row] = s / m[row][row];
    }
    Ok(x)
}

/// Result of a damped least-squares fit.
#[derive(Clone, Debug)]
pub struct LeastSquaresResult {
    pub params: Vec<f64>,
    /// Parameter covariance (JᵀJ)⁻¹·σ² at the solution, row-major.
    pub covariance: Vec<Vec<f64>>,
    /// Euclidean norm of the residual vector at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LeastSquaresResult {
    /// 1-sigma uncertainty of parameter `i` (square root of the covariance
    /// diagonal, clamped at zero).
    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[i][i].max(0.0).sqrt()
    }
}

/// Tuning knobs for [`least_squares`].
#[derive(Clone, Debug)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Stop when the relative parameter step falls below this.
    pub rel_step_tol: f64,
    /// Stop when the relative cost decrease falls below this.
    pub rel_cost_tol: f64,
    pub lambda_init: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        LsqOptions {
            max_iterations: 500,
            rel_step_tol: 1e-9,
            rel_cost_tol: 1e-12,
            lambda_init: 1e-3,
        }
    }
}

fn clamp_to(p: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(bs) = bounds {
        for (x, &(lo, hi)) in p.iter_mut().zip(bs) {
            *x = x.clamp(lo, hi);
        }
    }
}

fn jacobian(
    model: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    p: &[f64],
    r0: &[f64],
    bounds: Option<&[(f64, f64)]>,
) -> Result<Vec<Vec<f64>>> {
    let n = r0.len();
    let m = p.len();
    let mut jt: Vec<Vec<f64>> = vec![vec![0.0; n]; m]; // row i = column i of J
    let mut probe = p.to_vec();
    for i in 0..m {
        let mut h = 1e-6 * p[i].abs().max(1.0);
        if let Some(bs) = bounds {
            // Step backward when a forward step would leave the box.
            if p[i] + h > bs[i].1 && p[i] - h >= bs[i].0 {
                h = -h;
            }
        }
        probe[i] = p[i] + h;
        let r1 = model(&probe);
        probe[i] = p[i];
        if r1.len() != n {
            return Err(Error::invalid(
                "residual function changed length between calls".to_string(),
            ));
        }
        for k in 0..n {
            jt[i][k] = (r1[k] - r0[k]) / h;
        }
        if jt[i].iter().any(|x| !x.is_finite()) {
            return Err(Error::NoConvergence(format!(
                "diverged: non-finite Jacobian for parameter {i}"
            )));
        }
    }
    Ok(jt)
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Levenberg-Marquardt least squares with optional box bounds.
///
/// `model` maps parameters to a residual vector; the solver minimizes its
/// squared norm. The Jacobian is forward-differenced (relative step 1e-6).
/// Iterates are clamped to `bounds`. Hitting the iteration cap returns a
/// result with `converged = false` rather than an error.
pub fn least_squares(
    mut model: impl FnMut(&[f64]) -> Vec<f64>,
    init: &[f64],
    bounds: Option<&[(f64, f64)]>,
    options: &LsqOptions,
) -> Result<LeastSquaresResult> {
    if let Some(bs) = bounds {
        if bs.len() != init.len() {
            return Err(Error::invalid(format!(
                "bounds length {} does not match parameter length {}",
                bs.len(),
                init.len()
            )));
        }
        for (i, (&x, &(lo, hi))) in init.iter().zip(bs).enumerate() {
            if lo > hi {
                return Err(Error::invalid(format!(
                    "bound {i} is empty: [{lo}, {hi}]"
                )));
            }
            if x < lo || x > hi {
                return Err(Error::invalid(format!(
                    "initial parameter {i} = {x} outside bounds [{lo}, {hi}]"
                )));
            }
        }
    }

    let mut p = init.to_vec();
    let mut r = model(&p);
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(
            "residuals are non-finite at the initial parameters".to_string(),
        ));
    }
    let n = r.len();
    let m = p.len();
    let mut cost = cost_of(&r);
    let mut lambda = options.lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let jt = jacobian(&mut model, &p, &r, bounds)?;
        // Normal equations JtJ + lambda*diag(JtJ).
        let mut jtj = vec![vec![0.0; m]; m];
        let mut jtr = vec![0.0; m];
        for i in 0..m {
            for j in i..m {
                let dot: f64 = jt[i].iter().zip(&jt[j]).map(|(a, b)| a * b).sum();
                jtj[i][j] = dot;
                jtj[j][i] = dot;
            }
            jtr[i] = jt[i].iter().zip(&r).map(|(a, b)| a * b).sum();
        }

        let mut accepted = false;
        loop {
            let mut damped = jtj.clone();
            for i in 0..m {
                let d = jtj[i][i];
                damped[i][i] = d + lambda * d.max(1e-12);
            }
            let neg_jtr: Vec<f64> = jtr.iter().map(|x| -x).collect();
            let step = match solve_linear(&damped, &neg_jtr) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 5.0;
                    if lambda > 1e14 {
                        break;
                    }
                    continue;
                }
            };
            let mut p_new: Vec<f64> = p.iter().zip(&step).map(|(a, b)| a + b).collect();
            clamp_to(&mut p_new, bounds);
            let rel_step = p_new
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                .fold(0.0f64, f64::max);
            let r_new = model(&p_new);
            if r_new.iter().any(|x| !x.is_finite()) {
                return Err(Error::NoConvergence(
                    "diverged: non-finite residual during iteration".to_string(),
                ));
            }
            let cost_new = cost_of(&r_new);
            if cost_new <= cost {
                let rel_decrease = (cost - cost_new) / cost.max(1e-300);
                p = p_new;
                r = r_new;
                cost = cost_new;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_step < options.rel_step_tol || rel_decrease < options.rel_cost_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 5.0;
            // A rejected step this small means no feasible improvement is
            // left at solver precision: stationary within tolerance.
            if rel_step < options.rel_step_tol || lambda > 1e14 {
                converged = rel_step < options.rel_step_tol;
                break;
            }
        }
        if converged || !accepted {
            break;
        }
    }

    // Covariance from the Gauss-Newton Hessian at the solution.
    let jt = jacobian(&mut model, &p, &r, bounds)?;
    let mut jtj = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let dot: f64 = jt[i].iter().zip(&jt[j]).map(|(a, b)| a * b).sum();
            jtj[i][j] = dot;
            jtj[j][i] = dot;
        }
    }
    let dof = if n > m { (n - m) as f64 } else { 1.0 };
    let sigma2 = cost / dof;
    let covariance = invert_spd_with_ridge(&jtj, sigma2);

    Ok(LeastSquaresResult {
        params: p,
        covariance,
        residual_norm: cost.sqrt(),
        iterations,
        converged,
    })
}

/// Invert a symmetric positive semidefinite matrix, adding a relative ridge
/// if it is numerically singular, then scale by `sigma2`.
fn invert_spd_with_ridge(a: &[Vec<f64>], sigma2: f64) -> Vec<Vec<f64>> {
    let m = a.len();
    let max_diag = a
        .iter()
        .enumerate()
        .map(|(i, row)| row[i].abs())
        .fold(0.0f64, f64::max);
    let mut ridge = 0.0;
    loop {
        let mut work = a.to_vec();
        for i in 0..m {
            work[i][i] += ridge;
        }
        let mut inv = vec![vec![0.0; m]; m];
        let mut ok = true;
        for col in 0..m {
            let mut e = vec![0.0; m];
            e[col] = 1.0;
            match solve_linear(&work, &e) {
                Ok(x) => {
                    for row in 0..m {
                        inv[row][col] = x[row];
                    }
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            // Symmetrize to kill rounding skew.
            let mut out = vec![vec![0.0; m]; m];
            for i in 0..m {
                for j in 0..m {
                    out[i][j] = 0.5 * (inv[i][j] + inv[j][i]) * sigma2;
                }
            }
            return out;
        }
        ridge = if ridge == 0.0 {
            1e-12 * max_diag.max(1e-300)
        } else {
            ridge * 10.0
        };
        if ridge > 1e6 * max_diag.max(1e-300) {
            return vec![vec![0.0; m]; m];
        }
    }
}
