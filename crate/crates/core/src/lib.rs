//! Core engine for single-atom electron/nuclear spin resonance.
//!
//! The crate models a coupled electron–nucleus spin system (the shipped
//! defaults target S = 1/2, I = 5/2) in the product basis, diagonalizes the
//! effective Hamiltonian, enumerates ESR/NMR transitions, solves a
//! rate-equation pumping model for steady-state populations, synthesizes
//! spectra with Fano/Lorentzian lineshapes, and recovers the Hamiltonian
//! parameters from measured spectra via a recursive calibration loop.
//!
//! Module map:
//! - [`numerics`]: dense complex matrices, spin operators, a Jacobi
//!   eigensolver, and damped least squares. No external linear algebra.
//! - [`spinmodel`]: Hamiltonian assembly, eigenstate labeling, transition
//!   catalogs, field sweeps, hybridization diagnostics.
//! - [`pumping`]: tunnel-current pumping as a Markov rate equation over the
//!   product-basis states; steady states and drive-response curves.
//! - [`lineshapes`]: Fano/Lorentzian profiles, spectrum synthesis for ESR
//!   and ENDOR scans, RF transfer tables, seeded noise.
//! - [`calibration`]: peak fitting and the staged, recursive parameter
//!   calibration pipeline.
//! - [`dataset`]: synthetic multi-field dataset generation used by the CLI
//!   and the end-to-end tests.

// Domain guards are written `!(x > 0.0)` on purpose: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over matrix rows/columns read better than iterator chains here.
#![allow(clippy::needless_range_loop)]

pub mod calibration;
pub mod dataset;
pub mod lineshapes;
pub mod numerics;
pub mod pumping;
pub mod spinmodel;

/// Bohr magneton divided by the Planck constant, in MHz per tesla.
pub const MU_B_MHZ_PER_T: f64 = 13_996.245;

/// Nuclear magneton divided by the Planck constant, in MHz per tesla.
pub const MU_N_MHZ_PER_T: f64 = 7.622_593;

/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value is outside the function's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An iterative routine exhausted its iteration budget.
    #[error("did not converge: {0}")]
    NoConvergence(String),
    /// The requested quantity is not defined for this system/regime.
    #[error("not defined: {0}")]
    NotDefined(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
