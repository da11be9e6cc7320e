//! Asymptotic spectral distribution of weighted sample covariance matrices.
//!
//! For `B = (1/N) T^{1/2} Z W Z^T T^{1/2}` with population spectrum `H`,
//! weight law `D` and concentration `c = n/N`, this crate
//!
//! - solves the fundamental fixed-point equation for `X(z)` in the upper
//!   half-plane and its limit on the real line ([`resolvent`]),
//! - locates the support of the limiting spectral law, including gaps that are
//!   induced by the weights alone ([`support`]),
//! - builds arcsine grids on that support and evaluates the density ([`grid`],
//!   [`density`]),
//! - samples weighted sample covariance spectra ([`simulator`]),
//! - recovers the population spectrum from observed eigenvalues by minimising
//!   an expected squared 2-Wasserstein loss ([`estimator`]).

pub mod density;
pub mod distributions;
pub mod error;
pub mod estimator;
pub mod grid;
pub mod poly;
pub mod resolvent;
pub mod roots;
pub mod simulator;
pub mod support;

pub use density::{density_curve, CdfCurve, DensityCurve};
pub use distributions::{SpectralDistribution, WeightDistribution, WeightKind};
pub use error::{Error, Result};
pub use estimator::{
    estimate, loss_and_gradient, w2_squared, wasserstein2, EstimationConfig, EstimationResult,
    GradientMode, WeightInput,
};
pub use grid::{build_grid, Grid, GridStrategy};
pub use resolvent::{density_at, solve_x_real, solve_x_upper, theta_at, ResolventPoint, ThetaValue};
pub use simulator::{ks_distance, sample_spectrum, EmpiricalSpectrum, Noise, SimulationConfig};
pub use support::{find_support, find_support_convex, find_support_mixture, BranchFunction, SupportIntervals};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
