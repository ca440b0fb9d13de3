//! Spectral Galerkin laboratory for the stochastic Navier–Stokes equations
//! on the 3D torus with state-dependent noise.
//!
//! The crate provides the Galerkin space and fields ([`spectral`]), the
//! projected bilinear term ([`bilinear`]), the noise operator
//! ([`noise`]), a semi-implicit Euler–Maruyama integrator with first
//! variation and stochastic convolution ([`sde`]), Monte Carlo estimators
//! of the transition and damped semigroups and their gradients
//! ([`kolmogorov`]), empirical checks of a priori estimates and long-run
//! behaviour ([`analysis`]) and the steering construction used for
//! reachability ([`control`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod analysis;
pub mod bilinear;
pub mod control;
pub mod error;
pub mod io;
pub mod kolmogorov;
pub mod noise;
pub mod parallel;
pub mod rng;
pub mod sde;
pub mod spectral;
pub mod stats;

pub use analysis::{EmpiricalMeasure, ErgodicOptions, EstimateReport};
pub use bilinear::BilinearWorkspace;
pub use control::{ControlPath, ReachProbability, ReachabilityReport};
pub use error::{Error, Result};
pub use kolmogorov::{Observable, ObservableClass, VocReport};
pub use noise::{KappaSpec, NoiseOperator, NoiseParams};
pub use sde::{SimConfig, Trajectory};
pub use spectral::{GalerkinSpace, SpectralField, WaveVector};
pub use stats::McEstimate;
