//! Quadratic BSDEs with monotone, non-Lipschitz drivers.
//!
//! The crate solves `Y_t = xi - int_t^T g(s, Y_s, Z_s) ds + int_t^T Z_s dB_s`
//! by backward regression Monte Carlo, checks the growth and convexity
//! assumptions of a driver on probe grids, computes Legendre-Fenchel
//! conjugates of the driver, and evaluates the dual control representation
//! of `Y_0`.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod conjugate;
pub mod diagnostics;
pub mod dual;
pub mod error;
pub mod generators;
pub mod optimize;
pub mod paths;
pub mod quadrature;
pub mod regression;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use generators::{
    check_assumptions, evaluate, example_generator, inf_convolution, AssumptionFamily, AssumptionReport,
    Envelope, GeneratorSpec, Growth, ProbeConfig, TimeCoefficient,
};
pub use conjugate::{conjugate_yz, conjugate_z, ConjugateConfig, Extended};
pub use diagnostics::{comparison_experiment, moment_diagnostics, psi, BoundReport, MomentSpec};
pub use dual::{dual_search, ControlFamily, ControlProcess, DualConfig, DualEvaluation, DualMode};
pub use paths::{BrownianEnsemble, TimeGrid};
pub use solver::{solve_backward, SolutionField, SolverConfig, TerminalSpec};
pub use stats::Estimate;
