//! Numerical toolkit for reflected backward SDEs with a generalized
//! (bounded-variation) driver term.
//!
//! The dynamics solved here are, on a horizon `[0, T]`,
//!
//! ```text
//! Y_t = xi + int_t^T f(s, X_s, Y_s, Z_s) ds + int_t^T g(s, X_s, Y_s) dG_s
//!          - int_t^T Z_s dW_s + K_T - K_t,      Y_t >= S_t,
//! ```
//!
//! where `X` is a forward diffusion reflected at the boundary of a domain,
//! `G` is its boundary local time, `S` is a lower obstacle and `K` is the
//! minimal nondecreasing push keeping `Y` above `S` (flat off `{Y = S}`).
//!
//! The crate provides:
//!
//! * [`models`]: problem data types and sampled validation of the structural
//!   conditions (z-Lipschitz drivers, one-sided monotonicity, growth).
//! * [`approximation`]: the constructive machinery used to reduce general
//!   drivers and unbounded data to Lipschitz, bounded subproblems
//!   (radial truncation, smooth cutoffs, Lipschitz regularization of the
//!   driver, inf-convolution envelopes).
//! * [`forward_sde`]: reflected Euler path generation with local-time
//!   accounting and a columnar binary bundle format.
//! * [`solver`]: least-squares Monte Carlo backward recursions (reflected,
//!   penalized, and the truncate-regularize-solve pipeline).
//! * [`estimates`]: empirical audits of the norm estimates the scheme is
//!   supposed to satisfy (Z-control, a priori bounds, stability in the data,
//!   flatness of `K`, comparison across penalization levels).
//! * [`pde`]: an independent obstacle-PDE finite-difference oracle for
//!   cross-validation in Markovian 1D problems.
//! * [`catalog`] / [`config`] / [`cli`]: named benchmark problems, the TOML
//!   run configuration, and the command line front end.

pub mod approximation;
pub mod catalog;
pub mod cli;
pub mod config;
pub mod estimates;
pub mod forward_sde;
pub mod models;
pub mod pde;
pub mod solver;
pub mod util;

pub use models::{AssumptionReport, DomainSpec, DriverSpec, ObstacleSpec, TimeGrid};
pub use forward_sde::{ForwardBundle, ReflectionScheme};
pub use solver::{SolutionBundle, SolveMethod};
