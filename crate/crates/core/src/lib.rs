//! Energy-adaptive preconditioned gradient descent.
//!
//! The core update keeps an energy variable `r` next to the iterate:
//!
//! ```text
//! v_k     = T(theta_k) grad l(theta_k),      l = sqrt(L + c)
//! r_{k+1} = r_k / (1 + 2 eta |v_k|^2)
//! theta_{k+1} = theta_k - 2 eta r_{k+1} v_k
//! ```
//!
//! so `r` decreases monotonically for every step size. Preconditioners cover
//! Hessian-Riemannian metrics built from Legendre barriers (with optional
//! affine equality constraints), the simplex metric, fixed SPD matrices and a
//! discretized Wasserstein information matrix for parametric densities.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod barrier;
pub mod baselines;
pub mod bench;
pub mod bounds;
pub mod error;
pub mod linalg;
pub mod objective;
pub mod precond;
pub mod problems;
pub mod stepper;
pub mod wngd;

pub use error::{Error, Result};
pub use objective::{Objective, ObjectiveSpec};
pub use precond::Preconditioner;
pub use stepper::{aepg_step, run_aepg, AepgConfig, RunStatus, RunTrace, StopMode};
