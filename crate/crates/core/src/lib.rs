//! Identifiability analysis for discrete-time LTI systems and design of
//! low-rank LQR controllers that make the closed-loop dynamics impossible to
//! identify from logged input/output data.
//!
//! The crate answers two questions about a parameterized system:
//!
//! * **Can a curious observer recover the parameters or the dynamics from a
//!   logged run?** The [`sensitivity`] module builds the output-sensitivity
//!   matrix, Fisher information matrix, input Jacobian, and mixed
//!   input/parameter Hessian for a trajectory; [`identifiability`] turns
//!   those into per-parameter and whole-dynamics verdicts, certificate
//!   witnesses, and a reparameterization that splits identifiable from
//!   unidentifiable directions.
//! * **Can a controller be chosen so the answer becomes "no"?** The
//!   [`controller`] module designs rank-limited LQR state feedback whose
//!   input excitation is confined to a low-dimensional subspace, leaving the
//!   dynamics unidentifiable while keeping the loop stable and the cost close
//!   to optimal.
//!
//! The [`adversary`] module plays the opposing side: least-squares Markov
//! -parameter estimation and gradient-descent parameter identification, plus
//! Monte Carlo drivers that measure how identification error scales with
//! sample size and input rank. The `unident` binary (see [`cli`]) exposes all
//! of this on the command line.

pub mod adversary;
pub mod cli;
pub mod controller;
pub mod error;
pub mod identifiability;
pub mod numerics;
pub mod sensitivity;
pub mod system_model;

pub use error::{Error, Result};
