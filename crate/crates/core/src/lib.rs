//! Certification and Monte-Carlo exploration of consensus for input-saturated
//! multi-agent systems whose directed communication topology switches as a
//! continuous-time Markov chain with an uncertain (polytopic) rate matrix.
//!
//! The crate reduces the consensus question to stability of a pivot-relative
//! disagreement system, assembles the associated matrix-inequality
//! certificates as conic feasibility/optimization problems, solves them, and
//! cross-validates every certificate by integrating the switched saturated
//! dynamics along sampled mode trajectories.
//!
//! Module map:
//! - [`sysmodel`]: network description (agent matrices, per-mode graphs,
//!   actuator limit) and structural validation, including config I/O.
//! - [`markov`]: generator polytope, mixing, and jump-trajectory sampling.
//! - [`disagreement`]: pivot-relative coordinates, saturation/dead-zone
//!   nonlinearities, and the reduced switched system matrices.
//! - [`lmi`]: decision variables, affine block-matrix expressions, and the
//!   certificate assemblers (analysis, origin-start, L2 gain, synthesis,
//!   ellipsoid containment).
//! - [`optimize`]: the conic-solver bridge with independent post-solve
//!   verification, plus the bisection drivers and parameter sweeps.
//! - [`regions`]: ellipsoid-family algebra (membership, inscribed checks,
//!   boundary sampling, 2-D slices for plotting).
//! - [`simulate`]: fixed-step integration of the switched saturated network
//!   with energy-budgeted disturbances and empirical certificate checks.

pub mod disagreement;
pub mod error;
pub mod lmi;
pub mod markov;
pub mod optimize;
pub mod regions;
pub mod simulate;
pub mod sysmodel;

pub use error::{Error, Result};
