//! Large-deviation rate functions for the empirical measure of
//! Metropolis-Hastings chains on finite state spaces and 1-D grids.
//!
//! The crate is organised bottom-up:
//!
//! * [`measures`]: discrete and hybrid probability measures, relative
//!   entropy, total variation, Levy-Prohorov and Wasserstein-1 distances.
//! * [`kernel`]: building the MH kernel `K = a + diag(r)` from a target and a
//!   proposal, plus structural diagnostics (invariance, irreducibility,
//!   Feller continuity, the rejection-atom witness, the Lyapunov tilt).
//! * [`sampler`]: seeded chain simulation, empirical measures, exact Laplace
//!   functionals and exact enumeration of the law of the empirical measure.
//! * [`rate`]: the rate function as an entropic projection (Sinkhorn / IPFP),
//!   the Donsker-Varadhan dual, kernel extraction and splitting, singular and
//!   hybrid rates, and Perron/Legendre duality checks.
//! * [`smoothing`]: ball mollification of singular measures and the
//!   associated invariant kernels and cost bounds.
//! * [`verify`]: built-in instances and the verification suites used by the
//!   CLI and the acceptance tests.

pub mod error;
pub mod ext;
pub mod kernel;
pub mod matrix;
pub mod measures;
pub mod rate;
pub mod sampler;
pub mod smoothing;
pub mod verify;

pub use error::{Error, Result};
pub use ext::ExtReal;
pub use kernel::{MhKernel, ProposalSpec, StochasticKernel, TargetSpec};
pub use matrix::Matrix;
pub use measures::{DiscreteMeasure, HybridMeasure, StateSpace};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
