//! Monte Carlo simulator for the uplink of a cell-free massive MIMO system.
//!
//! A set of `L` access points (APs), each with `N` antennas, jointly serves
//! `K` single-antenna user equipments (UEs) over a shared time-frequency
//! resource. The crate simulates the full uplink chain:
//!
//! 1. [`geometry`] — random AP/UE placement on a square service area, a
//!    three-slope distance-based path loss and spatially correlated
//!    log-normal shadowing, producing large-scale fading coefficients.
//! 2. [`channel`] — correlated Rayleigh fading: per-(UE, AP) spatial
//!    covariance matrices and sampling of channel realizations.
//! 3. [`pilot`] — pilot assignment (with reuse when UEs outnumber pilots),
//!    the de-spread pilot observations, and per-AP linear MMSE channel
//!    estimation together with its error statistics.
//! 4. [`combining`] — receive combiners: local MMSE, centralized MMSE, and
//!    team-MMSE combiners for unidirectional (serial), centralized, and
//!    statistical CSI-sharing patterns.
//! 5. [`evaluation`] — hardening (use-and-then-forget) spectral-efficiency
//!    bound evaluated from Monte Carlo moments, with standard errors and
//!    CDF summaries.
//! 6. [`harness`] — experiment orchestration: reproducible seeding,
//!    parallel execution over deployment drops, sweeps, and CSV/JSON
//!    output.
//!
//! Everything downstream of the seed is deterministic: the same experiment
//! spec and seed produce byte-identical result files regardless of worker
//! count.

pub mod channel;
pub mod combining;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod pilot;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
