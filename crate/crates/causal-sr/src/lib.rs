//! Rate-distortion analysis for k-user successive refinement with causal
//! decoder side information.
//!
//! The library computes three things about a finite-alphabet instance of the
//! problem:
//!
//! * the rate-distortion region, through its supporting-hyperplane
//!   characterization ([`region`]);
//! * a lower bound on the strong converse exponent — the rate at which the
//!   probability that every user meets its distortion level decays to zero
//!   outside the region ([`exponent`]);
//! * exact and Monte Carlo evaluations of concrete block codes with causal
//!   symbolwise decoding, used to check the non-asymptotic bound
//!   `P_c ≤ (2k+3)·exp(−nF)` against real codes ([`sim`]).
//!
//! All information quantities are in nats. Instances are described by a
//! [`model::SourceProblem`]: the number of users `k`, a joint source/side
//! information pmf over `(X, Y_1, …, Y_k)`, and one distortion matrix per
//! user. See the `book/` directory of the repository for a guided tour.

pub mod cli;
pub mod exponent;
pub mod model;
pub mod opt;
pub mod prob;
pub mod region;
pub mod sim;

mod booktests;

use thiserror::Error as ThisError;

/// Library-wide error type.
#[derive(Debug, ThisError)]
pub enum Error {
    /// Caller passed something structurally invalid (bad axis name, weight
    /// constraint violated, mismatched sizes).
    #[error("input error: {0}")]
    Input(String),
    /// A document (problem file, code file) failed validation.
    #[error("data error: {0}")]
    Data(String),
    /// A quantity left its numerical domain (zero denominator under positive
    /// weight, log of zero on a positive-mass cell).
    #[error("numerical domain error: {0}")]
    Domain(String),
    /// An enumeration or state-space budget was exceeded; the message carries
    /// a remediation hint.
    #[error("budget exceeded: {0}")]
    Budget(String),
    /// An iterative solver failed to converge within its iteration cap.
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
