//! Desk-scale laboratory for policy-optimization convergence properties on
//! exactly-enumerable multi-turn bandits and finite-horizon MDPs.
//!
//! Everything that is an expectation in the algorithms has an exact-mode
//! realization by exhaustive probability-weighted enumeration, so the
//! convergence, bias, and drift properties checked by the `verify` suites
//! hold to numerical (not statistical) tolerances.

pub mod advantage;
pub mod envs;
pub mod error;
pub mod policy;
pub mod report;
pub mod rng;
pub mod rollout;
pub mod seeupo;
pub mod suite;
pub mod theory;
pub mod updates;
pub mod verify;

pub use error::{CoreError, Result};
