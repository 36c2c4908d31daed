//! Coordinate descent with exact line search on structured convex
//! quadratics, in the three classical orderings: cyclic (CCD), fully
//! randomized (RCD), and random-permutations (RPCD).
//!
//! The library builds the perturbed one-spike matrix family, runs the
//! variants in O(n) per coordinate update, computes expectations over
//! permutation matrices exactly (by enumeration) or by Monte Carlo,
//! drives the four-term bounding recurrence for the expected objective,
//! and evaluates the theoretical per-epoch rate formulas against
//! observed rates. The `harness` module and the `permcd` binary wrap
//! all of this into reproducible table/figure/verification experiments.

pub mod cd_engine;
pub mod error;
pub mod harness;
pub mod matrices;
pub mod perm_expect;
pub mod rates;
pub mod recurrence;

pub use error::{Error, Result};

/// Short build identifier embedded in experiment output.
pub const BUILD_ID: &str = env!("PERMCD_BUILD_ID");
