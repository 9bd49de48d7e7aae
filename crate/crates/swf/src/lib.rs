//! Wright–Fisher diffusions run on random clocks.
//!
//! The crate covers the clock families (subordinators, their inverses and
//! compositions), the alternating series that give the transition mixture
//! weights, exact samplers built on those series, and filtering/smoothing
//! recursions whose states are finite mixtures of Dirichlet laws.

pub mod clocks;
pub mod error;
pub mod filtering;
pub mod hp;
pub mod parallel;
pub mod quad;
pub mod special_fn;
pub mod swf_dual;
pub mod swf_sampler;
pub mod wf_core;

pub use error::{Result, SwfError};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
