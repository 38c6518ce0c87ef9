//! Numerical core of prototype-grounded neurosymbolic learning.
//!
//! `no_std` with `alloc`. File formats, configuration and the command line
//! live in the `protonesy` crate.
#![no_std]
extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod backbone;
pub mod episodic;
pub mod gradcheck;
pub mod knowledge;
pub mod metrics;
pub mod prototypes;
pub mod semloss;
pub mod shortcuts;
pub mod stats;
pub mod tasks;
