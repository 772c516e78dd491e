//! Class-imbalanced semi-supervised learning on synthetic 2-D data.
//!
//! The crate generates imbalanced two-moons / four-spins splits, trains a
//! small tanh network under supervised, Pi-model, Mean Teacher,
//! Pseudo-Label and suppressed-consistency Mean Teacher regimes, and
//! provides closed-form checks of how an EMA target trails the student.

pub mod analysis;
pub mod campaign;
pub mod config;
pub mod data;
pub mod losses;
pub mod net;
pub mod optim;
pub mod report;
pub mod rng;
pub mod train;
