//! Adjoint-based control of an interacting crowd by a few external agents,
//! at the particle level and at the mean-field (Vlasov) level.

pub mod error;
pub mod harness;
pub mod meanfield;
pub mod metrics;
pub mod micro;
pub mod model;
pub mod optimize;

pub use error::{Error, Result};
