//! T1w to FA/MD volume synthesis with a 3D TransUNet, slice-vote diagnosis,
//! analytic phantoms and evaluation metrics, on a small reverse-mode
//! autodiff engine.

pub mod classifier;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod synthnet;
pub mod tensor;
pub mod trainer;
pub mod volume;
mod window;

pub use error::{Error, Result};
