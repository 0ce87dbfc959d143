//! Neural internal vehicle model, iLQR model-predictive control, a perturbable
//! ground-truth simulator, the recurrent adaptation policy and its training.

pub mod dynamics;
pub mod envsim;
pub mod error;
pub mod mpc;
pub mod policy;
pub mod training;

pub use error::{CoreError, Result};
