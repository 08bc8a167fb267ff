//! QP-based value-function approximation trained by Q-learning, with update
//! penalties that steer the learned equality matrix toward a banded
//! linear-MPC structure.

pub mod approximator;
pub mod env;
pub mod error;
pub mod experiment;
pub mod learner;
pub mod qp;
pub mod structure;

pub use error::{Error, Result};
