//! Policy extraction from partial observations of linear-Gaussian
//! controlled hidden Markov models.

pub mod apcd;
pub mod checks;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lqer;
pub mod model;
pub mod policy;
pub mod projection;
pub mod registry;
pub mod schema;
pub mod simulator;
pub mod smoothing;
pub mod testing;

pub use error::{ApcdError, Result};
