pub mod error;
pub mod fit;
pub mod glm;
pub mod io;
pub mod model;
pub mod penalty;
pub mod quadrature;
pub mod sampler;
pub mod sim;
pub mod tsp;
pub mod tuning;

pub use error::{Error, Result};
