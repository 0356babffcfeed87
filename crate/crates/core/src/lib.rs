pub mod balance;
pub mod checkpoint;
pub mod dataset;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod objective;
pub mod ode;
pub mod params;
pub mod regularizers;
pub mod rff;
pub mod systems;
pub mod train;
pub mod types;

pub use error::{Error, Result};
