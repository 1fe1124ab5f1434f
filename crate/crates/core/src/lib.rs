pub mod covariance;
pub mod deflation;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod simgen;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
