pub mod error;
pub mod layers;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
pub mod cost_volume;
pub mod regression;
pub mod aggregation;
pub mod backbone;
pub mod model;
pub mod io;
pub mod metrics;
pub mod training;
pub mod gradcheck;
pub mod analysis;
