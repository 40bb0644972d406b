pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod reinforcer;
pub mod sequence;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{G2pError, Result};
pub use tensor::{Scalar, Tensor};
