//! Convolutional handwritten-character classifier built from first
//! principles: tensors, layers with hand-written gradients, Adam, an image
//! pipeline, dataset handling and evaluation metrics.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Scalar, Shape, Tensor};
