//! Hyperspectral image classification: PCA band reduction, patch
//! extraction, a 3-D/2-D convolution stem, a gate-shift-fuse block, a
//! semantic tokenizer and a transformer encoder, trained with Adam and
//! scored with OA / AA / kappa.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gsf;
pub mod metrics;
pub mod model;
pub mod palette;
pub mod pca;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
