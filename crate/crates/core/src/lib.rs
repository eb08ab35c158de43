//! Blind motion deblurring with frequency-split branches, grouped feature
//! fusion and multi-scale stripe attention, trained on CPU with a small
//! reverse-mode autodiff tape.

pub mod blur_synth;
pub mod config;
pub mod error;
pub mod freq;
pub mod gff;
pub mod image_io;
pub mod layers;
pub mod mssa;
pub mod net;
pub mod selftest;
pub mod tensor;
pub mod train_eval;

pub use error::{McmsError, Result};
pub use net::{McmsModel, ModelConfig};
pub use tensor::{Matrix, Real, Tensor4};
