//! Style/content disentangled GAN, self-contained on CPU.
//!
//! The generator consumes a latent code split into a content half and a
//! style half. Content flows through the main convolutional path; style is
//! mapped by an MLP to the scale/shift parameters of adaptive instance
//! normalization inside a stack of residual blocks. Consistency and
//! diversity losses measured through a fixed feature network keep the two
//! halves controlling disjoint aspects of the output, and a pair of
//! encoders learns to invert the generator for style transfer.
//!
//! Everything is built on a small reverse-mode autodiff tape over dense
//! `f64` tensors ([`tensor`]), with the GEMM inner loop delegated to
//! `matrixmultiply`.

pub mod config;
pub mod data;
pub mod evaluation;
pub mod layers;
pub mod losses;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;

mod error;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId, Var};
