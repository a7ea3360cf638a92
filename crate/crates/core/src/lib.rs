//! From-scratch TransRUPNet polyp segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f32` tensors, a reverse-mode [`Tape`] and the TRUP1
//!   file format.
//! - [`nn`]: convolution, normalisation, activations, bilinear upsampling and
//!   the parameterised layer structs built on them.
//! - [`pvt`]: a three-stage pyramid vision transformer encoder with
//!   spatial-reduction attention.
//! - [`model`]: the full network (channel reduction, up blocks, decoder
//!   blocks, four-way concatenation and output head).
//! - [`metrics`], [`fps`]: training loss, segmentation metrics and the
//!   throughput harness.
//! - [`data`]: PPM/PGM ingestion, augmentation, splitting and a synthetic
//!   polyp generator.
//! - [`train`]: Adam, the epoch loop and checkpoint bundles.
//! - [`gradcheck`]: finite-difference checks for every op and the model.
//!
//! Everything is deterministic given a seed.

pub mod checkpoint;
pub mod data;
mod error;
pub mod fps;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pvt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, TransRUPNet};
pub use params::{Ctx, Mode, ParamId, ParamStore};
pub use tensor::{Gradients, Tape, Tensor, Var};
