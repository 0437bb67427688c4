//! Core of the TS-GAN cross-modality person re-identification framework.
//!
//! Everything in this crate is pure computation over in-memory data and
//! only needs an allocator: a small reverse-mode autograd engine over `f64`
//! tensors, the student/teacher/generator/discriminator networks, the loss
//! surface, the P×K sampler and synthetic paired-modality data, the
//! three-phase alternating trainer, and the retrieval metrics (CMC, mAP,
//! k-reciprocal re-ranking).
//!
//! File formats, configuration files, checkpoints and the command line live
//! in the `tsgan` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod schedule;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use config::{TrainConfig, Variant};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use image::{ImageBatch, Modality, PersonImage};
pub use tensor::Tensor;
