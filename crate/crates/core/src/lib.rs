//! Symmetry-aware skeleton graph convolution with deformable temporal
//! convolution.
//!
//! Dense `f64` kernels, layers with analytic backward passes, the full
//! nine-block network and its optimizer, usable without `std`.

#![no_std]

extern crate alloc;

pub mod activation;
pub mod dtc;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tensor;
pub mod tsegc;

pub use error::{Error, Result};
pub use graph::{hop_table, normalize_adjacency, HopTable, SkeletonGraph};
pub use model::{ModelConfig, TsegcnModel};
pub use params::{BufferStore, ParamId, ParamStore};
pub use tensor::Tensor;
