//! Transformation-consistent self-ensembling for semi-supervised image
//! segmentation.
//!
//! Everything in this crate is pure computation over in-memory buffers: a
//! small dense tensor engine with reverse-mode differentiation, a UNet-style
//! encoder/decoder, the dihedral transform group, the supervised and
//! consistency losses, a deterministic training loop, a synthetic dataset
//! generator and segmentation metrics. File formats and the command line
//! live in the companion `tcsm` crate.
//!
//! The crate builds without `std` (it needs `alloc`); the default `std`
//! feature only enables runtime CPU feature detection in the GEMM backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod transforms;

mod gemm;
mod math;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use rng::{RngStream, StreamKind};
pub use tensor::Tensor;
pub use transforms::TransformOp;
