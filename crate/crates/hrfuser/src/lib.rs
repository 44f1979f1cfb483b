//! HRFuser: a multi-resolution, multi-modal fusion backbone for 2D object
//! detection, built on an embedded f64 autodiff engine.
//!
//! The crate is organized around six subsystems:
//!
//! - [`tensor`] — dense tensors, tape-based reverse-mode gradients, a
//!   finite-difference oracle, and the binary checkpoint format.
//! - [`attention`] — window partitioning and the multi-window cross-attention
//!   (MWCA) fusion block that merges secondary sensors into the camera stream.
//! - [`backbone`] — the full network: stems, bottleneck and transformer
//!   stages, multi-resolution exchange, per-modality fusion, and the neck.
//! - [`sensing`] — perspective projection of point-cloud sensors into the
//!   image plane, rasterization, normalization, and label projection.
//! - [`detection`] — an anchor-free detection head, its training loss, box
//!   decoding, and a COCO-style average-precision evaluator.
//! - [`harness`] — synthetic scene generation, the training loop, experiment
//!   configuration, and reporting; the `hrfuser` binary drives it.
//!
//! The book under `book/` walks through each subsystem with runnable
//! examples; those snippets are compiled as doc-tests by the
//! `hrfuser-book` crate.

pub mod attention;
pub mod backbone;
pub mod detection;
pub mod error;
pub mod harness;
pub mod imgio;
pub mod nn;
pub mod rng;
pub mod sensing;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
