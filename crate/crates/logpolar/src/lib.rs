//! Scale-invariant local patch description via log-polar sampling.
//!
//! The crate covers the full pipeline:
//!
//! - [`image`]: grayscale images, PGM/raw-float codecs, mirror padding and
//!   bilinear patch extraction.
//! - [`geometry`]: keypoints and the two sampling-grid constructions
//!   (log-polar and cartesian) around a keypoint.
//! - [`nn`]: minimal differentiable layers (convolution, normalizations,
//!   ReLU/dropout, L2 normalization) with explicit backward passes, an SGD
//!   optimizer, and a finite-difference gradient checker.
//! - [`net`]: the 7-convolution descriptor network, descriptor extraction,
//!   training epochs, and checkpoint/descriptor file formats.
//! - [`loss`]: pairwise distance matrices, hardest-in-batch negative mining,
//!   and the margin triplet loss.
//! - [`datagen`]: ground-truth correspondence construction from homographies
//!   or depth+pose, synthetic view-pair generation, and batch assembly.
//! - [`eval`]: FPR95, FPR95 binned by scale/orientation mismatch, and the
//!   rank-based patch retrieval protocol.
//! - [`config`]: the flat key=value run configuration shared by all commands.
//!
//! See the `examples/` directory for runnable entry points to each major
//! capability; the `logpolar` binary wires them into reproducible runs.

pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod net;
pub mod nn;
pub mod run;
pub mod trend;

pub use error::{Error, Result};
