//! Convolutional mean-field smoothing of per-voxel label probabilities.
//!
//! Given a tensor of per-voxel label probabilities over a 2-D image or a 3-D
//! video volume, this crate refines the labeling under a high-order Markov
//! random field whose pairwise cost couples each voxel to a neighborhood of
//! label contexts weighted by image- and position-dependent distances. Two
//! inference paths are provided and kept numerically interchangeable:
//!
//! * [`meanfield`] — an explicit, unoptimized mean-field solver that applies
//!   the closed-form update directly (the reference path);
//! * [`network`] — the same single update expressed as a stack of
//!   convolution-shaped layers (local distance convolution, context
//!   convolution, block-min pooling, softmax recombination), which is the
//!   form that scales and the form whose parameters are trained.
//!
//! The remaining modules supply the shared vocabulary: dense tensors and
//! label maps ([`tensor`]), temporal links derived from optical flow
//! ([`links`]), intensity/position distances ([`distance`]), the energy and
//! free-energy definitions ([`energy`]), gradient-based parameter fitting
//! ([`train`]), segmentation quality metrics ([`metrics`]), file formats and
//! run configuration ([`io`], [`config`]), and synthetic scene generation for
//! end-to-end checks ([`synth`]).

pub mod config;
pub mod distance;
pub mod energy;
pub mod error;
pub mod io;
pub mod links;
pub mod meanfield;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{DpnError, Result};
