//! Diagonal convolutional gated recurrent networks ("improved Neural GPU")
//! for learning arithmetic and sequence algorithms from examples.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`graph`]: a small eager tensor library with a
//!   define-by-run reverse-mode tape, plus [`gradcheck`] for finite
//!   differences.
//! * [`cells`]: CGRU / DCGRU step functions with hard nonlinearities,
//!   saturation cost and candidate dropout.
//! * [`model`]: embedding, unrolled cell, readout and the multi-bin loss.
//! * [`optimizer`]: AdaMax with clipping by the decayed maximum, gradient
//!   noise, and the stall-driven learning-rate schedule.
//! * [`tasks`]: task generators, encodings, binning.
//! * [`trainer`], [`checkpoint`], [`viz`]: training loop, evaluation,
//!   persistence and execution-trace images.

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optimizer;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
