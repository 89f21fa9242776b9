//! Spiking event + skeleton action recognition.
//!
//! The crate is organised bottom-up: [`tensor`] provides dense tensors and a
//! gradient tape, [`neurons`] the spiking building blocks, and the encoder,
//! refinement, fusion and bottleneck modules compose them into [`model::Model`].
//! [`data`] synthesises paired skeleton/event samples, [`trainer`] runs the
//! optimisation loop and [`energy`] turns measured firing rates into an
//! operation and energy estimate.

pub mod checkpoint;
pub mod config;
pub mod ctx;
pub mod data;
pub mod dib;
pub mod energy;
pub mod error;
pub mod event;
pub mod fusion;
pub mod model;
pub mod neurons;
pub mod skeleton;
pub mod sse;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
