//! Extremely weight-quantized (1-bit / 1.58-bit) spiking transformer
//! encoder, trained through its average-spiking-rate equilibrium.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod distill;
pub mod energy;
pub mod equilibrium;
pub mod error;
pub mod implicit_grad;
pub mod model;
pub mod neuron;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;

pub use error::{Error, Result};
