//! Encoder-only translation language models (TLM) and an encoder-decoder
//! baseline, built on the `tlm-tensor` autodiff crate.
//!
//! A TLM reads `<s> source </s> <t> target` as one sequence through a single
//! Transformer stack. The [`mask`] module fixes which positions may attend to
//! which; [`data`] builds the concatenated examples; [`model`] holds both
//! architectures; [`train`], [`decode`] and [`metrics`] cover the rest of the
//! experiment loop.

pub mod config;
pub mod data;
pub mod decode;
mod error;
pub mod experiment;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
