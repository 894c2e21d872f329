//! LMHR: retrieval-augmented spatial-temporal forecasting over long
//! multivariate history.
//!
//! The pipeline encodes each series' long history into overlapping segment
//! representations, retrieves the most similar series and segments across
//! the batch without any learned parameters, fuses the retrieved context
//! through a transformer aggregator, learns a graph over the series with a
//! Gumbel-softmax relaxation, and feeds a compact spatial-temporal backend
//! on the most recent window. Everything trains end to end under a joint
//! regression + graph objective.

pub mod error;
pub mod aggregator;
pub mod backend;
pub mod config;
pub mod data;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod encoder;
pub mod retriever;

pub use error::{LmhrError, Result};
