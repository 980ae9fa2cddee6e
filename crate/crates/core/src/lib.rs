//! Abiotic stress classification of plantlets from paired RGB and thermal
//! images.
//!
//! The crate covers the whole pipeline: dataset cataloging and thermal
//! decoding ([`dataset`]), mask morphology and resampling ([`imaging`]), the
//! temperature nearest-centroid baseline ([`baseline`]), a small from-scratch
//! CNN engine ([`network`]), triplets and label-duplication fusion with
//! rolling-window evaluation ([`fusion`]), and a synthetic greenhouse
//! ([`simulator`]) that provides ground truth for all of it.

pub mod baseline;
pub mod dataset;
mod error;
pub mod experiment;
pub mod fusion;
pub mod imaging;
pub mod network;
pub mod pipeline;
pub mod seed;
pub mod simulator;

pub use error::{Error, Result};
