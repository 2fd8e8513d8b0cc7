//! Music-stimulus EEG classification from EEG optical flow.
//!
//! The pipeline cuts stimulus-locked epochs from a multichannel recording,
//! splits them into five rhythm bands, renders each band as a short video
//! of scalp topographies, and converts the video to dense optical flow.
//! A convolutional feature extractor, trained jointly on a natural-image
//! proxy task with a domain-confusion objective, turns every flow frame
//! into a feature vector that a two-layer LSTM classifies.

pub mod bandfilter;
pub mod classifier;
pub mod error;
pub mod formats;
pub mod ingest;
pub mod jointtrain;
pub mod nn;
pub mod optflow;
pub mod pipeline;
pub mod synth;
pub mod topomap;

pub use error::{Error, Result};
