//! Road-segment trajectory prediction.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gat;
pub mod geo;
pub mod geojson;
pub mod mapmatch;
pub mod metrics;
pub mod predictor;
pub mod roadnet;
pub mod seq2seq;
pub mod synth;

pub use error::{Error, Result};
