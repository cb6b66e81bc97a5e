//! Modelled multivariate overlap (MMO) of vowel categories.
//!
//! Pipeline: load and filter formant tokens ([`data`]), normalize per speaker
//! ([`normalize`]), encode a model ([`design`]), fit a bivariate mixed model
//! ([`mixed`]), simulate predictive distributions per cell ([`simulate`]) and
//! measure their overlap ([`metrics`]). [`synth`] generates corpora with known
//! truth, and [`pipeline`] ties the stages together for the command line.

pub mod data;
pub mod design;
pub mod error;
pub mod linalg;
mod matser;
pub mod metrics;
pub mod mixed;
pub mod normalize;
pub mod pipeline;
pub mod simulate;
pub mod synth;

pub use error::{MmoError, Result};
