//! Command-line front end: configuration handling and the
//! generate / train / verify / export pipeline.

pub mod config;
pub mod pipeline;
