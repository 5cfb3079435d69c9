//! Library surface of the pipeline driver, shared by the binary and the
//! acceptance suite.

pub mod manifest;
pub mod pipeline;
