//! Pipeline plumbing behind the `mse2e` binary: config parsing, checkpoint
//! IO, and the command implementations. Exposed as a library so integration
//! tests can drive training and decoding in-process.

pub mod analyze;
pub mod checkpoint;
pub mod commands;
pub mod config;
