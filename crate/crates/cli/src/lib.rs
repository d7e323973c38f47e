//! Library surface of the pipeline CLI, so integration tests can drive the
//! stages in-process.

pub mod commands;
pub mod manifest;
pub mod simulate;
