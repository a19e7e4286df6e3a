//! Library surface of the experiment CLI, exposed so integration tests can
//! drive the same pipelines as the binary.

pub mod config;
pub mod pipeline;
