//! Pipeline stages and the HTTP server behind the `triadic` binary.

pub mod pipeline;
pub mod server;
