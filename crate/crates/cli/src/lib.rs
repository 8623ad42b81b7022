//! Command-line driver for `seco-core` and the click-collection service.

pub mod app;
pub mod server;
