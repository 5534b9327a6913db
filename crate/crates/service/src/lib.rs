//! HTTP service and command line around `abb-core`.

pub mod api;
pub mod cli;
pub mod manifest;
pub mod markers;
pub mod profile;
pub mod schema;
pub mod settings;
