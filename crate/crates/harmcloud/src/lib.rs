//! Service, CLI and provider front end around `harmcloud-core`.

pub mod cli;
pub mod client;
pub mod engine;
pub mod provider_http;
pub mod service;
pub mod store;

pub use engine::Engine;
