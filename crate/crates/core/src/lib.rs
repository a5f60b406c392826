//! Cloud security assessment engine: HARM construction from inventory and
//! scan data, attack-path metrics, and Moving Target Defense evaluation and
//! deployment against a simulated OpenStack-style provider.

pub mod harm;
pub mod collector;
pub mod error;
pub mod fixtures;
pub mod inventory;
pub mod metrics;
pub mod mtd;
pub mod num;
pub mod orchestrator;
pub mod provider;
pub mod vuln;

pub use error::{Error, Result};
