//! Deterministic simulator for quality-aware hierarchical federated learning.

pub mod client;
pub mod device;
pub mod imaging;
pub mod nn;
pub mod orchestrator;
pub mod partition;
pub mod privacy;
pub mod seed;
pub mod server;
