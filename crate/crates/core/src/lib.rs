//! Deterministic federated-learning simulator for studying backdoor attacks
//! and defenses.
//!
//! Aggregation rules ([`aggregation::Aggregator`]) and malicious strategies
//! ([`attacks::Attack`]) are trait objects looked up by name in a
//! [`registry::Registry`], so experiments select them from config at runtime.

pub mod aggregation;
pub mod attacks;
pub mod backdoor;
pub mod config;
pub mod csft;
pub mod data;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod registry;
pub mod report;
pub mod seed;
pub mod weights;

pub use error::{FlError, Result};
pub use weights::WeightVector;
