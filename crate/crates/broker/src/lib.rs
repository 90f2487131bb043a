//! License broker for the Aegon protocol.
//!
//! [`Broker`] holds all state and implements each operation synchronously;
//! [`http::router`] exposes it as a JSON API and [`client::BrokerClient`]
//! is the matching blocking client.

pub mod client;
pub mod fetch;
pub mod http;
pub mod service;

pub use service::{ApiError, Broker, BrokerConfig, StartupError};
