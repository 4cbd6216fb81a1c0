//! Emulated-network benchmarks for federated-learning model exchange.

mod codec;
pub mod harness;
pub mod message;
pub mod netem;
pub mod store;
pub mod transport;
