//! A desk-scale confidential inference stack: a software-simulated TEE
//! platform with measured launch and sealing, a remote-attestation
//! verifier service, RA-TLS-style attested channels, encrypted model
//! provisioning, a deterministic toy language model served from inside
//! the simulated enclave, an adversary harness covering the three threat
//! surfaces, and a benchmark harness for token latency and throughput
//! with outlier filtering and overhead comparison.

pub mod adversary;
pub mod bench;
pub mod channel;
pub mod crypto;
pub mod enclave;
pub mod inference;
pub mod manifest;
pub mod model;
pub mod net;
pub mod orchestrator;
pub mod verifier;
