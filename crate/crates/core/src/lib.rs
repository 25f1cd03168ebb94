//! Deterministic simulator of a contract-coordinated affiliate escrow
//! campaign, with a forensic analyzer over its public trace.
//!
//! Everything is simulated: the ledger stands in for an account-based chain,
//! [`caststore`] for a churn-prone content-addressed store, and
//! [`symcrypto`] replaces real cryptography with inert symbolic records.
//! A run is a pure function of its [`agents::ScenarioConfig`].

pub mod agents;
pub mod caststore;
pub mod codec;
pub mod escrow;
pub mod forensics;
mod hexbytes;
pub mod ledger;
pub mod symcrypto;
pub mod trace;
pub mod types;

pub use hexbytes::hex_vec;
pub use types::{Address, ContractId, EventKind, Gas, GasSchedule, SampleId, TxHash, Wei};
