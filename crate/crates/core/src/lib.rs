//! Deterministic discrete-event simulator of upstream latency under load on a
//! rate-shaped access link, comparing a tail-drop FIFO sized by static buffer
//! control against the DOCSIS-PIE active queue manager.

pub mod error;
pub mod fleet;
pub mod harness;
pub mod net;
pub mod qdisc;
pub mod report;
pub mod sim;
pub mod testbed;
pub mod traffic;

pub use error::{Error, Result};
pub use fleet::{FleetConfig, FleetSummary};
pub use harness::{run_latency_under_load, summarize, TestConfig, TestReport};
pub use net::LinkConfig;
pub use qdisc::{Discipline, PieParams};
pub use sim::SimTime;
