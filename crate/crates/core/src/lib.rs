//! Mobility- and energy-aware clustering for wireless sensor networks.
//!
//! [`protocol`] holds the per-node state machine, [`engine`] the
//! discrete-event simulator that drives it, and [`experiment`] the seed sweeps
//! and mode comparisons behind the `mecp` binary.

pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod mobility;
pub mod overlay;
pub mod protocol;
pub mod radio;
pub mod scenario;
pub mod trace;

pub use engine::{ClusterSnapshot, EngineError, RoundReport, RoundSchedule, Simulation};
pub use protocol::{NodeId, NodeState, ProtocolConfig};
pub use scenario::{parse_scenario, ConfigError, Mode, ScenarioConfig};
