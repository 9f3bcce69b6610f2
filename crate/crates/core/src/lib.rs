//! Distributed agent-based simulation: ranks own connected sets of
//! partition boxes, exchange boundary copies ("aura") every iteration, move
//! agents to their authoritative rank and rebalance periodically.
//!
//! Agents travel in a single-buffer wire format that is read in place, with
//! optional LZ4 and delta encoding against a shared reference.

pub mod agent;
pub mod compress;
pub mod config;
pub mod delta;
pub mod engine;
pub mod geom;
pub mod grid;
pub mod ids;
pub mod loadbalance;
pub mod models;
pub mod partition;
pub mod rng;
pub mod selftest;
pub mod sim;
pub mod testkit;
pub mod transport;
pub mod wire;

pub use agent::{AgentRecord, Behavior, Payload, SirState};
pub use config::{Boundary, Bounds, LbCost, ModelKind, RunConfig, TransportKind};
pub use engine::{EngineError, IterationStats, RankRuntime, RunHooks};
pub use geom::{Aabb, Vec3};
pub use ids::{GlobalAgentId, LocalAgentId, Rank};
pub use loadbalance::LbMode;
pub use sim::{run, run_inproc, RankResult};
pub use transport::{Endpoint, Tag, TransportError};
