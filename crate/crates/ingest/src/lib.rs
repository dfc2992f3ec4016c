//! Acquisition side of a session: OSC over UDP from the headband bridges,
//! gaze over MQTT, a live WebSocket view with operator commands, and
//! crash-tolerant recording to CSV with a session manifest.
//!
//! Also carries the pieces needed to exercise all of that without hardware:
//! a paced replayer for synthetic or recorded sessions and a small MQTT
//! broker.

pub mod broker;
pub mod config;
pub mod control;
pub mod gaze;
mod intake;
pub mod live;
mod recorder;
pub mod replay;
pub mod service;
pub mod simulation;

use thiserror::Error;

pub use broker::Broker;
pub use config::{IngestConfig, LiveConfig, ParticipantConfig};
pub use control::{Ack, Command, CommandSender};
pub use gaze::GazePayload;
pub use intake::{IntakeStats, RECV_BUFFER_BYTES};
pub use live::{LiveFrame, LIVE_SCHEMA, LIVE_VERSION};
pub use replay::{ReplayConfig, ReplayError, ReplaySummary, Replayer};
pub use service::{start, RunningSession, SessionStats};
pub use simulation::{Simulation, SimulationSpec};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Recording(#[from] engage_core::recording::RecordingError),
}
