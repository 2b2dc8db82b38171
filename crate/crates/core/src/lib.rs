//! Orchestration for crowd-powered conversational agents.
//!
//! A group of transient workers answers a user as if they were one agent.
//! Workers propose replies and vote; a reply reaches the user once enough
//! of the workers on the page back it. Around that core sit the session
//! lifecycle, reward points, recruiting with a paid retainer pool, cost and
//! latency analytics, and a deterministic simulator.
//!
//! All state is a fold over an append-only [`event::EventLog`]. The
//! [`gateway::Chorus`] engine validates commands, emits events and applies
//! them; [`gateway::SystemState::replay`] rebuilds the same state from a log.

pub mod analytics;
pub mod config;
pub mod consensus;
pub mod error;
pub mod event;
pub mod gateway;
pub mod ids;
pub mod incentives;
pub mod lifecycle;
pub mod money;
pub mod recruiting;
pub mod sim;
pub mod time;

pub use config::ChorusConfig;
pub use error::{ChorusError, ReplayError};
pub use event::{Event, EventKind, EventLog, EventLogEntry};
pub use gateway::{Chorus, SystemState};
pub use ids::{AssignmentId, FactId, HitId, MessageId, Participant, SessionId, UserId, WorkerId};
pub use money::Cents;
pub use time::Timestamp;
