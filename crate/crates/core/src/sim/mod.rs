//! Deterministic discrete-event simulation of users, workers and the crowd
//! platform.
//!
//! [`run_scenario`] drives the same engine the service uses over a
//! [`VirtualClock`]; every random draw comes from one generator seeded by
//! the scenario, so equal scenarios give byte-identical logs.

mod agent;
mod clock;
mod corpus;
mod fuzz;
mod harness;
mod invariants;
mod scenario;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use agent::{
    fact_text, is_goodbye, is_spam_text, scripted_step, Action, AgentParams, AgentProfile,
    Behavior, MsRange, Observation, PendingProposal, SubmitPolicy, CONFIRM_TEXT, FACT_SPAM_POOL,
    REPLY_POOL, SPAM_POOL,
};
pub use clock::VirtualClock;
pub use corpus::{generate_corpus, CorpusTargets};
pub use fuzz::{fuzz, fuzz_scenario, FuzzFailure, FuzzReport};
pub use invariants::check_invariants;
pub use scenario::{
    AdminAction, AdminCommand, CrowdScript, GeneratedUsers, PlatformModel, Preset, Scenario,
    SessionPlan, UserScript, UserTurn, WorkerGroup,
};

use crate::analytics::{
    deployment_cost_summary, session_statistics, worker_quality, CostReport, QualityThresholds,
    SessionStats, WorkerQuality,
};
use crate::error::ChorusError;
use crate::event::EventLog;
use crate::gateway::SystemState;
use crate::time::{Timestamp, DAY_MS};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("infeasible corpus targets: {0}")]
    InfeasibleTargets(String),
    #[error("engine error: {0}")]
    Engine(#[from] ChorusError),
    #[error("simulation made no progress at {0}")]
    Stalled(Timestamp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub events: usize,
    pub ended_at: Timestamp,
    pub sessions: SessionStats,
    pub cost: CostReport,
    pub workers: Vec<WorkerQuality>,
    /// Requests the engine refused that a real client would also have seen
    /// refused, by kind.
    pub rejected_requests: BTreeMap<String, u64>,
    pub invariant_violations: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: EventLog,
    pub state: SystemState,
    pub summary: RunSummary,
}

/// Runs a scenario to completion and checks the protocol invariants over
/// the result.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, SimError> {
    let mut h = harness::Harness::new(scenario)?;
    h.run()?;
    let rejected_requests = std::mem::take(&mut h.tolerated);
    let (state, log, _platform) = h.engine.into_parts();
    let config = state.config.clone();
    let entries = log.entries();
    let ended_at = entries.last().map(|e| e.at).unwrap_or(Timestamp::ZERO);
    let days = scenario.duration_ms.div_ceil(DAY_MS).max(1) as u32;
    let cost = deployment_cost_summary(
        entries,
        days,
        &config.recruiting.fee_schedule,
        config.recruiting.base_pay,
        config.recruiting.retainer_fee_percent,
    );
    let invariant_violations = check_invariants(&config, entries, &state);
    let summary = RunSummary {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        events: entries.len(),
        ended_at,
        sessions: session_statistics(entries),
        cost,
        workers: worker_quality(entries, &QualityThresholds::default()),
        rejected_requests,
        invariant_violations,
    };
    Ok(RunOutput {
        log,
        state,
        summary,
    })
}
