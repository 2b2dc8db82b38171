//! Reward points and bonus pay.
//!
//! Every worker action earns points, waiting included, so workers who stay
//! on an idle conversation still accumulate credit. A worker may only submit
//! once their session total reaches the configured minimum. Totals are
//! converted to bonus pay when the session closes.

use serde::{Deserialize, Serialize};

use crate::config::IncentiveConfig;
use crate::ids::{SessionId, WorkerId};
use crate::money::Cents;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointAction {
    Propose,
    Vote,
    ProposalAccepted,
    PostFact,
    Waiting,
}

impl PointAction {
    pub fn points(self, cfg: &IncentiveConfig) -> u32 {
        let p = &cfg.points_per_action;
        match self {
            PointAction::Propose => p.propose,
            PointAction::Vote => p.vote,
            PointAction::ProposalAccepted => p.proposal_accepted,
            PointAction::PostFact => p.post_fact,
            PointAction::Waiting => p.waiting,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub action: PointAction,
    pub points: u32,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointsLedger {
    pub session_id: SessionId,
    pub worker_id: WorkerId,
    pub entries: Vec<LedgerEntry>,
    pub total: u32,
    /// Waiting is credited in whole intervals counted from here.
    pub waiting_anchor: Timestamp,
}

impl PointsLedger {
    pub fn new(session_id: SessionId, worker_id: WorkerId, joined_at: Timestamp) -> Self {
        Self {
            session_id,
            worker_id,
            entries: Vec::new(),
            total: 0,
            waiting_anchor: joined_at,
        }
    }

    pub fn record(&mut self, action: PointAction, points: u32, at: Timestamp) {
        self.entries.push(LedgerEntry { action, points, at });
        self.total += points;
    }

    /// Records `intervals` whole waiting intervals and advances the anchor.
    pub fn record_waiting(&mut self, intervals: u32, points: u32, at: Timestamp, interval_ms: u64) {
        self.record(PointAction::Waiting, points, at);
        self.waiting_anchor = self.waiting_anchor + u64::from(intervals) * interval_ms;
    }

    /// Whole waiting intervals elapsed since the anchor.
    pub fn waiting_intervals_due(&self, now: Timestamp, interval_ms: u64) -> u32 {
        (now.since(self.waiting_anchor) / interval_ms) as u32
    }

    pub fn eligible_to_submit(&self, cfg: &IncentiveConfig) -> bool {
        self.total >= cfg.min_points_to_submit
    }

    pub fn entries_total(&self) -> u32 {
        self.entries.iter().map(|e| e.points).sum()
    }
}

/// Bonus for a point total, rounded half-up to the cent.
pub fn bonus_for_points(points: u32, cfg: &IncentiveConfig) -> Cents {
    cfg.bonus_per_point.times(u64::from(points))
}
