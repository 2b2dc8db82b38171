//! Worker recruiting: HIT postings, assignments, and the retainer pool.
//!
//! Each new session posts one HIT. When the session ends, its unclaimed
//! assignments turn into 30-minute retainer slots; workers who pick them up
//! wait in the pool and are pinged oldest-first when a later session needs
//! hands. A pinged worker has 20 seconds to show up. Missing a ping sends
//! the worker to the back of the queue with a strike; the second strike
//! expires the assignment.

mod platform;

pub use platform::{
    ClaimEvent, ClaimLatencyModel, CrowdPlatform, HeavyTail, ManualPlatform, PlatformError,
    SimulatedPlatform,
};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::config::{RecruitingConfig, RecruitingPolicy};
use crate::event::{Event, EventLogEntry};
use crate::ids::{AssignmentId, HitId, SessionId, WorkerId};
use crate::money::{div_round_half_up, Cents};
use crate::time::{Timestamp, MINUTE_MS, SECOND_MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentState {
    Unclaimed,
    Claimed,
    InConversation,
    InRetainer,
    Submitted,
    Expired,
}

impl AssignmentState {
    pub fn can_transition_to(self, next: AssignmentState) -> bool {
        use AssignmentState::*;
        matches!(
            (self, next),
            (Unclaimed, Claimed)
                | (Unclaimed, Expired)
                | (Claimed, InConversation)
                | (Claimed, InRetainer)
                | (InConversation, Submitted)
                | (InConversation, InRetainer)
                | (InRetainer, InConversation)
                | (InRetainer, Expired)
        )
    }

    pub fn holds_worker(self) -> bool {
        !matches!(self, AssignmentState::Unclaimed | AssignmentState::Expired)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, AssignmentState::Submitted | AssignmentState::Expired)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentExpiry {
    /// A converted retainer slot nobody claimed in time.
    RetainerSlotUnclaimed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainerExit {
    Timeout,
    Strikes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum DispatchPhase {
    Pinged {
        deadline: Timestamp,
    },
    Joined,
    Missed {
        strikes: u32,
    },
    /// The session closed before the worker answered.
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("assignment {id}: illegal transition {from:?} -> {to:?}")]
    Illegal {
        id: AssignmentId,
        from: AssignmentState,
        to: AssignmentState,
    },
    #[error("unknown assignment {0}")]
    Unknown(AssignmentId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment_id: AssignmentId,
    pub hit_id: HitId,
    pub state: AssignmentState,
    pub worker_id: Option<WorkerId>,
    pub claimed_at: Option<Timestamp>,
    pub resolved_at: Option<Timestamp>,
    /// Set when an unclaimed assignment became a retainer slot.
    pub retainer_until: Option<Timestamp>,
    /// The session the holder is currently serving.
    pub serving: Option<SessionId>,
    pub history: Vec<(AssignmentState, Timestamp)>,
}

impl Assignment {
    pub fn new(assignment_id: AssignmentId, hit_id: HitId, at: Timestamp) -> Self {
        Self {
            assignment_id,
            hit_id,
            state: AssignmentState::Unclaimed,
            worker_id: None,
            claimed_at: None,
            resolved_at: None,
            retainer_until: None,
            serving: None,
            history: vec![(AssignmentState::Unclaimed, at)],
        }
    }

    pub fn transition(
        &mut self,
        to: AssignmentState,
        at: Timestamp,
    ) -> Result<(), TransitionError> {
        if !self.state.can_transition_to(to) {
            return Err(TransitionError::Illegal {
                id: self.assignment_id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        if to.is_terminal() {
            self.resolved_at = Some(at);
            self.serving = None;
        }
        if to == AssignmentState::Expired {
            self.worker_id = None;
        }
        self.history.push((to, at));
        Ok(())
    }

    /// Claimable now: unclaimed, and if converted, still inside its slot.
    pub fn claimable(&self, now: Timestamp) -> bool {
        self.state == AssignmentState::Unclaimed && self.retainer_until.is_none_or(|t| now < t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitPosting {
    pub hit_id: HitId,
    pub session_id: Option<SessionId>,
    pub assignments: Vec<AssignmentId>,
    pub posted_at: Timestamp,
    pub base_pay: Cents,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub worker_id: WorkerId,
    pub assignment_id: AssignmentId,
    pub entered_at: Timestamp,
    pub expires_at: Timestamp,
    pub strikes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ping {
    pub session_id: SessionId,
    pub sent_at: Timestamp,
    pub deadline: Timestamp,
}

/// Workers on standby, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainerPool {
    pub waiting: VecDeque<PoolEntry>,
    pub pings: BTreeMap<WorkerId, Ping>,
    pub dispatch_promise_ms: u64,
}

impl RetainerPool {
    pub fn new(dispatch_promise_ms: u64) -> Self {
        Self {
            waiting: VecDeque::new(),
            pings: BTreeMap::new(),
            dispatch_promise_ms,
        }
    }

    pub fn position(&self, w: &WorkerId) -> Option<usize> {
        self.waiting.iter().position(|e| &e.worker_id == w)
    }

    pub fn entry(&self, w: &WorkerId) -> Option<&PoolEntry> {
        self.waiting.iter().find(|e| &e.worker_id == w)
    }

    pub fn contains(&self, w: &WorkerId) -> bool {
        self.position(w).is_some()
    }

    /// Waiting workers without an outstanding ping, oldest first.
    pub fn available(&self, now: Timestamp) -> impl Iterator<Item = &PoolEntry> {
        self.waiting
            .iter()
            .filter(move |e| !self.pings.contains_key(&e.worker_id) && now < e.expires_at)
    }

    pub fn occupancy(&self, now: Timestamp) -> u32 {
        self.available(now).count() as u32
    }

    pub fn enter(&mut self, entry: PoolEntry) {
        debug_assert!(!self.contains(&entry.worker_id));
        self.waiting.push_back(entry);
    }

    pub fn remove(&mut self, w: &WorkerId) -> Option<PoolEntry> {
        self.pings.remove(w);
        let idx = self.position(w)?;
        self.waiting.remove(idx)
    }

    /// Moves a worker to the tail with one more strike.
    pub fn strike(&mut self, w: &WorkerId) -> Option<u32> {
        self.pings.remove(w);
        let mut e = self.waiting.remove(self.position(w)?)?;
        e.strikes += 1;
        let s = e.strikes;
        self.waiting.push_back(e);
        Some(s)
    }
}

/// How many workers to pull from the retainer and how many assignments to
/// post for a new session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecruitPlan {
    pub dispatch: u32,
    pub post: u32,
}

pub fn plan_recruitment(cfg: &RecruitingConfig, available_in_retainer: u32) -> RecruitPlan {
    let target = cfg.target_crowd_size;
    match cfg.policy {
        RecruitingPolicy::Static => RecruitPlan {
            dispatch: 0,
            post: target.min(cfg.max_assignments_per_hit),
        },
        RecruitingPolicy::Dynamic => {
            let dispatch = available_in_retainer.min(target);
            RecruitPlan {
                dispatch,
                post: (target - dispatch).min(cfg.max_assignments_per_hit),
            }
        }
    }
}

/// One worker's continuous stay in the retainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainerStay {
    pub entered_at: Timestamp,
    pub left_at: Timestamp,
}

/// Retainer waiting pay plus platform fee: the quoted rate per 30 minutes,
/// pro-rated to whole seconds and rounded half-up to the cent.
pub fn retainer_pay_owed(
    stays: &[RetainerStay],
    window: Option<(Timestamp, Timestamp)>,
    rate_per_half_hour: Cents,
    fee_percent: u32,
) -> Cents {
    let total_secs: u128 = stays
        .iter()
        .map(|s| {
            let (lo, hi) = match window {
                Some((a, b)) => (s.entered_at.max(a), s.left_at.min(b)),
                None => (s.entered_at, s.left_at),
            };
            u128::from(hi.since(lo) / SECOND_MS)
        })
        .sum();
    let half_hour_secs = u128::from(30 * MINUTE_MS / SECOND_MS);
    let num = total_secs * rate_per_half_hour.0.max(0) as u128 * u128::from(100 + fee_percent);
    let den = half_hour_secs * 100;
    Cents(div_round_half_up(num, den) as i64)
}

/// Retainer stays recovered from a log. Stays still open at the end of the
/// log are closed at `log_end`.
pub fn retainer_stays(entries: &[EventLogEntry], log_end: Timestamp) -> Vec<RetainerStay> {
    let mut open: BTreeMap<WorkerId, Timestamp> = BTreeMap::new();
    let mut stays = Vec::new();
    for e in entries {
        match &e.event {
            Event::RetainerEntered {
                worker_id: Some(w), ..
            } => {
                open.insert(w.clone(), e.at);
            }
            Event::RetainerDispatched {
                worker_id,
                phase: DispatchPhase::Joined,
                ..
            }
            | Event::RetainerExpired { worker_id, .. } => {
                if let Some(start) = open.remove(worker_id) {
                    stays.push(RetainerStay {
                        entered_at: start,
                        left_at: e.at,
                    });
                }
            }
            _ => {}
        }
    }
    for (_, start) in open {
        stays.push(RetainerStay {
            entered_at: start,
            left_at: log_end.max(start),
        });
    }
    stays
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::HOUR_MS;

    #[test]
    fn transition_table() {
        use AssignmentState::*;
        let all = [
            Unclaimed,
            Claimed,
            InConversation,
            InRetainer,
            Submitted,
            Expired,
        ];
        let legal: Vec<(AssignmentState, AssignmentState)> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a.can_transition_to(*b))
            .collect();
        assert_eq!(legal.len(), 8);
        for s in [Submitted, Expired] {
            assert!(all.iter().all(|&t| !s.can_transition_to(t)));
        }
        assert!(!Unclaimed.can_transition_to(InConversation));
        assert!(!InConversation.can_transition_to(Expired));
    }

    #[test]
    fn assignment_worker_invariant() {
        let mut a = Assignment::new(AssignmentId(1), HitId(1), Timestamp(0));
        assert!(!a.state.holds_worker());
        a.worker_id = Some("w".into());
        a.transition(AssignmentState::Claimed, Timestamp(1))
            .unwrap();
        a.transition(AssignmentState::InConversation, Timestamp(1))
            .unwrap();
        assert!(a
            .transition(AssignmentState::Claimed, Timestamp(2))
            .is_err());
        a.transition(AssignmentState::Submitted, Timestamp(3))
            .unwrap();
        assert_eq!(a.resolved_at, Some(Timestamp(3)));
    }

    #[test]
    fn recruit_plans() {
        let cfg = RecruitingConfig::default();
        assert_eq!(
            plan_recruitment(&cfg, 0),
            RecruitPlan {
                dispatch: 0,
                post: 10
            }
        );
        assert_eq!(
            plan_recruitment(&cfg, 3),
            RecruitPlan {
                dispatch: 3,
                post: 7
            }
        );
        assert_eq!(
            plan_recruitment(&cfg, 12),
            RecruitPlan {
                dispatch: 10,
                post: 0
            }
        );
        let stat = RecruitingConfig {
            policy: RecruitingPolicy::Static,
            ..RecruitingConfig::default()
        };
        assert_eq!(
            plan_recruitment(&stat, 12),
            RecruitPlan {
                dispatch: 0,
                post: 10
            }
        );
    }

    #[test]
    fn retainer_pay_examples() {
        let day: Vec<RetainerStay> = (0..10)
            .map(|_| RetainerStay {
                entered_at: Timestamp(0),
                left_at: Timestamp(24 * HOUR_MS),
            })
            .collect();
        assert_eq!(retainer_pay_owed(&day, None, Cents(20), 20), Cents(11_520));
        let one = [RetainerStay {
            entered_at: Timestamp(0),
            left_at: Timestamp(30 * MINUTE_MS),
        }];
        assert_eq!(retainer_pay_owed(&one, None, Cents(20), 20), Cents(24));
        assert_eq!(retainer_pay_owed(&[], None, Cents(20), 20), Cents(0));
        // Window clips the stay to its first quarter hour.
        let clipped = retainer_pay_owed(
            &one,
            Some((Timestamp(0), Timestamp(15 * MINUTE_MS))),
            Cents(20),
            20,
        );
        assert_eq!(clipped, Cents(12));
    }

    #[test]
    fn pool_strikes_rotate_to_tail() {
        let mut pool = RetainerPool::new(20_000);
        for (i, w) in ["a", "b", "c"].iter().enumerate() {
            pool.enter(PoolEntry {
                worker_id: (*w).into(),
                assignment_id: AssignmentId(i as u64),
                entered_at: Timestamp(0),
                expires_at: Timestamp(30 * MINUTE_MS),
                strikes: 0,
            });
        }
        pool.pings.insert(
            "a".into(),
            Ping {
                session_id: SessionId(1),
                sent_at: Timestamp(0),
                deadline: Timestamp(20_000),
            },
        );
        assert_eq!(pool.occupancy(Timestamp(1)), 2);
        assert_eq!(pool.strike(&"a".into()), Some(1));
        let order: Vec<&str> = pool.waiting.iter().map(|e| e.worker_id.as_str()).collect();
        assert_eq!(order, ["b", "c", "a"]);
        assert_eq!(pool.occupancy(Timestamp(1)), 3);
        assert_eq!(pool.occupancy(Timestamp(30 * MINUTE_MS)), 0);
    }
}
