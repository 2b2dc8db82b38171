//! Session state machine.
//!
//! A session opens on a user message and closes either when two workers
//! submit or when its deadline passes. Before the three-way handshake (user
//! speaks, crowd answers, user speaks again) the deadline is 45 minutes
//! after creation; afterwards it is 15 minutes after the latest user message.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::LifecycleConfig;
use crate::event::{Event, EventLogEntry};
use crate::ids::{AssignmentId, HitId, SessionId, UserId, WorkerId};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    TwoSubmissions,
    Timeout,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeStatus {
    pub user_sent: bool,
    pub crowd_replied: bool,
    pub user_replied_again: bool,
}

impl HandshakeStatus {
    pub fn complete(&self) -> bool {
        self.user_replied_again
    }

    pub fn on_user_message(&mut self) {
        if self.crowd_replied {
            self.user_replied_again = true;
        }
        self.user_sent = true;
    }

    pub fn on_crowd_accepted(&mut self) {
        if self.user_sent {
            self.crowd_replied = true;
        }
    }
}

/// Scans one session's events in order for the three handshake conditions.
pub fn check_handshake<'a, I>(session_events: I) -> HandshakeStatus
where
    I: IntoIterator<Item = &'a EventLogEntry>,
{
    let mut status = HandshakeStatus::default();
    for e in session_events {
        match &e.event {
            Event::UserMessage { dropped: false, .. } => status.on_user_message(),
            Event::MessageAccepted { .. } => status.on_crowd_accepted(),
            _ => {}
        }
    }
    status
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerOutcome {
    Submitted,
    ForceSubmitted,
    ReturnedToRetainer,
}

/// A worker's stay in one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionWorker {
    pub assignment_id: AssignmentId,
    pub joined_at: Timestamp,
    pub left_at: Option<Timestamp>,
    pub outcome: Option<WorkerOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: SessionId,
    pub user_id: UserId,
    pub created_at: Timestamp,
    pub state: SessionState,
    pub close_reason: Option<CloseReason>,
    pub closed_at: Option<Timestamp>,
    pub handshake: HandshakeStatus,
    pub handshake_complete: bool,
    pub deadline: Timestamp,
    /// Voluntary submissions only.
    pub submissions: BTreeSet<WorkerId>,
    pub last_user_message_at: Option<Timestamp>,
    pub participants: BTreeMap<WorkerId, SessionWorker>,
    pub hits: Vec<HitId>,
}

impl SessionRecord {
    pub fn open(
        session_id: SessionId,
        user_id: UserId,
        created_at: Timestamp,
        cfg: &LifecycleConfig,
    ) -> Self {
        Self {
            session_id,
            user_id,
            created_at,
            state: SessionState::Open,
            close_reason: None,
            closed_at: None,
            handshake: HandshakeStatus::default(),
            handshake_complete: false,
            deadline: created_at + cfg.pre_handshake_timeout_ms,
            submissions: BTreeSet::new(),
            last_user_message_at: None,
            participants: BTreeMap::new(),
            hits: Vec::new(),
        }
    }

    pub fn is_open(&self) -> bool {
        self.state == SessionState::Open
    }

    /// Joined and not yet submitted, returned, or force-submitted.
    pub fn is_participant(&self, w: &WorkerId) -> bool {
        self.participants
            .get(w)
            .is_some_and(|p| p.outcome.is_none())
    }

    pub fn has_joined(&self, w: &WorkerId) -> bool {
        self.participants.contains_key(w)
    }

    pub fn remaining_workers(&self) -> impl Iterator<Item = (&WorkerId, &SessionWorker)> {
        self.participants
            .iter()
            .filter(|(_, p)| p.outcome.is_none())
    }

    pub fn forced_count(&self) -> usize {
        self.participants
            .values()
            .filter(|p| {
                matches!(
                    p.outcome,
                    Some(WorkerOutcome::ForceSubmitted | WorkerOutcome::ReturnedToRetainer)
                )
            })
            .count()
    }

    pub fn on_user_message(&mut self, at: Timestamp, cfg: &LifecycleConfig) {
        self.handshake.on_user_message();
        self.handshake_complete = self.handshake.complete();
        self.last_user_message_at = Some(at);
        self.deadline = recompute_deadline(self, cfg);
    }

    pub fn on_crowd_accepted(&mut self, cfg: &LifecycleConfig) {
        self.handshake.on_crowd_accepted();
        self.handshake_complete = self.handshake.complete();
        self.deadline = recompute_deadline(self, cfg);
    }

    pub fn close(&mut self, reason: CloseReason, at: Timestamp) {
        self.state = SessionState::Closed;
        self.close_reason = Some(reason);
        self.closed_at = Some(at);
    }
}

/// Deadline from the session's current handshake state.
pub fn recompute_deadline(session: &SessionRecord, cfg: &LifecycleConfig) -> Timestamp {
    match (session.handshake_complete, session.last_user_message_at) {
        (true, Some(last)) => last + cfg.post_handshake_timeout_ms,
        _ => session.created_at + cfg.pre_handshake_timeout_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::MessageId;
    use crate::time::MINUTE_MS;

    fn entry(seq: u64, at: u64, event: Event) -> EventLogEntry {
        EventLogEntry {
            seq,
            at: Timestamp(at),
            session_id: Some(SessionId(1)),
            event,
        }
    }

    fn user(seq: u64, at: u64) -> EventLogEntry {
        entry(
            seq,
            at,
            Event::UserMessage {
                user_id: "u".into(),
                message_id: Some(MessageId(seq)),
                body: "hi".into(),
                dropped: false,
            },
        )
    }

    fn accepted(seq: u64, at: u64) -> EventLogEntry {
        entry(
            seq,
            at,
            Event::MessageAccepted {
                message_id: MessageId(seq),
                votes: 1,
                active_workers: 1,
                threshold: 1,
            },
        )
    }

    #[test]
    fn handshake_conditions() {
        let full = [user(1, 0), accepted(2, 10), user(3, 20)];
        let s = check_handshake(&full);
        assert!(s.user_sent && s.crowd_replied && s.user_replied_again);

        let one = [user(1, 0)];
        assert_eq!(
            check_handshake(&one),
            HandshakeStatus {
                user_sent: true,
                crowd_replied: false,
                user_replied_again: false
            }
        );

        let two = [user(1, 0), accepted(2, 10)];
        let s = check_handshake(&two);
        assert!(s.user_sent && s.crowd_replied && !s.user_replied_again);

        // Two user messages before any crowd reply do not count.
        let early = [user(1, 0), user(2, 5), accepted(3, 10)];
        assert!(!check_handshake(&early).complete());
    }

    #[test]
    fn deadlines() {
        let cfg = LifecycleConfig::default();
        let mut s = SessionRecord::open(SessionId(1), "u".into(), Timestamp(0), &cfg);
        assert_eq!(s.deadline, Timestamp(45 * MINUTE_MS));
        s.on_user_message(Timestamp(0), &cfg);
        assert_eq!(s.deadline, Timestamp(2_700_000));
        s.on_crowd_accepted(&cfg);
        s.on_user_message(Timestamp(100_000), &cfg);
        assert_eq!(s.deadline, Timestamp(1_000_000));
        s.on_user_message(Timestamp(500_000), &cfg);
        assert_eq!(s.deadline, Timestamp(1_400_000));
    }
}
