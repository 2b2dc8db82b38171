//! The append-only protocol event log.
//!
//! Every state change in the service is an [`Event`] stamped with a global
//! sequence number. The live state is a fold over the log, so the same log
//! drives replay, analytics, and cost accounting.
//!
//! On disk the log is JSON Lines: one [`EventLogEntry`] per line with the
//! fields `seq`, `at`, `session_id`, `kind`, `payload`, sequence starting at 1.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::gateway::AutoReplyKind;
use crate::ids::{AssignmentId, FactId, HitId, MessageId, SessionId, UserId, WorkerId};
use crate::incentives::PointAction;
use crate::lifecycle::CloseReason;
use crate::money::Cents;
use crate::recruiting::{AssignmentExpiry, DispatchPhase, RetainerExit};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Event {
    /// Inbound user message. Dropped messages (blocked users) carry no
    /// message id and no session.
    UserMessage {
        user_id: UserId,
        message_id: Option<MessageId>,
        body: String,
        dropped: bool,
    },
    ProposalCreated {
        message_id: MessageId,
        worker_id: WorkerId,
        body: String,
    },
    VoteCast {
        message_id: MessageId,
        worker_id: WorkerId,
    },
    MessageAccepted {
        message_id: MessageId,
        votes: u32,
        active_workers: u32,
        threshold: u32,
    },
    MessageDelivered {
        message_id: MessageId,
        user_id: UserId,
    },
    FactPosted {
        fact_id: FactId,
        worker_id: WorkerId,
        body: String,
    },
    PointsAwarded {
        worker_id: WorkerId,
        action: PointAction,
        points: u32,
        /// Whole waiting intervals covered, for `waiting` awards.
        #[serde(default, skip_serializing_if = "is_zero")]
        intervals: u32,
    },
    SessionOpened {
        user_id: UserId,
        deadline: Timestamp,
    },
    SessionClosed {
        reason: CloseReason,
    },
    HitPosted {
        hit_id: HitId,
        assignments: Vec<AssignmentId>,
        base_pay: Cents,
    },
    AssignmentClaimed {
        hit_id: HitId,
        assignment_id: AssignmentId,
        worker_id: WorkerId,
    },
    AssignmentExpired {
        assignment_id: AssignmentId,
        reason: AssignmentExpiry,
    },
    /// A retainer slot opened. `worker_id` is `None` when an unclaimed
    /// assignment was converted and nobody holds it yet.
    RetainerEntered {
        assignment_id: AssignmentId,
        worker_id: Option<WorkerId>,
        expires_at: Timestamp,
    },
    RetainerDispatched {
        worker_id: WorkerId,
        assignment_id: AssignmentId,
        phase: DispatchPhase,
    },
    RetainerExpired {
        worker_id: WorkerId,
        assignment_id: AssignmentId,
        reason: RetainerExit,
    },
    SubmissionRecorded {
        worker_id: WorkerId,
        assignment_id: AssignmentId,
        forced: bool,
        returned_to_retainer: bool,
    },
    BonusSettled {
        worker_id: WorkerId,
        points: u32,
        amount: Cents,
    },
    AutoReplySent {
        user_id: UserId,
        reply: AutoReplyKind,
        body: String,
    },
    UserBlocked {
        user_id: UserId,
        reason: String,
    },
    UserUnblocked {
        user_id: UserId,
    },
    /// Presence ping from a worker's page.
    WorkerHeartbeat {
        worker_id: WorkerId,
    },
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    UserMessage,
    ProposalCreated,
    VoteCast,
    MessageAccepted,
    MessageDelivered,
    FactPosted,
    PointsAwarded,
    SessionOpened,
    SessionClosed,
    HitPosted,
    AssignmentClaimed,
    AssignmentExpired,
    RetainerEntered,
    RetainerDispatched,
    RetainerExpired,
    SubmissionRecorded,
    BonusSettled,
    AutoReplySent,
    UserBlocked,
    UserUnblocked,
    WorkerHeartbeat,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::UserMessage { .. } => EventKind::UserMessage,
            Event::ProposalCreated { .. } => EventKind::ProposalCreated,
            Event::VoteCast { .. } => EventKind::VoteCast,
            Event::MessageAccepted { .. } => EventKind::MessageAccepted,
            Event::MessageDelivered { .. } => EventKind::MessageDelivered,
            Event::FactPosted { .. } => EventKind::FactPosted,
            Event::PointsAwarded { .. } => EventKind::PointsAwarded,
            Event::SessionOpened { .. } => EventKind::SessionOpened,
            Event::SessionClosed { .. } => EventKind::SessionClosed,
            Event::HitPosted { .. } => EventKind::HitPosted,
            Event::AssignmentClaimed { .. } => EventKind::AssignmentClaimed,
            Event::AssignmentExpired { .. } => EventKind::AssignmentExpired,
            Event::RetainerEntered { .. } => EventKind::RetainerEntered,
            Event::RetainerDispatched { .. } => EventKind::RetainerDispatched,
            Event::RetainerExpired { .. } => EventKind::RetainerExpired,
            Event::SubmissionRecorded { .. } => EventKind::SubmissionRecorded,
            Event::BonusSettled { .. } => EventKind::BonusSettled,
            Event::AutoReplySent { .. } => EventKind::AutoReplySent,
            Event::UserBlocked { .. } => EventKind::UserBlocked,
            Event::UserUnblocked { .. } => EventKind::UserUnblocked,
            Event::WorkerHeartbeat { .. } => EventKind::WorkerHeartbeat,
        }
    }

    /// The worker this event is about, if any.
    pub fn worker(&self) -> Option<&WorkerId> {
        match self {
            Event::ProposalCreated { worker_id, .. }
            | Event::VoteCast { worker_id, .. }
            | Event::FactPosted { worker_id, .. }
            | Event::PointsAwarded { worker_id, .. }
            | Event::AssignmentClaimed { worker_id, .. }
            | Event::RetainerDispatched { worker_id, .. }
            | Event::RetainerExpired { worker_id, .. }
            | Event::SubmissionRecorded { worker_id, .. }
            | Event::BonusSettled { worker_id, .. }
            | Event::WorkerHeartbeat { worker_id } => Some(worker_id),
            Event::RetainerEntered { worker_id, .. } => worker_id.as_ref(),
            _ => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub seq: u64,
    pub at: Timestamp,
    pub session_id: Option<SessionId>,
    #[serde(flatten)]
    pub event: Event,
}

impl EventLogEntry {
    pub fn kind(&self) -> EventKind {
        self.event.kind()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corrupt log: expected seq {expected}, found {found}")]
    Corrupt { expected: u64, found: u64 },
}

/// A sequenced, append-only list of events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    entries: Vec<EventLogEntry>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps existing entries after checking the sequence is 1, 2, 3, ...
    pub fn from_entries(entries: Vec<EventLogEntry>) -> Result<Self, LogError> {
        check_sequence(&entries)?;
        Ok(Self { entries })
    }

    pub fn append(
        &mut self,
        at: Timestamp,
        session_id: Option<SessionId>,
        event: Event,
    ) -> &EventLogEntry {
        let seq = self.entries.len() as u64 + 1;
        if let Some(last) = self.entries.last() {
            debug_assert!(at >= last.at, "log time went backwards at seq {seq}");
        }
        self.entries.push(EventLogEntry {
            seq,
            at,
            session_id,
            event,
        });
        self.entries.last().expect("just pushed")
    }

    /// Appends a fully formed entry. Its seq must be the next one.
    pub fn push(&mut self, entry: EventLogEntry) -> Result<(), LogError> {
        let expected = self.last_seq() + 1;
        if entry.seq != expected {
            return Err(LogError::Corrupt {
                expected,
                found: entry.seq,
            });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[EventLogEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<EventLogEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_seq(&self) -> u64 {
        self.entries.len() as u64
    }

    /// Entries with `seq > after`.
    pub fn since(&self, after: u64) -> &[EventLogEntry] {
        let start = (after as usize).min(self.entries.len());
        &self.entries[start..]
    }

    pub fn for_session(&self, session: SessionId) -> impl Iterator<Item = &EventLogEntry> {
        self.entries
            .iter()
            .filter(move |e| e.session_id == Some(session))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LogError> {
        for e in &self.entries {
            write_entry(&mut w, e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Parses JSON Lines. Blank lines are skipped; the sequence is checked.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LogError> {
        let mut entries = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: EventLogEntry = serde_json::from_str(&line).map_err(|err| LogError::Parse {
                line: i + 1,
                message: err.to_string(),
            })?;
            entries.push(e);
        }
        Self::from_entries(entries)
    }

    pub fn from_jsonl_str(s: &str) -> Result<Self, LogError> {
        Self::read_jsonl(s.as_bytes())
    }
}

pub fn write_entry<W: Write>(w: &mut W, e: &EventLogEntry) -> Result<(), LogError> {
    serde_json::to_writer(&mut *w, e).map_err(|err| LogError::Parse {
        line: e.seq as usize,
        message: err.to_string(),
    })?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn check_sequence(entries: &[EventLogEntry]) -> Result<(), LogError> {
    for (i, e) in entries.iter().enumerate() {
        let expected = i as u64 + 1;
        if e.seq != expected {
            return Err(LogError::Corrupt {
                expected,
                found: e.seq,
            });
        }
    }
    Ok(())
}
