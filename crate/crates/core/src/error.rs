use crate::consensus::ConsensusError;
use crate::event::LogError;
use crate::ids::{AssignmentId, HitId, MessageId, SessionId, UserId, WorkerId};
use crate::recruiting::PlatformError;

/// Errors returned by service operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChorusError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("session {0} is still open")]
    SessionStillOpen(SessionId),
    #[error("user {user} already has open session {session}")]
    SessionAlreadyOpen { user: UserId, session: SessionId },
    #[error("worker {worker} is not a participant of session {session}")]
    NotAParticipant {
        session: SessionId,
        worker: WorkerId,
    },
    #[error("message body is empty")]
    EmptyBody,
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("message {0} is not pending")]
    MessageNotPending(MessageId),
    #[error("worker {worker} already voted for {message}")]
    AlreadyVoted {
        message: MessageId,
        worker: WorkerId,
    },
    #[error("worker {worker} has {total} points, {required} required to submit")]
    NotEligible {
        worker: WorkerId,
        total: u32,
        required: u32,
    },
    #[error("message {0} was already delivered")]
    AlreadyDelivered(MessageId),
    #[error("message {0} is not accepted")]
    NotAccepted(MessageId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("user {0} is blocked")]
    UserBlocked(UserId),
    #[error("unauthorized")]
    Unauthorized,
    #[error("{0}")]
    PlatformUnavailable(String),
    #[error("unknown HIT {0}")]
    UnknownHit(HitId),
    #[error("HIT {0} has no claimable assignment")]
    NoClaimableAssignment(HitId),
    #[error("worker {0} is already serving a session or waiting in the retainer")]
    WorkerBusy(WorkerId),
    #[error("worker {worker} already joined session {session}")]
    AlreadyJoined {
        session: SessionId,
        worker: WorkerId,
    },
    #[error("worker {0} has no outstanding ping")]
    NotPinged(WorkerId),
    #[error("unknown assignment {0}")]
    UnknownAssignment(AssignmentId),
    #[error("internal: {0}")]
    Internal(String),
}

impl From<ConsensusError> for ChorusError {
    fn from(e: ConsensusError) -> Self {
        match e {
            ConsensusError::UnknownMessage(m) => ChorusError::UnknownMessage(m),
            ConsensusError::MessageNotPending(m) => ChorusError::MessageNotPending(m),
            ConsensusError::AlreadyVoted { message, worker } => {
                ChorusError::AlreadyVoted { message, worker }
            }
            e @ (ConsensusError::DuplicateMessage(_) | ConsensusError::DuplicateFact(_)) => {
                ChorusError::Internal(e.to_string())
            }
        }
    }
}

impl From<PlatformError> for ChorusError {
    fn from(e: PlatformError) -> Self {
        ChorusError::PlatformUnavailable(e.to_string())
    }
}

/// A log that cannot be folded into a valid state.
#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    CorruptLog(#[from] LogError),
    #[error("seq {seq}: {reason}")]
    Invalid { seq: u64, reason: String },
}
