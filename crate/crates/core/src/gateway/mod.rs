//! The service engine: routes user messages, runs worker commands, drives
//! recruiting and session closure, and owns the event log.
//!
//! Every operation takes `now` from the caller. Before doing anything else
//! it closes sessions whose deadline has passed and settles expired pings and
//! retainer entries, so a message that arrives at the deadline instant goes
//! to a fresh session.

mod state;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use state::{Counters, SystemState};

use crate::config::ChorusConfig;
use crate::consensus::{render_view, Conversation, MessageStatus, WorkerView};
use crate::error::{ChorusError, ReplayError};
use crate::event::{Event, EventLog, EventLogEntry};
use crate::ids::{AssignmentId, FactId, HitId, MessageId, SessionId, UserId, WorkerId};
use crate::incentives::{bonus_for_points, PointAction};
use crate::lifecycle::CloseReason;
use crate::money::Cents;
use crate::recruiting::{
    plan_recruitment, AssignmentExpiry, AssignmentState, CrowdPlatform, DispatchPhase, RetainerExit,
};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoReplyKind {
    Welcome,
    Wait,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: UserId,
    pub display_alias: String,
    pub first_seen_at: Timestamp,
    pub blocked: bool,
    pub blocked_at: Option<Timestamp>,
    pub blocked_reason: Option<String>,
}

impl UserAccount {
    pub fn new(user_id: UserId, at: Timestamp) -> Self {
        Self {
            display_alias: user_id.as_str().to_owned(),
            user_id,
            first_seen_at: at,
            blocked: false,
            blocked_at: None,
            blocked_reason: None,
        }
    }
}

/// Something the gateway pushes to a user's connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outbound {
    pub user_id: UserId,
    pub body: String,
    pub at: Timestamp,
    /// `None` for auto-replies.
    pub message_id: Option<MessageId>,
    pub auto_reply: Option<AutoReplyKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResult {
    pub dropped: bool,
    pub session_id: Option<SessionId>,
    pub message_id: Option<MessageId>,
    pub opened: bool,
    pub auto_replies: Vec<AutoReplyKind>,
    /// Recruiting failed after the session opened; the session stays open.
    pub recruit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryReceipt {
    pub message_id: MessageId,
    pub user_id: UserId,
    pub delivered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionResult {
    pub session_id: SessionId,
    pub submissions: u32,
    pub closed: bool,
    pub forced: Vec<WorkerId>,
    pub settlements: BTreeMap<WorkerId, Cents>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ClaimOutcome {
    Joined {
        session_id: SessionId,
        assignment_id: AssignmentId,
    },
    Retainer {
        assignment_id: AssignmentId,
    },
    Dropped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecruitReport {
    pub session_id: SessionId,
    pub dispatched: Vec<WorkerId>,
    pub hit: Option<HitId>,
    pub posted: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSnapshot {
    pub worker_id: WorkerId,
    pub session_id: SessionId,
    pub total: u32,
    pub eligible: bool,
    pub min_points_to_submit: u32,
}

/// The orchestration engine over a crowd platform.
pub struct Chorus<P: CrowdPlatform> {
    state: SystemState,
    log: EventLog,
    platform: P,
    outbox: Vec<Outbound>,
}

impl<P: CrowdPlatform> Chorus<P> {
    pub fn new(config: ChorusConfig, platform: P) -> Self {
        Self {
            state: SystemState::new(config),
            log: EventLog::new(),
            platform,
            outbox: Vec::new(),
        }
    }

    /// Resumes from a stored log. The platform must not reissue HIT ids
    /// that appear in the log.
    pub fn from_log(
        config: ChorusConfig,
        entries: Vec<EventLogEntry>,
        platform: P,
    ) -> Result<Self, ReplayError> {
        let state = SystemState::replay(config, &entries)?;
        let log = EventLog::from_entries(entries)?;
        Ok(Self {
            state,
            log,
            platform,
            outbox: Vec::new(),
        })
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn config(&self) -> &ChorusConfig {
        &self.state.config
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn platform(&self) -> &P {
        &self.platform
    }

    pub fn platform_mut(&mut self) -> &mut P {
        &mut self.platform
    }

    pub fn into_parts(self) -> (SystemState, EventLog, P) {
        (self.state, self.log, self.platform)
    }

    pub fn drain_outbox(&mut self) -> Vec<Outbound> {
        std::mem::take(&mut self.outbox)
    }

    fn emit(
        &mut self,
        at: Timestamp,
        session_id: Option<SessionId>,
        event: Event,
    ) -> Result<u64, ChorusError> {
        let entry = EventLogEntry {
            seq: self.log.last_seq() + 1,
            at,
            session_id,
            event,
        };
        self.state
            .apply(&entry)
            .map_err(|e| ChorusError::Internal(e.to_string()))?;
        let seq = entry.seq;
        self.log
            .push(entry)
            .map_err(|e| ChorusError::Internal(e.to_string()))?;
        Ok(seq)
    }

    fn clamp(&self, now: Timestamp) -> Timestamp {
        now.max(self.state.last_at)
    }

    fn open_session_of(&self, id: SessionId) -> Result<(), ChorusError> {
        let s = self
            .state
            .session(id)
            .ok_or(ChorusError::UnknownSession(id))?;
        if !s.is_open() {
            return Err(ChorusError::SessionClosed(id));
        }
        Ok(())
    }

    fn require_participant(&self, id: SessionId, w: &WorkerId) -> Result<(), ChorusError> {
        self.open_session_of(id)?;
        if !self.state.sessions[&id].is_participant(w) {
            return Err(ChorusError::NotAParticipant {
                session: id,
                worker: w.clone(),
            });
        }
        Ok(())
    }

    fn award(
        &mut self,
        at: Timestamp,
        session: SessionId,
        worker: &WorkerId,
        action: PointAction,
    ) -> Result<(), ChorusError> {
        let points = action.points(&self.state.config.incentives);
        self.emit(
            at,
            Some(session),
            Event::PointsAwarded {
                worker_id: worker.clone(),
                action,
                points,
                intervals: 0,
            },
        )?;
        Ok(())
    }

    fn pick_reply(&self, kind: AutoReplyKind) -> String {
        let pool = &self.state.config.gateway.auto_reply;
        let list = match kind {
            AutoReplyKind::Welcome => &pool.welcome_messages,
            AutoReplyKind::Wait => &pool.wait_messages,
        };
        let next_seq = self.log.last_seq() + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(pool.rng_seed ^ next_seq.rotate_left(32));
        list[rng.random_range(0..list.len())].clone()
    }

    fn auto_reply(
        &mut self,
        at: Timestamp,
        user: &UserId,
        kind: AutoReplyKind,
    ) -> Result<(), ChorusError> {
        let body = self.pick_reply(kind);
        self.emit(
            at,
            None,
            Event::AutoReplySent {
                user_id: user.clone(),
                reply: kind,
                body: body.clone(),
            },
        )?;
        self.outbox.push(Outbound {
            user_id: user.clone(),
            body,
            at,
            message_id: None,
            auto_reply: Some(kind),
        });
        Ok(())
    }

    // ---- user side ----

    pub fn handle_inbound_user_message(
        &mut self,
        user: &UserId,
        body: &str,
        now: Timestamp,
    ) -> Result<IngestResult, ChorusError> {
        let now = self.clamp(now);
        if body.trim().is_empty() {
            return Err(ChorusError::EmptyBody);
        }
        self.advance(now)?;
        let mut result = IngestResult {
            dropped: false,
            session_id: None,
            message_id: None,
            opened: false,
            auto_replies: Vec::new(),
            recruit_error: None,
        };
        if self.state.users.get(user).is_some_and(|u| u.blocked) {
            self.emit(
                now,
                None,
                Event::UserMessage {
                    user_id: user.clone(),
                    message_id: None,
                    body: body.to_owned(),
                    dropped: true,
                },
            )?;
            result.dropped = true;
            return Ok(result);
        }
        if !self.state.users.contains_key(user) {
            self.auto_reply(now, user, AutoReplyKind::Welcome)?;
            result.auto_replies.push(AutoReplyKind::Welcome);
        }
        let sid = match self.state.open_sessions.get(user) {
            Some(s) => *s,
            None => {
                let s = self.open_session(user, now)?;
                result.opened = true;
                s
            }
        };
        let mid = MessageId(self.state.counters.messages + 1);
        self.emit(
            now,
            Some(sid),
            Event::UserMessage {
                user_id: user.clone(),
                message_id: Some(mid),
                body: body.to_owned(),
                dropped: false,
            },
        )?;
        result.session_id = Some(sid);
        result.message_id = Some(mid);
        if result.opened {
            self.auto_reply(now, user, AutoReplyKind::Wait)?;
            result.auto_replies.push(AutoReplyKind::Wait);
            if let Err(e) = self.recruit_for_session(sid, now) {
                result.recruit_error = Some(e.to_string());
            }
        }
        Ok(result)
    }

    /// Opens a session without ingesting a message or recruiting.
    /// [`Chorus::handle_inbound_user_message`] is the usual entry point.
    pub fn open_session(
        &mut self,
        user: &UserId,
        now: Timestamp,
    ) -> Result<SessionId, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        if self.state.users.get(user).is_some_and(|u| u.blocked) {
            return Err(ChorusError::UserBlocked(user.clone()));
        }
        if let Some(s) = self.state.open_sessions.get(user) {
            return Err(ChorusError::SessionAlreadyOpen {
                user: user.clone(),
                session: *s,
            });
        }
        let sid = SessionId(self.state.counters.sessions + 1);
        let deadline = now + self.state.config.lifecycle.pre_handshake_timeout_ms;
        self.emit(
            now,
            Some(sid),
            Event::SessionOpened {
                user_id: user.clone(),
                deadline,
            },
        )?;
        Ok(sid)
    }

    pub fn deliver_accepted_message(
        &mut self,
        id: MessageId,
        now: Timestamp,
    ) -> Result<DeliveryReceipt, ChorusError> {
        let now = self.clamp(now);
        let sid = self
            .state
            .message_session(id)
            .ok_or(ChorusError::UnknownMessage(id))?;
        let m = &self.state.conversations[&sid].messages[&id];
        if m.status != MessageStatus::Accepted || m.author.worker().is_none() {
            return Err(ChorusError::NotAccepted(id));
        }
        if self.state.delivered.contains_key(&id) {
            return Err(ChorusError::AlreadyDelivered(id));
        }
        let body = m.body.clone();
        let user = self.state.sessions[&sid].user_id.clone();
        self.emit(
            now,
            Some(sid),
            Event::MessageDelivered {
                message_id: id,
                user_id: user.clone(),
            },
        )?;
        self.outbox.push(Outbound {
            user_id: user.clone(),
            body,
            at: now,
            message_id: Some(id),
            auto_reply: None,
        });
        Ok(DeliveryReceipt {
            message_id: id,
            user_id: user,
            delivered_at: now,
        })
    }

    /// What the user sees: their own messages and delivered crowd messages,
    /// in order, across all sessions.
    pub fn user_transcript(&self, user: &UserId) -> Vec<Outbound> {
        let mut out = Vec::new();
        for sid in self.state.user_history.get(user).into_iter().flatten() {
            let conv = &self.state.conversations[sid];
            for m in conv.chronological() {
                let delivered_at = match m.author.worker() {
                    None => Some(m.proposed_at),
                    Some(_) => self.state.delivered.get(&m.message_id).copied(),
                };
                if let Some(at) = delivered_at {
                    out.push(Outbound {
                        user_id: user.clone(),
                        body: m.body.clone(),
                        at,
                        message_id: Some(m.message_id),
                        auto_reply: None,
                    });
                }
            }
        }
        out.sort_by_key(|o| (o.at, o.message_id));
        out
    }

    // ---- worker side ----

    pub fn propose_message(
        &mut self,
        session: SessionId,
        worker: &WorkerId,
        body: &str,
        now: Timestamp,
    ) -> Result<MessageId, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        self.require_participant(session, worker)?;
        if body.trim().is_empty() {
            return Err(ChorusError::EmptyBody);
        }
        let mid = MessageId(self.state.counters.messages + 1);
        self.emit(
            now,
            Some(session),
            Event::ProposalCreated {
                message_id: mid,
                worker_id: worker.clone(),
                body: body.to_owned(),
            },
        )?;
        self.award(now, session, worker, PointAction::Propose)?;
        self.evaluate_acceptance(mid, now)?;
        Ok(mid)
    }

    pub fn vote_message(
        &mut self,
        session: SessionId,
        worker: &WorkerId,
        message: MessageId,
        now: Timestamp,
    ) -> Result<MessageStatus, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        self.require_participant(session, worker)?;
        let conv = &self.state.conversations[&session];
        if !conv.messages.contains_key(&message) {
            return Err(ChorusError::UnknownMessage(message));
        }
        conv.check_vote(message, worker)?;
        self.emit(
            now,
            Some(session),
            Event::VoteCast {
                message_id: message,
                worker_id: worker.clone(),
            },
        )?;
        self.award(now, session, worker, PointAction::Vote)?;
        self.evaluate_acceptance(message, now)
    }

    /// Accepts the message if its votes reach the threshold for the workers
    /// on the page right now. Accepted messages are delivered at once.
    pub fn evaluate_acceptance(
        &mut self,
        message: MessageId,
        now: Timestamp,
    ) -> Result<MessageStatus, ChorusError> {
        let now = self.clamp(now);
        let sid = self
            .state
            .message_session(message)
            .ok_or(ChorusError::UnknownMessage(message))?;
        let conv = &self.state.conversations[&sid];
        let percent = self.state.config.consensus.acceptance_percent;
        let due = if self.state.sessions[&sid].is_open() {
            conv.acceptance_due(message, percent, now)?
        } else {
            None
        };
        let Some((votes, active, threshold)) = due else {
            return Ok(conv.messages[&message].status);
        };
        let proposer = conv.messages[&message]
            .author
            .worker()
            .cloned()
            .ok_or_else(|| ChorusError::Internal("user message pending".into()))?;
        self.emit(
            now,
            Some(sid),
            Event::MessageAccepted {
                message_id: message,
                votes,
                active_workers: active,
                threshold,
            },
        )?;
        if self.state.sessions[&sid].is_participant(&proposer) {
            self.award(now, sid, &proposer, PointAction::ProposalAccepted)?;
        }
        self.deliver_accepted_message(message, now)?;
        Ok(MessageStatus::Accepted)
    }

    pub fn post_fact(
        &mut self,
        session: SessionId,
        worker: &WorkerId,
        body: &str,
        now: Timestamp,
    ) -> Result<FactId, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        self.require_participant(session, worker)?;
        if body.trim().is_empty() {
            return Err(ChorusError::EmptyBody);
        }
        let fid = FactId(self.state.counters.facts + 1);
        self.emit(
            now,
            Some(session),
            Event::FactPosted {
                fact_id: fid,
                worker_id: worker.clone(),
                body: body.to_owned(),
            },
        )?;
        self.award(now, session, worker, PointAction::PostFact)?;
        Ok(fid)
    }

    pub fn heartbeat(
        &mut self,
        session: SessionId,
        worker: &WorkerId,
        now: Timestamp,
    ) -> Result<(), ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        self.require_participant(session, worker)?;
        self.emit(
            now,
            Some(session),
            Event::WorkerHeartbeat {
                worker_id: worker.clone(),
            },
        )?;
        Ok(())
    }

    pub fn submit_hit(
        &mut self,
        session: SessionId,
        worker: &WorkerId,
        now: Timestamp,
    ) -> Result<SubmissionResult, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        self.require_participant(session, worker)?;
        self.accrue_worker(session, worker, now)?;
        let ledger = self
            .state
            .ledger(session, worker)
            .ok_or_else(|| ChorusError::Internal("participant without ledger".into()))?;
        let required = self.state.config.incentives.min_points_to_submit;
        if !ledger.eligible_to_submit(&self.state.config.incentives) {
            return Err(ChorusError::NotEligible {
                worker: worker.clone(),
                total: ledger.total,
                required,
            });
        }
        let assignment = self.state.sessions[&session].participants[worker].assignment_id;
        self.emit(
            now,
            Some(session),
            Event::SubmissionRecorded {
                worker_id: worker.clone(),
                assignment_id: assignment,
                forced: false,
                returned_to_retainer: false,
            },
        )?;
        let rec = &self.state.sessions[&session];
        let submissions = rec.submissions.len() as u32;
        let mut result = SubmissionResult {
            session_id: session,
            submissions,
            closed: false,
            forced: Vec::new(),
            settlements: BTreeMap::new(),
        };
        if submissions >= self.state.config.lifecycle.submissions_to_close {
            result.forced = rec.remaining_workers().map(|(w, _)| w.clone()).collect();
            result.settlements = self.close_session(session, CloseReason::TwoSubmissions, now)?;
            result.closed = true;
        }
        Ok(result)
    }

    pub fn render_worker_view(
        &self,
        session: SessionId,
        worker: &WorkerId,
    ) -> Result<WorkerView, ChorusError> {
        let rec = self
            .state
            .session(session)
            .ok_or(ChorusError::UnknownSession(session))?;
        if !rec.has_joined(worker) {
            return Err(ChorusError::NotAParticipant {
                session,
                worker: worker.clone(),
            });
        }
        let history: Vec<&Conversation> = self.state.user_history[&rec.user_id]
            .iter()
            .filter(|s| **s <= session)
            .map(|s| &self.state.conversations[s])
            .collect();
        Ok(render_view(&history, worker))
    }

    /// The worker's score in their current (or given) session.
    pub fn score(
        &self,
        worker: &WorkerId,
        session: Option<SessionId>,
    ) -> Result<ScoreSnapshot, ChorusError> {
        let sid = match session.or_else(|| self.state.serving.get(worker).copied()) {
            Some(s) => s,
            None => self
                .state
                .ledgers
                .iter()
                .rev()
                .find(|(_, l)| l.contains_key(worker))
                .map(|(s, _)| *s)
                .ok_or_else(|| ChorusError::Internal(format!("no sessions for {worker}")))?,
        };
        let ledger =
            self.state
                .ledger(sid, worker)
                .ok_or_else(|| ChorusError::NotAParticipant {
                    session: sid,
                    worker: worker.clone(),
                })?;
        let inc = &self.state.config.incentives;
        Ok(ScoreSnapshot {
            worker_id: worker.clone(),
            session_id: sid,
            total: ledger.total,
            eligible: ledger.eligible_to_submit(inc),
            min_points_to_submit: inc.min_points_to_submit,
        })
    }

    // ---- incentives ----

    fn accrue_worker(
        &mut self,
        session: SessionId,
        worker: &WorkerId,
        now: Timestamp,
    ) -> Result<u32, ChorusError> {
        let inc = &self.state.config.incentives;
        let per = inc.points_per_action.waiting;
        let interval = inc.waiting_interval_ms;
        let Some(ledger) = self.state.ledger(session, worker) else {
            return Ok(0);
        };
        let intervals = ledger.waiting_intervals_due(now, interval);
        if intervals == 0 || per == 0 {
            return Ok(0);
        }
        let points = intervals * per;
        self.emit(
            now,
            Some(session),
            Event::PointsAwarded {
                worker_id: worker.clone(),
                action: PointAction::Waiting,
                points,
                intervals,
            },
        )?;
        Ok(points)
    }

    /// Credits whole waiting intervals to every remaining participant.
    pub fn accrue_waiting(
        &mut self,
        session: SessionId,
        now: Timestamp,
    ) -> Result<Vec<(WorkerId, u32)>, ChorusError> {
        let now = self.clamp(now);
        let Some(rec) = self.state.session(session) else {
            return Err(ChorusError::UnknownSession(session));
        };
        if !rec.is_open() {
            return Ok(Vec::new());
        }
        let workers: Vec<WorkerId> = rec.remaining_workers().map(|(w, _)| w.clone()).collect();
        let mut out = Vec::new();
        for w in workers {
            let p = self.accrue_worker(session, &w, now)?;
            if p > 0 {
                out.push((w, p));
            }
        }
        Ok(out)
    }

    /// Bonus per worker for a closed session. Settles on the first call;
    /// later calls return the recorded amounts.
    pub fn settle_bonus(
        &mut self,
        session: SessionId,
        now: Timestamp,
    ) -> Result<BTreeMap<WorkerId, Cents>, ChorusError> {
        let now = self.clamp(now);
        let rec = self
            .state
            .session(session)
            .ok_or(ChorusError::UnknownSession(session))?;
        if rec.is_open() {
            return Err(ChorusError::SessionStillOpen(session));
        }
        let workers: Vec<WorkerId> = rec.participants.keys().cloned().collect();
        for w in workers {
            let done = self
                .state
                .settlements
                .get(&session)
                .is_some_and(|m| m.contains_key(&w));
            if done {
                continue;
            }
            let points = self.state.ledger(session, &w).map(|l| l.total).unwrap_or(0);
            let amount = bonus_for_points(points, &self.state.config.incentives);
            self.emit(
                now,
                Some(session),
                Event::BonusSettled {
                    worker_id: w.clone(),
                    points,
                    amount,
                },
            )?;
            self.platform.pay_bonus(&w, amount, now);
        }
        Ok(self
            .state
            .settlements
            .get(&session)
            .cloned()
            .unwrap_or_default())
    }

    // ---- lifecycle ----

    /// Closes an open session: accrues waiting, force-submits the remaining
    /// workers (or returns under-minimum ones to the retainer), settles
    /// bonuses, converts unclaimed assignments to retainer slots, and
    /// cancels outstanding pings. Closing a closed session is a no-op.
    pub fn close_session(
        &mut self,
        session: SessionId,
        reason: CloseReason,
        now: Timestamp,
    ) -> Result<BTreeMap<WorkerId, Cents>, ChorusError> {
        let now = self.clamp(now);
        let rec = self
            .state
            .session(session)
            .ok_or(ChorusError::UnknownSession(session))?;
        if !rec.is_open() {
            return Ok(self
                .state
                .settlements
                .get(&session)
                .cloned()
                .unwrap_or_default());
        }
        self.accrue_waiting(session, now)?;
        self.emit(now, Some(session), Event::SessionClosed { reason })?;

        let rec = &self.state.sessions[&session];
        let remaining: Vec<(WorkerId, AssignmentId)> = rec
            .remaining_workers()
            .map(|(w, p)| (w.clone(), p.assignment_id))
            .collect();
        let inc = self.state.config.incentives.clone();
        let return_flag = self
            .state
            .config
            .recruiting
            .return_under_minimum_to_retainer;
        let duration = self.state.config.recruiting.retainer_duration_ms;
        for (w, a) in remaining {
            let under = self
                .state
                .ledger(session, &w)
                .is_some_and(|l| !l.eligible_to_submit(&inc));
            let back = return_flag && under;
            self.emit(
                now,
                Some(session),
                Event::SubmissionRecorded {
                    worker_id: w.clone(),
                    assignment_id: a,
                    forced: true,
                    returned_to_retainer: back,
                },
            )?;
            if back {
                self.emit(
                    now,
                    Some(session),
                    Event::RetainerEntered {
                        assignment_id: a,
                        worker_id: Some(w),
                        expires_at: now + duration,
                    },
                )?;
            }
        }
        let settlements = self.settle_bonus(session, now)?;
        self.convert_to_retainer(session, now)?;

        let pinged: Vec<(WorkerId, AssignmentId)> = self
            .state
            .pool
            .pings
            .iter()
            .filter(|(_, p)| p.session_id == session)
            .map(|(w, _)| {
                let a = self
                    .state
                    .pool
                    .entry(w)
                    .expect("pinged is pooled")
                    .assignment_id;
                (w.clone(), a)
            })
            .collect();
        for (w, a) in pinged {
            self.emit(
                now,
                Some(session),
                Event::RetainerDispatched {
                    worker_id: w,
                    assignment_id: a,
                    phase: DispatchPhase::Cancelled,
                },
            )?;
        }
        Ok(settlements)
    }

    /// Closes every open session whose deadline is at or before `now`.
    pub fn expire_due_sessions(&mut self, now: Timestamp) -> Result<Vec<SessionId>, ChorusError> {
        let now = self.clamp(now);
        let mut due: Vec<(Timestamp, SessionId)> = self
            .state
            .open_sessions
            .values()
            .map(|s| (self.state.sessions[s].deadline, *s))
            .filter(|(d, _)| *d <= now)
            .collect();
        due.sort();
        let mut closed = Vec::new();
        for (_, s) in due {
            self.close_session(s, CloseReason::Timeout, now)?;
            closed.push(s);
        }
        Ok(closed)
    }

    fn advance(&mut self, now: Timestamp) -> Result<Vec<SessionId>, ChorusError> {
        let closed = self.expire_due_sessions(now)?;
        self.resolve_pings(now)?;
        self.expire_retainer(now)?;
        Ok(closed)
    }

    /// Advances time: closes due sessions, settles pings and retainer
    /// expiry, takes in platform claims, and accrues waiting points.
    pub fn tick(&mut self, now: Timestamp) -> Result<Vec<SessionId>, ChorusError> {
        let now = self.clamp(now);
        let closed = self.advance(now)?;
        self.poll_platform(now)?;
        let open: Vec<SessionId> = self.state.open_sessions.values().copied().collect();
        for s in open {
            self.accrue_waiting(s, now)?;
        }
        Ok(closed)
    }

    /// The earliest time at which [`Chorus::tick`] has work to do.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        let s = &self.state;
        let interval = s.config.incentives.waiting_interval_ms;
        let sessions = s.open_sessions.values().map(|id| s.sessions[id].deadline);
        let waiting = s.open_sessions.values().flat_map(|id| {
            s.sessions[id]
                .remaining_workers()
                .filter_map(move |(w, _)| s.ledger(*id, w))
                .map(move |l| l.waiting_anchor + interval)
        });
        let pings = s.pool.pings.values().map(|p| p.deadline + 1);
        let pool = s
            .pool
            .waiting
            .iter()
            .filter(|e| !s.pool.pings.contains_key(&e.worker_id))
            .map(|e| e.expires_at);
        let slots = s
            .assignments
            .values()
            .filter(|a| a.state == AssignmentState::Unclaimed)
            .filter_map(|a| a.retainer_until);
        sessions
            .chain(waiting)
            .chain(pings)
            .chain(pool)
            .chain(slots)
            .chain(self.platform.next_claim_at())
            .min()
    }

    // ---- recruiting ----

    /// Pings retainer workers and posts a HIT for the rest of the crowd.
    pub fn recruit_for_session(
        &mut self,
        session: SessionId,
        now: Timestamp,
    ) -> Result<RecruitReport, ChorusError> {
        let now = self.clamp(now);
        self.open_session_of(session)?;
        let cfg = self.state.config.recruiting.clone();
        let occupancy = match cfg.policy {
            crate::config::RecruitingPolicy::Static => 0,
            crate::config::RecruitingPolicy::Dynamic => {
                self.dispatch_candidates(session, now).len() as u32
            }
        };
        let plan = plan_recruitment(&cfg, occupancy);
        let dispatched = self.ping_workers(session, plan.dispatch as usize, None, now)?;
        let hit = if plan.post > 0 {
            Some(self.post_hit(Some(session), plan.post, now)?)
        } else {
            None
        };
        Ok(RecruitReport {
            session_id: session,
            dispatched,
            hit,
            posted: plan.post,
        })
    }

    fn post_hit(
        &mut self,
        session: Option<SessionId>,
        n: u32,
        now: Timestamp,
    ) -> Result<HitId, ChorusError> {
        let base_pay = self.state.config.recruiting.base_pay;
        let hit = self.platform.post_hit(n, base_pay, now)?;
        let first = self.state.counters.assignments + 1;
        let assignments = (first..first + u64::from(n)).map(AssignmentId).collect();
        self.emit(
            now,
            session,
            Event::HitPosted {
                hit_id: hit,
                assignments,
                base_pay,
            },
        )?;
        Ok(hit)
    }

    /// Posts a HIT whose assignments are retainer slots from the start.
    pub fn post_retainer_hit(&mut self, n: u32, now: Timestamp) -> Result<HitId, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        let hit = self.post_hit(None, n, now)?;
        let duration = self.state.config.recruiting.retainer_duration_ms;
        let ids = self.state.hits[&hit].assignments.clone();
        for a in ids {
            self.emit(
                now,
                None,
                Event::RetainerEntered {
                    assignment_id: a,
                    worker_id: None,
                    expires_at: now + duration,
                },
            )?;
        }
        Ok(hit)
    }

    fn dispatch_candidates(
        &self,
        session: SessionId,
        now: Timestamp,
    ) -> Vec<(WorkerId, AssignmentId)> {
        self.candidates_except(session, None, now)
    }

    fn candidates_except(
        &self,
        session: SessionId,
        skip: Option<&WorkerId>,
        now: Timestamp,
    ) -> Vec<(WorkerId, AssignmentId)> {
        let rec = &self.state.sessions[&session];
        self.state
            .pool
            .available(now)
            .filter(|e| !rec.has_joined(&e.worker_id) && Some(&e.worker_id) != skip)
            .map(|e| (e.worker_id.clone(), e.assignment_id))
            .collect()
    }

    fn ping_workers(
        &mut self,
        session: SessionId,
        n: usize,
        skip: Option<&WorkerId>,
        now: Timestamp,
    ) -> Result<Vec<WorkerId>, ChorusError> {
        let promise = self.state.config.recruiting.dispatch_promise_ms;
        let picks: Vec<_> = self
            .candidates_except(session, skip, now)
            .into_iter()
            .take(n)
            .collect();
        let mut out = Vec::new();
        for (w, a) in picks {
            self.emit(
                now,
                Some(session),
                Event::RetainerDispatched {
                    worker_id: w.clone(),
                    assignment_id: a,
                    phase: DispatchPhase::Pinged {
                        deadline: now + promise,
                    },
                },
            )?;
            out.push(w);
        }
        Ok(out)
    }

    /// Pings up to `n` waiting workers, oldest first, for an open session.
    pub fn dispatch_from_retainer(
        &mut self,
        session: SessionId,
        n: usize,
        now: Timestamp,
    ) -> Result<Vec<WorkerId>, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        self.open_session_of(session)?;
        self.ping_workers(session, n, None, now)
    }

    /// A pinged worker answers. Within the promise they join the session.
    pub fn respond_to_ping(
        &mut self,
        worker: &WorkerId,
        now: Timestamp,
    ) -> Result<SessionId, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        let ping = *self
            .state
            .pool
            .pings
            .get(worker)
            .ok_or_else(|| ChorusError::NotPinged(worker.clone()))?;
        let a = self
            .state
            .pool
            .entry(worker)
            .expect("pinged is pooled")
            .assignment_id;
        self.emit(
            now,
            Some(ping.session_id),
            Event::RetainerDispatched {
                worker_id: worker.clone(),
                assignment_id: a,
                phase: DispatchPhase::Joined,
            },
        )?;
        Ok(ping.session_id)
    }

    fn resolve_pings(&mut self, now: Timestamp) -> Result<(), ChorusError> {
        let missed: Vec<(WorkerId, SessionId)> = self
            .state
            .pool
            .pings
            .iter()
            .filter(|(_, p)| p.deadline < now)
            .map(|(w, p)| (w.clone(), p.session_id))
            .collect();
        let max_strikes = self.state.config.recruiting.max_strikes;
        for (w, session) in missed {
            let entry = self.state.pool.entry(&w).expect("pinged is pooled");
            let a = entry.assignment_id;
            let strikes = entry.strikes + 1;
            self.emit(
                now,
                Some(session),
                Event::RetainerDispatched {
                    worker_id: w.clone(),
                    assignment_id: a,
                    phase: DispatchPhase::Missed { strikes },
                },
            )?;
            if strikes >= max_strikes {
                self.emit(
                    now,
                    None,
                    Event::RetainerExpired {
                        worker_id: w.clone(),
                        assignment_id: a,
                        reason: RetainerExit::Strikes,
                    },
                )?;
            }
            if self.state.sessions[&session].is_open() {
                let replaced = self.ping_workers(session, 1, Some(&w), now)?;
                if replaced.is_empty() {
                    self.post_hit(Some(session), 1, now)?;
                }
            }
        }
        Ok(())
    }

    fn expire_retainer(&mut self, now: Timestamp) -> Result<(), ChorusError> {
        let pool = &self.state.pool;
        let due: Vec<(WorkerId, AssignmentId)> = pool
            .waiting
            .iter()
            .filter(|e| e.expires_at <= now && !pool.pings.contains_key(&e.worker_id))
            .map(|e| (e.worker_id.clone(), e.assignment_id))
            .collect();
        for (w, a) in due {
            self.emit(
                now,
                None,
                Event::RetainerExpired {
                    worker_id: w,
                    assignment_id: a,
                    reason: RetainerExit::Timeout,
                },
            )?;
        }
        let slots: Vec<(HitId, AssignmentId)> = self
            .state
            .assignments
            .values()
            .filter(|a| a.state == AssignmentState::Unclaimed)
            .filter(|a| a.retainer_until.is_some_and(|t| t <= now))
            .map(|a| (a.hit_id, a.assignment_id))
            .collect();
        for (hit, a) in slots {
            let session = self.state.hit_session(hit);
            self.emit(
                now,
                session,
                Event::AssignmentExpired {
                    assignment_id: a,
                    reason: AssignmentExpiry::RetainerSlotUnclaimed,
                },
            )?;
            self.platform.expire_assignment(hit, a, now);
        }
        Ok(())
    }

    /// Turns a closed session's unclaimed assignments into retainer slots.
    /// Returns the converted assignment ids; a second call converts nothing.
    pub fn convert_to_retainer(
        &mut self,
        session: SessionId,
        now: Timestamp,
    ) -> Result<Vec<AssignmentId>, ChorusError> {
        let now = self.clamp(now);
        let rec = self
            .state
            .session(session)
            .ok_or(ChorusError::UnknownSession(session))?;
        if rec.is_open() {
            return Err(ChorusError::SessionStillOpen(session));
        }
        let duration = self.state.config.recruiting.retainer_duration_ms;
        let slots: Vec<AssignmentId> = rec
            .hits
            .iter()
            .flat_map(|h| self.state.hits[h].assignments.iter())
            .filter(|a| {
                let a = &self.state.assignments[a];
                a.state == AssignmentState::Unclaimed && a.retainer_until.is_none()
            })
            .copied()
            .collect();
        for a in &slots {
            self.emit(
                now,
                Some(session),
                Event::RetainerEntered {
                    assignment_id: *a,
                    worker_id: None,
                    expires_at: now + duration,
                },
            )?;
        }
        Ok(slots)
    }

    /// A worker takes one assignment of a HIT. Claims for an open session
    /// join it; claims after closure (or on a retainer HIT) go to the pool.
    pub fn claim_assignment(
        &mut self,
        hit: HitId,
        worker: &WorkerId,
        now: Timestamp,
    ) -> Result<ClaimOutcome, ChorusError> {
        let now = self.clamp(now);
        self.advance(now)?;
        let posting = self
            .state
            .hits
            .get(&hit)
            .ok_or(ChorusError::UnknownHit(hit))?;
        if self.state.is_busy(worker) {
            return Err(ChorusError::WorkerBusy(worker.clone()));
        }
        let open = posting
            .session_id
            .filter(|s| self.state.sessions[s].is_open());
        if let Some(s) = open {
            if self.state.sessions[&s].has_joined(worker) {
                return Err(ChorusError::AlreadyJoined {
                    session: s,
                    worker: worker.clone(),
                });
            }
        }
        let a = posting
            .assignments
            .iter()
            .copied()
            .find(|a| self.state.assignments[a].claimable(now))
            .ok_or(ChorusError::NoClaimableAssignment(hit))?;
        self.emit(
            now,
            open,
            Event::AssignmentClaimed {
                hit_id: hit,
                assignment_id: a,
                worker_id: worker.clone(),
            },
        )?;
        match open {
            Some(s) => Ok(ClaimOutcome::Joined {
                session_id: s,
                assignment_id: a,
            }),
            None => {
                let duration = self.state.config.recruiting.retainer_duration_ms;
                self.emit(
                    now,
                    None,
                    Event::RetainerEntered {
                        assignment_id: a,
                        worker_id: Some(worker.clone()),
                        expires_at: now + duration,
                    },
                )?;
                Ok(ClaimOutcome::Retainer { assignment_id: a })
            }
        }
    }

    /// Takes in claims the platform has delivered by `now`.
    pub fn poll_platform(
        &mut self,
        now: Timestamp,
    ) -> Result<Vec<(ClaimOutcome, WorkerId)>, ChorusError> {
        let now = self.clamp(now);
        let state = &self.state;
        let claims = self.platform.poll_claims(now, &|w| state.is_busy(w));
        let mut out = Vec::new();
        for c in claims {
            let outcome = match self.claim_assignment(c.hit_id, &c.worker_id, now) {
                Ok(o) => o,
                Err(ChorusError::Internal(m)) => return Err(ChorusError::Internal(m)),
                Err(e) => ClaimOutcome::Dropped {
                    reason: e.to_string(),
                },
            };
            out.push((outcome, c.worker_id));
        }
        Ok(out)
    }

    // ---- admin ----

    pub fn block_user(
        &mut self,
        user: &UserId,
        reason: &str,
        admin_token: &str,
        now: Timestamp,
    ) -> Result<UserAccount, ChorusError> {
        if admin_token != self.state.config.gateway.admin_token {
            return Err(ChorusError::Unauthorized);
        }
        let now = self.clamp(now);
        self.advance(now)?;
        let acct = self
            .state
            .users
            .get(user)
            .ok_or_else(|| ChorusError::UnknownUser(user.clone()))?;
        if acct.blocked {
            return Ok(acct.clone());
        }
        if let Some(s) = self.state.open_sessions.get(user).copied() {
            self.close_session(s, CloseReason::Timeout, now)?;
        }
        self.emit(
            now,
            None,
            Event::UserBlocked {
                user_id: user.clone(),
                reason: reason.to_owned(),
            },
        )?;
        Ok(self.state.users[user].clone())
    }

    pub fn unblock_user(
        &mut self,
        user: &UserId,
        admin_token: &str,
        now: Timestamp,
    ) -> Result<UserAccount, ChorusError> {
        if admin_token != self.state.config.gateway.admin_token {
            return Err(ChorusError::Unauthorized);
        }
        let now = self.clamp(now);
        let acct = self
            .state
            .users
            .get(user)
            .ok_or_else(|| ChorusError::UnknownUser(user.clone()))?;
        if acct.blocked {
            self.emit(
                now,
                None,
                Event::UserUnblocked {
                    user_id: user.clone(),
                },
            )?;
        }
        Ok(self.state.users[user].clone())
    }
}

#[cfg(test)]
mod tests;
