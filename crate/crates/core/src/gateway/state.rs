//! The service state as a fold over the event log.
//!
//! [`SystemState::apply`] is the only place state changes. Live operations
//! decide which events to emit and then apply them; replay applies a stored
//! log to a fresh state. Both paths run the same code, and `apply` rejects
//! any event that would break a protocol rule, so a hand-edited or damaged
//! log fails loudly instead of producing a quietly different state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ChorusConfig;
use crate::consensus::{Conversation, MessageStatus};
use crate::error::ReplayError;
use crate::event::{check_sequence, Event, EventLogEntry};
use crate::gateway::UserAccount;
use crate::ids::{AssignmentId, HitId, MessageId, SessionId, UserId, WorkerId};
use crate::incentives::{PointAction, PointsLedger};
use crate::lifecycle::{SessionRecord, SessionWorker, WorkerOutcome};
use crate::money::Cents;
use crate::recruiting::{
    Assignment, AssignmentState, DispatchPhase, HitPosting, Ping, PoolEntry, RetainerPool,
};
use crate::time::Timestamp;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub sessions: u64,
    pub messages: u64,
    pub facts: u64,
    pub assignments: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub config: ChorusConfig,
    pub users: BTreeMap<UserId, UserAccount>,
    pub sessions: BTreeMap<SessionId, SessionRecord>,
    pub open_sessions: BTreeMap<UserId, SessionId>,
    pub user_history: BTreeMap<UserId, Vec<SessionId>>,
    pub conversations: BTreeMap<SessionId, Conversation>,
    pub message_index: BTreeMap<MessageId, SessionId>,
    pub ledgers: BTreeMap<SessionId, BTreeMap<WorkerId, PointsLedger>>,
    pub settlements: BTreeMap<SessionId, BTreeMap<WorkerId, Cents>>,
    pub hits: BTreeMap<HitId, HitPosting>,
    pub assignments: BTreeMap<AssignmentId, Assignment>,
    pub pool: RetainerPool,
    pub delivered: BTreeMap<MessageId, Timestamp>,
    /// Session each worker is currently serving.
    pub serving: BTreeMap<WorkerId, SessionId>,
    pub counters: Counters,
    pub last_seq: u64,
    pub last_at: Timestamp,
}

type Applied = Result<(), String>;

impl SystemState {
    pub fn new(config: ChorusConfig) -> Self {
        let promise = config.recruiting.dispatch_promise_ms;
        Self {
            config,
            users: BTreeMap::new(),
            sessions: BTreeMap::new(),
            open_sessions: BTreeMap::new(),
            user_history: BTreeMap::new(),
            conversations: BTreeMap::new(),
            message_index: BTreeMap::new(),
            ledgers: BTreeMap::new(),
            settlements: BTreeMap::new(),
            hits: BTreeMap::new(),
            assignments: BTreeMap::new(),
            pool: RetainerPool::new(promise),
            delivered: BTreeMap::new(),
            serving: BTreeMap::new(),
            counters: Counters::default(),
            last_seq: 0,
            last_at: Timestamp::ZERO,
        }
    }

    /// Rebuilds state from a full log.
    pub fn replay(config: ChorusConfig, entries: &[EventLogEntry]) -> Result<Self, ReplayError> {
        check_sequence(entries)?;
        let mut state = Self::new(config);
        for e in entries {
            state.apply(e)?;
        }
        Ok(state)
    }

    pub fn session(&self, id: SessionId) -> Option<&SessionRecord> {
        self.sessions.get(&id)
    }

    pub fn ledger(&self, session: SessionId, worker: &WorkerId) -> Option<&PointsLedger> {
        self.ledgers.get(&session)?.get(worker)
    }

    pub fn message_session(&self, id: MessageId) -> Option<SessionId> {
        self.message_index.get(&id).copied()
    }

    /// Serving a session or standing by in the retainer.
    pub fn is_busy(&self, w: &WorkerId) -> bool {
        self.serving.contains_key(w) || self.pool.contains(w)
    }

    pub fn hit_session(&self, hit: HitId) -> Option<SessionId> {
        self.hits.get(&hit).and_then(|h| h.session_id)
    }

    pub fn apply(&mut self, e: &EventLogEntry) -> Result<(), ReplayError> {
        if e.seq != self.last_seq + 1 {
            return Err(ReplayError::Invalid {
                seq: e.seq,
                reason: format!("expected seq {}", self.last_seq + 1),
            });
        }
        if e.at < self.last_at {
            return Err(ReplayError::Invalid {
                seq: e.seq,
                reason: "timestamp went backwards".into(),
            });
        }
        self.apply_event(e).map_err(|reason| ReplayError::Invalid {
            seq: e.seq,
            reason: format!("{}: {reason}", e.kind()),
        })?;
        self.last_seq = e.seq;
        self.last_at = e.at;
        Ok(())
    }

    fn ensure_user(&mut self, user: &UserId, at: Timestamp) {
        self.users
            .entry(user.clone())
            .or_insert_with(|| UserAccount::new(user.clone(), at));
    }

    fn need_session(&self, s: Option<SessionId>) -> Result<SessionId, String> {
        let id = s.ok_or("missing session id")?;
        if !self.sessions.contains_key(&id) {
            return Err(format!("unknown session {id}"));
        }
        Ok(id)
    }

    fn need_open(&self, s: Option<SessionId>) -> Result<SessionId, String> {
        let id = self.need_session(s)?;
        if !self.sessions[&id].is_open() {
            return Err(format!("session {id} is closed"));
        }
        Ok(id)
    }

    fn need_participant(&self, s: SessionId, w: &WorkerId) -> Applied {
        if !self.sessions[&s].is_participant(w) {
            return Err(format!("{w} is not a participant of {s}"));
        }
        Ok(())
    }

    fn assignment_mut(&mut self, id: AssignmentId) -> Result<&mut Assignment, String> {
        self.assignments
            .get_mut(&id)
            .ok_or_else(|| format!("unknown assignment {id}"))
    }

    fn join_session(
        &mut self,
        session: SessionId,
        worker: &WorkerId,
        assignment: AssignmentId,
        at: Timestamp,
    ) -> Applied {
        let rec = self.sessions.get_mut(&session).expect("checked");
        if rec.has_joined(worker) {
            return Err(format!("{worker} already joined {session}"));
        }
        rec.participants.insert(
            worker.clone(),
            SessionWorker {
                assignment_id: assignment,
                joined_at: at,
                left_at: None,
                outcome: None,
            },
        );
        self.ledgers.entry(session).or_default().insert(
            worker.clone(),
            PointsLedger::new(session, worker.clone(), at),
        );
        self.conversations
            .get_mut(&session)
            .expect("conversation exists with session")
            .roster
            .touch(worker, at);
        self.serving.insert(worker.clone(), session);
        let a = self.assignment_mut(assignment)?;
        a.serving = Some(session);
        Ok(())
    }

    fn apply_event(&mut self, e: &EventLogEntry) -> Applied {
        let at = e.at;
        let cfg_life = self.config.lifecycle.clone();
        match &e.event {
            Event::UserMessage {
                user_id,
                message_id,
                body,
                dropped,
            } => {
                self.ensure_user(user_id, at);
                if *dropped {
                    if e.session_id.is_some() || message_id.is_some() {
                        return Err("dropped messages carry no session or id".into());
                    }
                    if !self.users[user_id].blocked {
                        return Err("only blocked users' messages are dropped".into());
                    }
                    return Ok(());
                }
                if self.users[user_id].blocked {
                    return Err(format!("user {user_id} is blocked"));
                }
                let sid = self.need_open(e.session_id)?;
                if self.sessions[&sid].user_id != *user_id {
                    return Err("message from a different user".into());
                }
                let mid = message_id.ok_or("routed message needs an id")?;
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .apply_user_message(mid, user_id, body, at)
                    .map_err(|e| e.to_string())?;
                self.sessions
                    .get_mut(&sid)
                    .expect("exists")
                    .on_user_message(at, &cfg_life);
                self.message_index.insert(mid, sid);
                self.counters.messages = self.counters.messages.max(mid.0);
            }
            Event::ProposalCreated {
                message_id,
                worker_id,
                body,
            } => {
                let sid = self.need_open(e.session_id)?;
                self.need_participant(sid, worker_id)?;
                if body.trim().is_empty() {
                    return Err("empty proposal".into());
                }
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .apply_proposal(*message_id, worker_id, body, at)
                    .map_err(|e| e.to_string())?;
                self.message_index.insert(*message_id, sid);
                self.counters.messages = self.counters.messages.max(message_id.0);
            }
            Event::VoteCast {
                message_id,
                worker_id,
            } => {
                let sid = self.need_open(e.session_id)?;
                self.need_participant(sid, worker_id)?;
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .apply_vote(*message_id, worker_id, at)
                    .map_err(|e| e.to_string())?;
            }
            Event::MessageAccepted { message_id, .. } => {
                let sid = self.need_open(e.session_id)?;
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .apply_accepted(*message_id, at)
                    .map_err(|e| e.to_string())?;
                self.sessions
                    .get_mut(&sid)
                    .expect("exists")
                    .on_crowd_accepted(&cfg_life);
            }
            Event::MessageDelivered {
                message_id,
                user_id,
            } => {
                let sid = self
                    .message_session(*message_id)
                    .ok_or_else(|| format!("unknown message {message_id}"))?;
                let m = &self.conversations[&sid].messages[message_id];
                if m.status != MessageStatus::Accepted {
                    return Err(format!("{message_id} is not accepted"));
                }
                if self.sessions[&sid].user_id != *user_id {
                    return Err("delivered to the wrong user".into());
                }
                if self.delivered.insert(*message_id, at).is_some() {
                    return Err(format!("{message_id} delivered twice"));
                }
            }
            Event::FactPosted {
                fact_id,
                worker_id,
                body,
            } => {
                let sid = self.need_open(e.session_id)?;
                self.need_participant(sid, worker_id)?;
                if body.trim().is_empty() {
                    return Err("empty fact".into());
                }
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .apply_fact(*fact_id, worker_id, body, at)
                    .map_err(|e| e.to_string())?;
                self.counters.facts = self.counters.facts.max(fact_id.0);
            }
            Event::PointsAwarded {
                worker_id,
                action,
                points,
                intervals,
            } => {
                let sid = self.need_open(e.session_id)?;
                let interval_ms = self.config.incentives.waiting_interval_ms;
                let ledger = self
                    .ledgers
                    .get_mut(&sid)
                    .and_then(|l| l.get_mut(worker_id))
                    .ok_or_else(|| format!("no ledger for {worker_id} in {sid}"))?;
                if *action == PointAction::Waiting {
                    if *intervals == 0 {
                        return Err("waiting award without intervals".into());
                    }
                    if ledger.waiting_intervals_due(at, interval_ms) < *intervals {
                        return Err("waiting credited ahead of time".into());
                    }
                    ledger.record_waiting(*intervals, *points, at, interval_ms);
                } else {
                    ledger.record(*action, *points, at);
                }
            }
            Event::SessionOpened { user_id, deadline } => {
                let sid = e.session_id.ok_or("missing session id")?;
                if self.sessions.contains_key(&sid) {
                    return Err(format!("session {sid} already exists"));
                }
                self.ensure_user(user_id, at);
                if self.users[user_id].blocked {
                    return Err(format!("user {user_id} is blocked"));
                }
                if let Some(open) = self.open_sessions.get(user_id) {
                    return Err(format!("user {user_id} already has open session {open}"));
                }
                let rec = SessionRecord::open(sid, user_id.clone(), at, &cfg_life);
                if rec.deadline != *deadline {
                    return Err("deadline does not match configuration".into());
                }
                self.sessions.insert(sid, rec);
                self.conversations.insert(
                    sid,
                    Conversation::new(sid, self.config.consensus.heartbeat_window_ms),
                );
                self.open_sessions.insert(user_id.clone(), sid);
                self.user_history
                    .entry(user_id.clone())
                    .or_default()
                    .push(sid);
                self.counters.sessions = self.counters.sessions.max(sid.0);
            }
            Event::SessionClosed { reason } => {
                let sid = self.need_open(e.session_id)?;
                let rec = self.sessions.get_mut(&sid).expect("exists");
                rec.close(*reason, at);
                let user = rec.user_id.clone();
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .expire_pending();
                self.open_sessions.remove(&user);
            }
            Event::HitPosted {
                hit_id,
                assignments,
                base_pay,
            } => {
                if self.hits.contains_key(hit_id) {
                    return Err(format!("HIT {hit_id} already posted"));
                }
                if assignments.is_empty()
                    || assignments.len() as u32 > self.config.recruiting.max_assignments_per_hit
                {
                    return Err("assignment count out of range".into());
                }
                let session = match e.session_id {
                    Some(_) => Some(self.need_open(e.session_id)?),
                    None => None,
                };
                for a in assignments {
                    if self.assignments.contains_key(a) {
                        return Err(format!("assignment {a} already exists"));
                    }
                    self.assignments
                        .insert(*a, Assignment::new(*a, *hit_id, at));
                    self.counters.assignments = self.counters.assignments.max(a.0);
                }
                self.hits.insert(
                    *hit_id,
                    HitPosting {
                        hit_id: *hit_id,
                        session_id: session,
                        assignments: assignments.clone(),
                        posted_at: at,
                        base_pay: *base_pay,
                    },
                );
                if let Some(sid) = session {
                    self.sessions
                        .get_mut(&sid)
                        .expect("exists")
                        .hits
                        .push(*hit_id);
                }
            }
            Event::AssignmentClaimed {
                hit_id,
                assignment_id,
                worker_id,
            } => {
                if self.is_busy(worker_id) {
                    return Err(format!("{worker_id} is busy"));
                }
                let hit_session = self
                    .hits
                    .get(hit_id)
                    .ok_or_else(|| format!("unknown HIT {hit_id}"))?
                    .session_id;
                let a = self.assignment_mut(*assignment_id)?;
                if a.hit_id != *hit_id {
                    return Err("assignment belongs to another HIT".into());
                }
                if !a.claimable(at) {
                    return Err(format!("{assignment_id} is not claimable"));
                }
                a.transition(AssignmentState::Claimed, at)
                    .map_err(|e| e.to_string())?;
                a.worker_id = Some(worker_id.clone());
                a.claimed_at = Some(at);
                let joins = hit_session.filter(|s| self.sessions[s].is_open());
                if let Some(sid) = joins {
                    if e.session_id != Some(sid) {
                        return Err("claim must be logged against the HIT's session".into());
                    }
                    self.assignment_mut(*assignment_id)?
                        .transition(AssignmentState::InConversation, at)
                        .map_err(|e| e.to_string())?;
                    self.join_session(sid, worker_id, *assignment_id, at)?;
                }
            }
            Event::AssignmentExpired { assignment_id, .. } => {
                let a = self.assignment_mut(*assignment_id)?;
                if a.state != AssignmentState::Unclaimed {
                    return Err(format!("{assignment_id} is held by a worker"));
                }
                a.transition(AssignmentState::Expired, at)
                    .map_err(|e| e.to_string())?;
            }
            Event::RetainerEntered {
                assignment_id,
                worker_id,
                expires_at,
            } => {
                let duration = self.config.recruiting.retainer_duration_ms;
                if *expires_at != at + duration {
                    return Err("retainer expiry does not match configuration".into());
                }
                match worker_id {
                    None => {
                        let a = self.assignment_mut(*assignment_id)?;
                        if a.state != AssignmentState::Unclaimed || a.retainer_until.is_some() {
                            return Err(format!("{assignment_id} cannot become a slot"));
                        }
                        a.retainer_until = Some(*expires_at);
                    }
                    Some(w) => {
                        if self.pool.contains(w) {
                            return Err(format!("{w} already in the retainer"));
                        }
                        if self.serving.contains_key(w) {
                            return Err(format!("{w} is still serving a session"));
                        }
                        let a = self.assignment_mut(*assignment_id)?;
                        if a.worker_id.as_ref() != Some(w) {
                            return Err("assignment held by another worker".into());
                        }
                        a.transition(AssignmentState::InRetainer, at)
                            .map_err(|e| e.to_string())?;
                        a.serving = None;
                        self.pool.enter(PoolEntry {
                            worker_id: w.clone(),
                            assignment_id: *assignment_id,
                            entered_at: at,
                            expires_at: *expires_at,
                            strikes: 0,
                        });
                    }
                }
            }
            Event::RetainerDispatched {
                worker_id,
                assignment_id,
                phase,
            } => {
                let entry = self
                    .pool
                    .entry(worker_id)
                    .ok_or_else(|| format!("{worker_id} is not in the retainer"))?;
                if entry.assignment_id != *assignment_id {
                    return Err("assignment mismatch".into());
                }
                match phase {
                    DispatchPhase::Pinged { deadline } => {
                        let sid = self.need_open(e.session_id)?;
                        if self.pool.pings.contains_key(worker_id) {
                            return Err(format!("{worker_id} already pinged"));
                        }
                        if at >= entry.expires_at {
                            return Err("retainer entry has expired".into());
                        }
                        if *deadline != at + self.config.recruiting.dispatch_promise_ms {
                            return Err("ping deadline does not match configuration".into());
                        }
                        if self.sessions[&sid].has_joined(worker_id) {
                            return Err(format!("{worker_id} already served {sid}"));
                        }
                        self.pool.pings.insert(
                            worker_id.clone(),
                            Ping {
                                session_id: sid,
                                sent_at: at,
                                deadline: *deadline,
                            },
                        );
                    }
                    DispatchPhase::Joined => {
                        let sid = self.need_open(e.session_id)?;
                        let ping = self
                            .pool
                            .pings
                            .get(worker_id)
                            .ok_or_else(|| format!("{worker_id} was not pinged"))?;
                        if ping.session_id != sid || at > ping.deadline {
                            return Err("join outside the ping".into());
                        }
                        self.pool.remove(worker_id);
                        self.assignment_mut(*assignment_id)?
                            .transition(AssignmentState::InConversation, at)
                            .map_err(|e| e.to_string())?;
                        self.join_session(sid, worker_id, *assignment_id, at)?;
                    }
                    DispatchPhase::Missed { strikes } => {
                        let ping = self
                            .pool
                            .pings
                            .get(worker_id)
                            .ok_or_else(|| format!("{worker_id} was not pinged"))?;
                        if at <= ping.deadline {
                            return Err("ping missed before its deadline".into());
                        }
                        let s = self.pool.strike(worker_id).expect("present");
                        if s != *strikes {
                            return Err(format!("strike count {s} != {strikes}"));
                        }
                    }
                    DispatchPhase::Cancelled => {
                        if self.pool.pings.remove(worker_id).is_none() {
                            return Err(format!("{worker_id} was not pinged"));
                        }
                    }
                }
            }
            Event::RetainerExpired {
                worker_id,
                assignment_id,
                ..
            } => {
                let entry = self
                    .pool
                    .remove(worker_id)
                    .ok_or_else(|| format!("{worker_id} is not in the retainer"))?;
                if entry.assignment_id != *assignment_id {
                    return Err("assignment mismatch".into());
                }
                self.assignment_mut(*assignment_id)?
                    .transition(AssignmentState::Expired, at)
                    .map_err(|e| e.to_string())?;
            }
            Event::SubmissionRecorded {
                worker_id,
                assignment_id,
                forced,
                returned_to_retainer,
            } => {
                let sid = self.need_session(e.session_id)?;
                let rec = self.sessions.get_mut(&sid).expect("exists");
                if *forced == rec.is_open() {
                    return Err("forced submissions happen exactly at closure".into());
                }
                if *returned_to_retainer && !*forced {
                    return Err("only forced workers return to the retainer".into());
                }
                let p = rec
                    .participants
                    .get_mut(worker_id)
                    .ok_or_else(|| format!("{worker_id} never joined {sid}"))?;
                if p.outcome.is_some() {
                    return Err(format!("{worker_id} already left {sid}"));
                }
                if p.assignment_id != *assignment_id {
                    return Err("assignment mismatch".into());
                }
                p.left_at = Some(at);
                p.outcome = Some(match (forced, returned_to_retainer) {
                    (false, _) => WorkerOutcome::Submitted,
                    (true, false) => WorkerOutcome::ForceSubmitted,
                    (true, true) => WorkerOutcome::ReturnedToRetainer,
                });
                if !*forced {
                    rec.submissions.insert(worker_id.clone());
                }
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .roster
                    .remove(worker_id);
                self.serving.remove(worker_id);
                let a = self.assignment_mut(*assignment_id)?;
                a.serving = None;
                if !*returned_to_retainer {
                    a.transition(AssignmentState::Submitted, at)
                        .map_err(|e| e.to_string())?;
                }
            }
            Event::BonusSettled {
                worker_id,
                points,
                amount,
            } => {
                let sid = self.need_session(e.session_id)?;
                if self.sessions[&sid].is_open() {
                    return Err("settling an open session".into());
                }
                let total = self.ledger(sid, worker_id).map(|l| l.total).unwrap_or(0);
                if total != *points {
                    return Err(format!("settled {points} points, ledger has {total}"));
                }
                let bucket = self.settlements.entry(sid).or_default();
                if bucket.insert(worker_id.clone(), *amount).is_some() {
                    return Err(format!("{worker_id} settled twice in {sid}"));
                }
            }
            Event::AutoReplySent { user_id, .. } => {
                self.ensure_user(user_id, at);
            }
            Event::UserBlocked { user_id, reason } => {
                let acct = self
                    .users
                    .get_mut(user_id)
                    .ok_or_else(|| format!("unknown user {user_id}"))?;
                if acct.blocked {
                    return Err(format!("{user_id} already blocked"));
                }
                if self.open_sessions.contains_key(user_id) {
                    return Err("blocked user still has an open session".into());
                }
                acct.blocked = true;
                acct.blocked_at = Some(at);
                acct.blocked_reason = Some(reason.clone());
            }
            Event::UserUnblocked { user_id } => {
                let acct = self
                    .users
                    .get_mut(user_id)
                    .ok_or_else(|| format!("unknown user {user_id}"))?;
                if !acct.blocked {
                    return Err(format!("{user_id} is not blocked"));
                }
                acct.blocked = false;
                acct.blocked_at = None;
                acct.blocked_reason = None;
            }
            Event::WorkerHeartbeat { worker_id } => {
                let sid = self.need_open(e.session_id)?;
                self.need_participant(sid, worker_id)?;
                self.conversations
                    .get_mut(&sid)
                    .expect("exists")
                    .roster
                    .touch(worker_id, at);
            }
        }
        Ok(())
    }
}
