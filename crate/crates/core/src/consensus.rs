//! Proposal and vote state for a conversation.
//!
//! Workers propose replies and vote for each other's proposals. A proposal
//! is accepted once its vote set (the proposer's implicit vote included)
//! reaches [`acceptance_threshold`] of the workers currently on the page.
//! With one or two workers present the threshold is one, so a lone worker's
//! proposal goes straight through.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{FactId, MessageId, Participant, SessionId, UserId, WorkerId};
use crate::time::Timestamp;

pub const DEFAULT_ACCEPTANCE_PERCENT: u32 = 40;

/// Votes needed to accept a proposal with `active_count` workers on the
/// page: `max(1, ceil(0.4 * active_count))`.
pub fn acceptance_threshold(active_count: u32) -> u32 {
    acceptance_threshold_with(DEFAULT_ACCEPTANCE_PERCENT, active_count)
}

pub fn acceptance_threshold_with(percent: u32, active_count: u32) -> u32 {
    let scaled = u64::from(percent) * u64::from(active_count);
    let ceil = scaled.div_ceil(100) as u32;
    ceil.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    User,
    WorkerProposal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageStatus {
    Pending,
    Accepted,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub message_id: MessageId,
    pub session_id: SessionId,
    pub author: Participant,
    pub body: String,
    pub proposed_at: Timestamp,
    pub kind: MessageKind,
    pub votes: BTreeSet<WorkerId>,
    pub status: MessageStatus,
    pub accepted_at: Option<Timestamp>,
}

impl ChatMessage {
    pub fn is_pending(&self) -> bool {
        self.status == MessageStatus::Pending
    }

    pub fn vote_count(&self) -> u32 {
        self.votes.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactEntry {
    pub fact_id: FactId,
    pub session_id: SessionId,
    pub author: WorkerId,
    pub body: String,
    pub posted_at: Timestamp,
}

/// Who is on the page right now, by last heartbeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveWorkerRoster {
    pub session_id: SessionId,
    pub workers: BTreeMap<WorkerId, Timestamp>,
    pub heartbeat_window_ms: u64,
}

impl ActiveWorkerRoster {
    pub fn new(session_id: SessionId, heartbeat_window_ms: u64) -> Self {
        Self {
            session_id,
            workers: BTreeMap::new(),
            heartbeat_window_ms,
        }
    }

    pub fn touch(&mut self, worker: &WorkerId, at: Timestamp) {
        let slot = self.workers.entry(worker.clone()).or_insert(at);
        if at > *slot {
            *slot = at;
        }
    }

    pub fn remove(&mut self, worker: &WorkerId) {
        self.workers.remove(worker);
    }

    pub fn is_active(&self, worker: &WorkerId, now: Timestamp) -> bool {
        self.workers
            .get(worker)
            .is_some_and(|&seen| seen <= now && now.since(seen) <= self.heartbeat_window_ms)
    }

    pub fn active_workers(&self, now: Timestamp) -> impl Iterator<Item = &WorkerId> {
        self.workers
            .iter()
            .filter(move |(_, &seen)| seen <= now && now.since(seen) <= self.heartbeat_window_ms)
            .map(|(w, _)| w)
    }

    pub fn active_count(&self, now: Timestamp) -> u32 {
        self.active_workers(now).count() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConsensusError {
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("message {0} is not pending")]
    MessageNotPending(MessageId),
    #[error("worker {worker} already voted for {message}")]
    AlreadyVoted {
        message: MessageId,
        worker: WorkerId,
    },
    #[error("message {0} already exists")]
    DuplicateMessage(MessageId),
    #[error("fact {0} already exists")]
    DuplicateFact(FactId),
}

/// Messages, facts and presence for one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub session_id: SessionId,
    pub messages: BTreeMap<MessageId, ChatMessage>,
    pub facts: Vec<FactEntry>,
    pub roster: ActiveWorkerRoster,
}

impl Conversation {
    pub fn new(session_id: SessionId, heartbeat_window_ms: u64) -> Self {
        Self {
            session_id,
            messages: BTreeMap::new(),
            facts: Vec::new(),
            roster: ActiveWorkerRoster::new(session_id, heartbeat_window_ms),
        }
    }

    pub fn message(&self, id: MessageId) -> Result<&ChatMessage, ConsensusError> {
        self.messages
            .get(&id)
            .ok_or(ConsensusError::UnknownMessage(id))
    }

    pub fn pending(&self) -> impl Iterator<Item = &ChatMessage> {
        self.messages.values().filter(|m| m.is_pending())
    }

    /// Chronological order: time first, then id.
    pub fn chronological(&self) -> Vec<&ChatMessage> {
        let mut v: Vec<&ChatMessage> = self.messages.values().collect();
        v.sort_by_key(|m| (m.proposed_at, m.message_id));
        v
    }

    /// Accepted worker messages in delivery order.
    pub fn accepted_in_order(&self) -> Vec<&ChatMessage> {
        let mut v: Vec<&ChatMessage> = self
            .messages
            .values()
            .filter(|m| {
                m.kind == MessageKind::WorkerProposal && m.status == MessageStatus::Accepted
            })
            .collect();
        v.sort_by_key(|m| (m.accepted_at, m.message_id));
        v
    }

    pub fn check_vote(&self, id: MessageId, worker: &WorkerId) -> Result<(), ConsensusError> {
        let m = self.message(id)?;
        if !m.is_pending() {
            return Err(ConsensusError::MessageNotPending(id));
        }
        if m.votes.contains(worker) {
            return Err(ConsensusError::AlreadyVoted {
                message: id,
                worker: worker.clone(),
            });
        }
        Ok(())
    }

    /// Threshold check against the roster at `now`. Returns the vote count,
    /// active count, and threshold when the message should be accepted.
    pub fn acceptance_due(
        &self,
        id: MessageId,
        percent: u32,
        now: Timestamp,
    ) -> Result<Option<(u32, u32, u32)>, ConsensusError> {
        let m = self.message(id)?;
        if !m.is_pending() {
            return Ok(None);
        }
        let active = self.roster.active_count(now);
        let threshold = acceptance_threshold_with(percent, active);
        let votes = m.vote_count();
        Ok((votes >= threshold).then_some((votes, active, threshold)))
    }

    pub fn apply_user_message(
        &mut self,
        id: MessageId,
        user: &UserId,
        body: &str,
        at: Timestamp,
    ) -> Result<(), ConsensusError> {
        if self.messages.contains_key(&id) {
            return Err(ConsensusError::DuplicateMessage(id));
        }
        self.messages.insert(
            id,
            ChatMessage {
                message_id: id,
                session_id: self.session_id,
                author: Participant::User(user.clone()),
                body: body.to_owned(),
                proposed_at: at,
                kind: MessageKind::User,
                votes: BTreeSet::new(),
                status: MessageStatus::Accepted,
                accepted_at: Some(at),
            },
        );
        Ok(())
    }

    pub fn apply_proposal(
        &mut self,
        id: MessageId,
        worker: &WorkerId,
        body: &str,
        at: Timestamp,
    ) -> Result<(), ConsensusError> {
        if self.messages.contains_key(&id) {
            return Err(ConsensusError::DuplicateMessage(id));
        }
        self.messages.insert(
            id,
            ChatMessage {
                message_id: id,
                session_id: self.session_id,
                author: Participant::Worker(worker.clone()),
                body: body.to_owned(),
                proposed_at: at,
                kind: MessageKind::WorkerProposal,
                votes: BTreeSet::from([worker.clone()]),
                status: MessageStatus::Pending,
                accepted_at: None,
            },
        );
        self.roster.touch(worker, at);
        Ok(())
    }

    pub fn apply_vote(
        &mut self,
        id: MessageId,
        worker: &WorkerId,
        at: Timestamp,
    ) -> Result<(), ConsensusError> {
        self.check_vote(id, worker)?;
        self.messages
            .get_mut(&id)
            .expect("checked")
            .votes
            .insert(worker.clone());
        self.roster.touch(worker, at);
        Ok(())
    }

    pub fn apply_accepted(&mut self, id: MessageId, at: Timestamp) -> Result<(), ConsensusError> {
        let m = self
            .messages
            .get_mut(&id)
            .ok_or(ConsensusError::UnknownMessage(id))?;
        if !m.is_pending() {
            return Err(ConsensusError::MessageNotPending(id));
        }
        m.status = MessageStatus::Accepted;
        m.accepted_at = Some(at);
        Ok(())
    }

    pub fn apply_fact(
        &mut self,
        id: FactId,
        worker: &WorkerId,
        body: &str,
        at: Timestamp,
    ) -> Result<(), ConsensusError> {
        if self.facts.iter().any(|f| f.fact_id == id) {
            return Err(ConsensusError::DuplicateFact(id));
        }
        self.facts.push(FactEntry {
            fact_id: id,
            session_id: self.session_id,
            author: worker.clone(),
            body: body.to_owned(),
            posted_at: at,
        });
        self.roster.touch(worker, at);
        Ok(())
    }

    /// Pending proposals at closure are never sent.
    pub fn expire_pending(&mut self) -> Vec<MessageId> {
        let mut expired = Vec::new();
        for m in self.messages.values_mut() {
            if m.is_pending() {
                m.status = MessageStatus::Expired;
                expired.push(m.message_id);
            }
        }
        self.roster.workers.clear();
        expired
    }

    /// Facts newest first.
    pub fn facts_newest_first(&self) -> Vec<&FactEntry> {
        let mut v: Vec<&FactEntry> = self.facts.iter().collect();
        v.sort_by(|a, b| {
            b.posted_at
                .cmp(&a.posted_at)
                .then_with(|| b.fact_id.cmp(&a.fact_id))
        });
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayClass {
    /// Pending, proposed by someone else and not voted by the viewer.
    OtherPending,
    /// Pending, proposed or voted by the viewer.
    OwnPendingOrVoted,
    Accepted,
    /// Never sent; the session closed first.
    Expired,
}

pub fn display_class(m: &ChatMessage, viewer: &WorkerId) -> DisplayClass {
    match m.status {
        MessageStatus::Accepted => DisplayClass::Accepted,
        MessageStatus::Expired => DisplayClass::Expired,
        MessageStatus::Pending => {
            let own = m.author.worker() == Some(viewer) || m.votes.contains(viewer);
            if own {
                DisplayClass::OwnPendingOrVoted
            } else {
                DisplayClass::OtherPending
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChatItem {
    /// Boundary between an earlier session and the next one.
    Separator {
        previous_session: SessionId,
        next_session: SessionId,
    },
    Message {
        session_id: SessionId,
        /// 1-based position within its session, for issue reports.
        index: u32,
        message_id: MessageId,
        author: Participant,
        body: String,
        at: Timestamp,
        votes: u32,
        display: DisplayClass,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FactItem {
    Separator {
        newer_session: SessionId,
        older_session: SessionId,
    },
    Fact {
        session_id: SessionId,
        index: u32,
        fact_id: FactId,
        author: WorkerId,
        body: String,
        at: Timestamp,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerView {
    pub session_id: SessionId,
    pub worker_id: WorkerId,
    /// Oldest first, newest at the bottom.
    pub chat: Vec<ChatItem>,
    /// Newest first.
    pub facts: Vec<FactItem>,
}

impl WorkerView {
    pub fn chat_separators(&self) -> usize {
        self.chat
            .iter()
            .filter(|i| matches!(i, ChatItem::Separator { .. }))
            .count()
    }

    pub fn fact_separators(&self) -> usize {
        self.facts
            .iter()
            .filter(|i| matches!(i, FactItem::Separator { .. }))
            .count()
    }

    pub fn messages(&self) -> impl Iterator<Item = &ChatItem> {
        self.chat
            .iter()
            .filter(|i| matches!(i, ChatItem::Message { .. }))
    }
}

/// Builds a worker's view from the user's conversations, oldest session
/// first and the current session last.
pub fn render_view(history: &[&Conversation], viewer: &WorkerId) -> WorkerView {
    let current = history.last().expect("at least the current session");
    let mut chat = Vec::new();
    for (i, conv) in history.iter().enumerate() {
        if i > 0 {
            chat.push(ChatItem::Separator {
                previous_session: history[i - 1].session_id,
                next_session: conv.session_id,
            });
        }
        for (idx, m) in conv.chronological().into_iter().enumerate() {
            chat.push(ChatItem::Message {
                session_id: conv.session_id,
                index: idx as u32 + 1,
                message_id: m.message_id,
                author: m.author.clone(),
                body: m.body.clone(),
                at: m.proposed_at,
                votes: m.vote_count(),
                display: display_class(m, viewer),
            });
        }
    }

    let mut facts = Vec::new();
    for (i, conv) in history.iter().enumerate().rev() {
        if i + 1 < history.len() {
            facts.push(FactItem::Separator {
                newer_session: history[i + 1].session_id,
                older_session: conv.session_id,
            });
        }
        // Index in posting order so numbers stay stable as facts arrive.
        let mut ordinals: BTreeMap<FactId, u32> = BTreeMap::new();
        let mut by_time: Vec<&FactEntry> = conv.facts.iter().collect();
        by_time.sort_by_key(|f| (f.posted_at, f.fact_id));
        for (n, f) in by_time.iter().enumerate() {
            ordinals.insert(f.fact_id, n as u32 + 1);
        }
        for f in conv.facts_newest_first() {
            facts.push(FactItem::Fact {
                session_id: conv.session_id,
                index: ordinals[&f.fact_id],
                fact_id: f.fact_id,
                author: f.author.clone(),
                body: f.body.clone(),
                at: f.posted_at,
            });
        }
    }

    WorkerView {
        session_id: current.session_id,
        worker_id: viewer.clone(),
        chat,
        facts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> WorkerId {
        WorkerId::new(s)
    }

    /// Independent oracle: smallest k >= 1 with k / n >= 0.4, by search.
    fn threshold_oracle(n: u32) -> u32 {
        (1..=n.max(1))
            .find(|&k| 10 * k >= 4 * n)
            .expect("k = n always satisfies")
    }

    #[test]
    fn threshold_table_matches_oracle() {
        for n in 0..=50 {
            assert_eq!(acceptance_threshold(n), threshold_oracle(n), "n = {n}");
        }
        assert_eq!(acceptance_threshold(10), 4);
        assert_eq!(acceptance_threshold(6), 3);
        assert_eq!(acceptance_threshold(2), 1);
        assert_eq!(acceptance_threshold(1), 1);
        assert_eq!(acceptance_threshold(0), 1);
    }

    proptest! {
        #[test]
        fn threshold_monotone_and_positive(n in 0u32..100_000) {
            let t = acceptance_threshold(n);
            prop_assert!(t >= 1);
            prop_assert!(acceptance_threshold(n + 1) >= t);
            prop_assert!(t <= n.max(1));
        }
    }

    fn conv_with_workers(n: usize, at: Timestamp) -> Conversation {
        let mut c = Conversation::new(SessionId(1), 30_000);
        for i in 0..n {
            c.roster.touch(&w(&format!("w{i}")), at);
        }
        c
    }

    #[test]
    fn lone_worker_proposal_is_due_immediately() {
        let t = Timestamp(1_000);
        let mut c = conv_with_workers(1, t);
        c.apply_proposal(MessageId(1), &w("w0"), "hello", t)
            .unwrap();
        assert_eq!(
            c.acceptance_due(MessageId(1), 40, t).unwrap(),
            Some((1, 1, 1))
        );
    }

    #[test]
    fn six_workers_need_three_votes() {
        let t = Timestamp(1_000);
        let mut c = conv_with_workers(6, t);
        c.apply_proposal(MessageId(1), &w("w0"), "hello", t)
            .unwrap();
        assert_eq!(c.acceptance_due(MessageId(1), 40, t).unwrap(), None);
        c.apply_vote(MessageId(1), &w("w1"), t).unwrap();
        assert_eq!(c.acceptance_due(MessageId(1), 40, t).unwrap(), None);
        c.apply_vote(MessageId(1), &w("w2"), t).unwrap();
        assert_eq!(
            c.acceptance_due(MessageId(1), 40, t).unwrap(),
            Some((3, 6, 3))
        );
    }

    #[test]
    fn ten_workers_two_votes_stays_pending() {
        let t = Timestamp(0);
        let mut c = conv_with_workers(10, t);
        c.apply_proposal(MessageId(1), &w("w0"), "x", t).unwrap();
        c.apply_vote(MessageId(1), &w("w1"), t).unwrap();
        assert_eq!(c.acceptance_due(MessageId(1), 40, t).unwrap(), None);
    }

    #[test]
    fn vote_guards() {
        let t = Timestamp(0);
        let mut c = conv_with_workers(10, t);
        c.apply_proposal(MessageId(1), &w("w0"), "x", t).unwrap();
        assert_eq!(
            c.apply_vote(MessageId(1), &w("w0"), t),
            Err(ConsensusError::AlreadyVoted {
                message: MessageId(1),
                worker: w("w0")
            })
        );
        c.apply_accepted(MessageId(1), t).unwrap();
        assert_eq!(
            c.apply_vote(MessageId(1), &w("w3"), t),
            Err(ConsensusError::MessageNotPending(MessageId(1)))
        );
        assert_eq!(
            c.apply_accepted(MessageId(1), t),
            Err(ConsensusError::MessageNotPending(MessageId(1)))
        );
        assert_eq!(
            c.apply_vote(MessageId(9), &w("w3"), t),
            Err(ConsensusError::UnknownMessage(MessageId(9)))
        );
    }

    #[test]
    fn roster_window_is_inclusive() {
        let mut r = ActiveWorkerRoster::new(SessionId(1), 30_000);
        r.touch(&w("a"), Timestamp(0));
        assert_eq!(r.active_count(Timestamp(30_000)), 1);
        assert_eq!(r.active_count(Timestamp(30_001)), 0);
        r.touch(&w("a"), Timestamp(10));
        r.touch(&w("a"), Timestamp(5));
        assert_eq!(r.workers[&w("a")], Timestamp(10));
    }

    #[test]
    fn display_classes() {
        let t = Timestamp(0);
        let mut c = conv_with_workers(10, t);
        c.apply_proposal(MessageId(1), &w("w0"), "x", t).unwrap();
        let m = c.message(MessageId(1)).unwrap();
        assert_eq!(display_class(m, &w("w0")), DisplayClass::OwnPendingOrVoted);
        assert_eq!(display_class(m, &w("w1")), DisplayClass::OtherPending);
        c.apply_vote(MessageId(1), &w("w1"), t).unwrap();
        let m = c.message(MessageId(1)).unwrap();
        assert_eq!(display_class(m, &w("w1")), DisplayClass::OwnPendingOrVoted);
        c.apply_accepted(MessageId(1), t).unwrap();
        let m = c.message(MessageId(1)).unwrap();
        assert_eq!(display_class(m, &w("w2")), DisplayClass::Accepted);
    }

    #[test]
    fn view_separators_and_fact_order() {
        let user = UserId::new("u");
        let mut convs = Vec::new();
        for s in 1..=3u64 {
            let mut c = Conversation::new(SessionId(s), 30_000);
            let base = Timestamp(s * 1_000_000);
            c.apply_user_message(MessageId(s * 10), &user, "hi", base)
                .unwrap();
            c.apply_fact(FactId(s * 10), &w("w"), "older", base + 1)
                .unwrap();
            c.apply_fact(FactId(s * 10 + 1), &w("w"), "newer", base + 2)
                .unwrap();
            convs.push(c);
        }
        let refs: Vec<&Conversation> = convs.iter().collect();
        let view = render_view(&refs, &w("w"));
        assert_eq!(view.session_id, SessionId(3));
        assert_eq!(view.chat_separators(), 2);
        assert_eq!(view.fact_separators(), 2);
        match &view.facts[0] {
            FactItem::Fact {
                session_id,
                body,
                index,
                ..
            } => {
                assert_eq!(*session_id, SessionId(3));
                assert_eq!(body, "newer");
                assert_eq!(*index, 2);
            }
            other => panic!("unexpected {other:?}"),
        }

        let fresh = render_view(&refs[..1], &w("w"));
        assert_eq!(fresh.chat_separators(), 0);
        assert_eq!(fresh.fact_separators(), 0);
    }
}
