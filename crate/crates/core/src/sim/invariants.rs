//! Protocol invariants checked over a finished run.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::{ChorusConfig, RecruitingPolicy};
use crate::event::{check_sequence, Event, EventLogEntry};
use crate::gateway::SystemState;
use crate::ids::{MessageId, SessionId, UserId, WorkerId};
use crate::incentives::bonus_for_points;
use crate::lifecycle::CloseReason;
use crate::recruiting::{DispatchPhase, RetainerExit};

/// Returns one line per violated invariant; empty means the run is clean.
pub fn check_invariants(
    config: &ChorusConfig,
    entries: &[EventLogEntry],
    live: &SystemState,
) -> Vec<String> {
    let mut v = Vec::new();
    if let Err(e) = check_sequence(entries) {
        v.push(format!("log sequence: {e}"));
        return v;
    }
    match SystemState::replay(config.clone(), entries) {
        Ok(replayed) if &replayed == live => {}
        Ok(_) => v.push("replayed state differs from live state".into()),
        Err(e) => v.push(format!("replay failed: {e}")),
    }
    fold_checks(config, entries, &mut v);
    state_checks(config, live, &mut v);
    v
}

fn fold_checks(config: &ChorusConfig, entries: &[EventLogEntry], v: &mut Vec<String>) {
    let mut accepted: BTreeSet<MessageId> = BTreeSet::new();
    let mut delivered: BTreeSet<MessageId> = BTreeSet::new();
    let mut serving: BTreeMap<WorkerId, SessionId> = BTreeMap::new();
    let mut open: BTreeMap<UserId, SessionId> = BTreeMap::new();
    let mut closed: BTreeSet<SessionId> = BTreeSet::new();
    let mut blocked: BTreeSet<UserId> = BTreeSet::new();
    let mut voluntary: BTreeMap<SessionId, u32> = BTreeMap::new();
    let mut settled: BTreeSet<(SessionId, WorkerId)> = BTreeSet::new();
    let retainer_ms = config.recruiting.retainer_duration_ms;

    for (i, e) in entries.iter().enumerate() {
        let at = e.at;
        let sid = e.session_id;
        let tag = |m: String| format!("seq {}: {m}", e.seq);
        let in_closed = sid.is_some_and(|s| closed.contains(&s));
        match &e.event {
            Event::UserMessage {
                user_id, dropped, ..
            } => {
                if blocked.contains(user_id) && !dropped {
                    v.push(tag(format!(
                        "message from blocked user {user_id} was not dropped"
                    )));
                }
            }
            Event::SessionOpened { user_id, .. } => {
                let s = sid.expect("session event");
                if blocked.contains(user_id) {
                    v.push(tag(format!("session opened for blocked user {user_id}")));
                }
                if let Some(prev) = open.insert(user_id.clone(), s) {
                    v.push(tag(format!(
                        "user {user_id} has sessions {prev} and {s} open"
                    )));
                }
                // Initial recruiting happens in the same instant.
                let mut pinged = 0u32;
                let mut posted = 0u32;
                for f in entries[i + 1..].iter().take_while(|f| f.at == at) {
                    if f.session_id != Some(s) {
                        continue;
                    }
                    match &f.event {
                        Event::RetainerDispatched {
                            phase: DispatchPhase::Pinged { .. },
                            ..
                        } => pinged += 1,
                        Event::HitPosted { assignments, .. } => posted += assignments.len() as u32,
                        _ => {}
                    }
                }
                let target = config.recruiting.target_crowd_size;
                let ok = match config.recruiting.policy {
                    RecruitingPolicy::Static => pinged == 0 && posted == target,
                    RecruitingPolicy::Dynamic => pinged + posted == target,
                };
                if !ok {
                    v.push(tag(format!(
                        "session {s} recruited {pinged} pinged + {posted} posted for target {target}"
                    )));
                }
            }
            Event::SessionClosed { reason } => {
                let s = sid.expect("session event");
                if !closed.insert(s) {
                    v.push(tag(format!("session {s} closed twice")));
                }
                open.retain(|_, o| *o != s);
                let n = voluntary.get(&s).copied().unwrap_or(0);
                if *reason == CloseReason::TwoSubmissions
                    && n != config.lifecycle.submissions_to_close
                {
                    v.push(tag(format!(
                        "session {s} closed on submissions with {n} submissions"
                    )));
                }
            }
            Event::ProposalCreated { .. }
            | Event::VoteCast { .. }
            | Event::FactPosted { .. }
            | Event::WorkerHeartbeat { .. }
                if in_closed =>
            {
                v.push(tag(format!("{:?} in closed session", e.kind())));
            }
            Event::MessageAccepted { message_id, .. } => {
                if !accepted.insert(*message_id) {
                    v.push(tag(format!("message {message_id} accepted twice")));
                }
            }
            Event::MessageDelivered { message_id, .. } => {
                if !accepted.contains(message_id) {
                    v.push(tag(format!(
                        "message {message_id} delivered before acceptance"
                    )));
                }
                if !delivered.insert(*message_id) {
                    v.push(tag(format!("message {message_id} delivered twice")));
                }
            }
            Event::AssignmentClaimed { worker_id, .. }
            | Event::RetainerDispatched {
                worker_id,
                phase: DispatchPhase::Joined,
                ..
            } => {
                if let Some(s) = sid {
                    if let Some(prev) = serving.insert(worker_id.clone(), s) {
                        v.push(tag(format!(
                            "worker {worker_id} joined {s} while serving {prev}"
                        )));
                    }
                }
            }
            Event::SubmissionRecorded {
                worker_id, forced, ..
            } => {
                let s = sid.expect("session event");
                if !forced {
                    if in_closed {
                        v.push(tag(format!("voluntary submission to closed session {s}")));
                    }
                    *voluntary.entry(s).or_default() += 1;
                }
                if serving.remove(worker_id) != Some(s) {
                    v.push(tag(format!(
                        "worker {worker_id} left {s} without serving it"
                    )));
                }
            }
            Event::BonusSettled { worker_id, .. } => {
                let s = sid.expect("session event");
                if !closed.contains(&s) {
                    v.push(tag(format!("bonus settled for open session {s}")));
                }
                if !settled.insert((s, worker_id.clone())) {
                    v.push(tag(format!("bonus for {worker_id} in {s} settled twice")));
                }
            }
            Event::RetainerEntered {
                worker_id: Some(w),
                expires_at,
                ..
            } => {
                if *expires_at != at + retainer_ms {
                    v.push(tag(format!(
                        "retainer entry for {w} expires at {expires_at}"
                    )));
                }
            }
            Event::RetainerExpired {
                worker_id,
                reason: RetainerExit::Timeout,
                ..
            } => {
                let entered = entries[..i].iter().rev().find_map(|f| match &f.event {
                    Event::RetainerEntered {
                        worker_id: Some(w),
                        expires_at,
                        ..
                    } if w == worker_id => Some(*expires_at),
                    _ => None,
                });
                if entered.is_some_and(|x| at < x) {
                    v.push(tag(format!("retainer entry for {worker_id} expired early")));
                }
            }
            Event::UserBlocked { user_id, .. } => {
                if open.contains_key(user_id) {
                    v.push(tag(format!("user {user_id} blocked with a session open")));
                }
                blocked.insert(user_id.clone());
            }
            Event::UserUnblocked { user_id } => {
                blocked.remove(user_id);
            }
            _ => {}
        }
    }
    for m in &accepted {
        if !delivered.contains(m) {
            v.push(format!("accepted message {m} never delivered"));
        }
    }
}

fn state_checks(config: &ChorusConfig, s: &SystemState, v: &mut Vec<String>) {
    for rec in s.sessions.values() {
        let sid = rec.session_id;
        if let Some(ledgers) = s.ledgers.get(&sid) {
            for (w, l) in ledgers {
                if l.entries_total() != l.total {
                    v.push(format!(
                        "ledger {sid}/{w}: total {} != sum of entries",
                        l.total
                    ));
                }
            }
        }
        if rec.is_open() {
            continue;
        }
        if rec.remaining_workers().next().is_some() {
            v.push(format!("closed session {sid} still has participants"));
        }
        let settlements = s.settlements.get(&sid);
        for w in rec.participants.keys() {
            let points = s.ledger(sid, w).map(|l| l.total).unwrap_or(0);
            let due = bonus_for_points(points, &config.incentives);
            match settlements.and_then(|m| m.get(w)) {
                Some(paid) if *paid == due => {}
                other => v.push(format!("session {sid}: {w} settled {other:?}, owed {due}")),
            }
        }
        if let Some(conv) = s.conversations.get(&sid) {
            if conv.pending().next().is_some() {
                v.push(format!("closed session {sid} has pending proposals"));
            }
        }
    }
    for (w, sid) in &s.serving {
        if !s
            .session(*sid)
            .is_some_and(|r| r.is_open() && r.is_participant(w))
        {
            v.push(format!("worker {w} marked serving {sid} but is not in it"));
        }
    }
    for e in &s.pool.waiting {
        if s.serving.contains_key(&e.worker_id) {
            v.push(format!(
                "worker {} is both in the retainer and serving",
                e.worker_id
            ));
        }
    }
}
