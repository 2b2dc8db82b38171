use super::*;
use crate::recruiting::{ClaimEvent, ManualPlatform};
use crate::time::{MINUTE_MS, SECOND_MS};

type Engine = Chorus<ManualPlatform>;

fn t(secs: u64) -> Timestamp {
    Timestamp(secs * SECOND_MS)
}

fn engine() -> Engine {
    Chorus::new(ChorusConfig::default(), ManualPlatform::new())
}

fn u(s: &str) -> UserId {
    UserId::new(s)
}

fn w(s: &str) -> WorkerId {
    WorkerId::new(s)
}

/// Opens a session for `user` at `at` and has `workers` claim its HIT.
fn session_with(e: &mut Engine, user: &str, workers: &[&str], at: Timestamp) -> SessionId {
    let r = e
        .handle_inbound_user_message(&u(user), "hello", at)
        .unwrap();
    let sid = r.session_id.unwrap();
    let hit = *e.state().sessions[&sid].hits.last().unwrap();
    for name in workers {
        let out = e.claim_assignment(hit, &w(name), at).unwrap();
        assert!(matches!(out, ClaimOutcome::Joined { .. }));
    }
    sid
}

fn assert_replays(e: &Engine) {
    let replayed = SystemState::replay(e.config().clone(), e.log().entries()).unwrap();
    assert_eq!(&replayed, e.state());
}

#[test]
fn new_user_gets_welcome_session_and_wait_reply() {
    let mut e = engine();
    let r = e
        .handle_inbound_user_message(&u("ana"), "hello", t(0))
        .unwrap();
    assert!(r.opened);
    assert_eq!(
        r.auto_replies,
        vec![AutoReplyKind::Welcome, AutoReplyKind::Wait]
    );
    let out = e.drain_outbox();
    assert_eq!(out.len(), 2);
    let pool = &e.config().gateway.auto_reply;
    assert!(pool.welcome_messages.contains(&out[0].body));
    assert!(pool.wait_messages.contains(&out[1].body));
    assert_eq!(e.platform().posted.len(), 1);
    assert_eq!(e.platform().posted[0].1, 10);

    let r2 = e
        .handle_inbound_user_message(&u("ana"), "thanks", t(5))
        .unwrap();
    assert!(!r2.opened);
    assert_eq!(r2.session_id, r.session_id);
    assert!(r2.auto_replies.is_empty());
    assert!(e.drain_outbox().is_empty());
    assert_replays(&e);
}

#[test]
fn empty_user_message_is_rejected() {
    let mut e = engine();
    assert_eq!(
        e.handle_inbound_user_message(&u("ana"), "  ", t(0)),
        Err(ChorusError::EmptyBody)
    );
    assert!(e.log().is_empty());
}

#[test]
fn auto_reply_choice_is_fixed_by_seed() {
    let run = |seed| {
        let mut cfg = ChorusConfig::default();
        cfg.gateway.auto_reply.rng_seed = seed;
        let mut e = Chorus::new(cfg, ManualPlatform::new());
        for i in 0..20 {
            e.handle_inbound_user_message(&u(&format!("u{i}")), "hi", t(i))
                .unwrap();
        }
        e.drain_outbox()
            .into_iter()
            .map(|o| o.body)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(9), run(9));
    let wait = ChorusConfig::default().gateway.auto_reply.wait_messages;
    let bodies = run(9);
    assert!(
        wait.iter().all(|m| bodies.contains(m)),
        "all wait messages get used"
    );
}

#[test]
fn lone_worker_proposal_goes_straight_to_user() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["w1"], t(0));
    e.drain_outbox();
    let mid = e
        .propose_message(sid, &w("w1"), "Hi, how can I help?", t(10))
        .unwrap();
    let m = &e.state().conversations[&sid].messages[&mid];
    assert_eq!(m.status, MessageStatus::Accepted);
    assert_eq!(m.votes.len(), 1);
    let out = e.drain_outbox();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].message_id, Some(mid));
    assert_eq!(e.state().ledger(sid, &w("w1")).unwrap().total, 2 + 5);
    assert_eq!(
        e.deliver_accepted_message(mid, t(11)),
        Err(ChorusError::AlreadyDelivered(mid))
    );
}

#[test]
fn two_workers_bypass_but_six_need_three_votes() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["w1", "w2"], t(0));
    let mid = e.propose_message(sid, &w("w1"), "hello", t(1)).unwrap();
    assert_eq!(
        e.state().conversations[&sid].messages[&mid].status,
        MessageStatus::Accepted
    );

    let sid2 = session_with(&mut e, "bo", &["a", "b", "c", "d", "e", "f"], t(2));
    let mid = e.propose_message(sid2, &w("a"), "hello", t(3)).unwrap();
    assert_eq!(
        e.state().conversations[&sid2].messages[&mid].status,
        MessageStatus::Pending
    );
    assert_eq!(
        e.deliver_accepted_message(mid, t(3)),
        Err(ChorusError::NotAccepted(mid))
    );
    assert_eq!(
        e.vote_message(sid2, &w("b"), mid, t(4)),
        Ok(MessageStatus::Pending)
    );
    assert_eq!(
        e.vote_message(sid2, &w("b"), mid, t(4)),
        Err(ChorusError::AlreadyVoted {
            message: mid,
            worker: w("b")
        })
    );
    assert_eq!(
        e.vote_message(sid2, &w("c"), mid, t(5)),
        Ok(MessageStatus::Accepted)
    );
    assert_eq!(
        e.vote_message(sid2, &w("d"), mid, t(6)),
        Err(ChorusError::MessageNotPending(mid))
    );
    assert_replays(&e);
}

#[test]
fn stale_workers_stop_counting_toward_the_threshold() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["a", "b", "c", "d", "e"], t(0));
    // Only a and b stay on the page; at t=60 the other three are stale.
    e.heartbeat(sid, &w("b"), t(59)).unwrap();
    let mid = e.propose_message(sid, &w("a"), "hi", t(60)).unwrap();
    let accepted = e
        .log()
        .entries()
        .iter()
        .find_map(|x| match &x.event {
            Event::MessageAccepted {
                message_id,
                active_workers,
                threshold,
                ..
            } if *message_id == mid => Some((*active_workers, *threshold)),
            _ => None,
        })
        .unwrap();
    assert_eq!(accepted, (2, 1));
}

#[test]
fn worker_commands_check_membership_and_body() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["w1"], t(0));
    assert_eq!(
        e.propose_message(sid, &w("zz"), "hi", t(1)),
        Err(ChorusError::NotAParticipant {
            session: sid,
            worker: w("zz")
        })
    );
    assert_eq!(
        e.propose_message(sid, &w("w1"), " \n", t(1)),
        Err(ChorusError::EmptyBody)
    );
    assert_eq!(
        e.post_fact(sid, &w("w1"), "", t(1)),
        Err(ChorusError::EmptyBody)
    );
    let f = e
        .post_fact(sid, &w("w1"), "user is in Seattle", t(2))
        .unwrap();
    assert_eq!(f, FactId(1));
    assert_eq!(e.state().ledger(sid, &w("w1")).unwrap().total, 2);
}

#[test]
fn handshake_session_times_out_fifteen_minutes_after_last_user_message() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["w1"], t(0));
    e.propose_message(sid, &w("w1"), "hi!", t(30)).unwrap();
    e.handle_inbound_user_message(&u("ana"), "need a cafe", t(100))
        .unwrap();
    assert_eq!(e.state().sessions[&sid].deadline, t(100) + 15 * MINUTE_MS);
    assert!(e.tick(t(999)).unwrap().is_empty());
    assert_eq!(e.tick(t(1000)).unwrap(), vec![sid]);
    let rec = &e.state().sessions[&sid];
    assert_eq!(rec.close_reason, Some(CloseReason::Timeout));
    assert_eq!(rec.closed_at, Some(t(1000)));
    assert_replays(&e);
}

#[test]
fn message_at_the_deadline_opens_a_new_session() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &[], t(0));
    let r = e
        .handle_inbound_user_message(&u("ana"), "still there?", t(45 * 60))
        .unwrap();
    assert!(r.opened);
    assert_ne!(r.session_id, Some(sid));
    assert!(!e.state().sessions[&sid].is_open());
    assert_eq!(r.auto_replies, vec![AutoReplyKind::Wait]);
}

#[test]
fn two_submissions_close_and_force_the_rest() {
    let mut cfg = ChorusConfig::default();
    cfg.incentives.min_points_to_submit = 4;
    let mut e = Chorus::new(cfg, ManualPlatform::new());
    let sid = session_with(&mut e, "ana", &["a", "b", "c", "d", "e"], t(0));
    e.propose_message(sid, &w("a"), "one", t(1)).unwrap();
    e.propose_message(sid, &w("a"), "two", t(2)).unwrap();
    e.propose_message(sid, &w("b"), "three", t(3)).unwrap();
    assert!(matches!(
        e.submit_hit(sid, &w("b"), t(4)),
        Err(ChorusError::NotEligible {
            total: 2,
            required: 4,
            ..
        })
    ));
    e.propose_message(sid, &w("b"), "four", t(5)).unwrap();
    let first = e.submit_hit(sid, &w("a"), t(6)).unwrap();
    assert!(!first.closed);
    assert_eq!(first.submissions, 1);
    assert_eq!(
        e.propose_message(sid, &w("a"), "again", t(7)),
        Err(ChorusError::NotAParticipant {
            session: sid,
            worker: w("a")
        })
    );
    let second = e.submit_hit(sid, &w("b"), t(8)).unwrap();
    assert!(second.closed);
    assert_eq!(second.forced, vec![w("c"), w("d"), w("e")]);
    assert_eq!(second.settlements.len(), 5);
    let rec = &e.state().sessions[&sid];
    assert_eq!(rec.close_reason, Some(CloseReason::TwoSubmissions));
    assert_eq!(rec.submissions.len(), 2);
    assert_eq!(rec.forced_count(), 3);
    // c, d, e have 0 points and return to the retainer by default.
    assert_eq!(e.state().pool.waiting.len(), 3);
    assert_eq!(e.platform().bonuses.len(), 5);
    assert_eq!(e.settle_bonus(sid, t(9)).unwrap(), second.settlements);
    assert_eq!(e.platform().bonuses.len(), 5);
    // 10 posted, 5 claimed: 5 converted to retainer slots.
    let slots = e
        .state()
        .assignments
        .values()
        .filter(|a| a.retainer_until == Some(t(8) + 30 * MINUTE_MS))
        .count();
    assert_eq!(slots, 5);
    assert_eq!(e.convert_to_retainer(sid, t(9)).unwrap(), vec![]);
    assert_eq!(
        e.propose_message(sid, &w("c"), "late", t(10)),
        Err(ChorusError::SessionClosed(sid))
    );
    assert_replays(&e);
}

#[test]
fn settlement_requires_closure() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["a"], t(0));
    assert_eq!(
        e.settle_bonus(sid, t(1)),
        Err(ChorusError::SessionStillOpen(sid))
    );
    assert_eq!(
        e.convert_to_retainer(sid, t(1)),
        Err(ChorusError::SessionStillOpen(sid))
    );
}

#[test]
fn waiting_points_let_a_late_joiner_submit() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["a"], t(0));
    assert!(matches!(
        e.submit_hit(sid, &w("a"), t(60)),
        Err(ChorusError::NotEligible { total: 2, .. })
    ));
    let r = e.submit_hit(sid, &w("a"), t(20 * 60)).unwrap();
    assert_eq!(r.submissions, 1);
    assert_eq!(e.state().ledger(sid, &w("a")).unwrap().total, 40);
    assert_replays(&e);
}

#[test]
fn blocking_closes_the_session_and_drops_later_messages() {
    let mut e = engine();
    let sid = session_with(&mut e, "troll", &["a", "b"], t(0));
    assert_eq!(
        e.block_user(&u("troll"), "abuse", "wrong", t(1)),
        Err(ChorusError::Unauthorized)
    );
    assert_eq!(
        e.block_user(&u("nobody"), "abuse", "change-me", t(1)),
        Err(ChorusError::UnknownUser(u("nobody")))
    );
    let acct = e
        .block_user(&u("troll"), "abuse", "change-me", t(60))
        .unwrap();
    assert!(acct.blocked);
    assert_eq!(
        e.state().sessions[&sid].close_reason,
        Some(CloseReason::Timeout)
    );
    assert_eq!(e.state().settlements[&sid].len(), 2);
    let len = e.log().len();
    let again = e
        .block_user(&u("troll"), "abuse", "change-me", t(61))
        .unwrap();
    assert_eq!(again, acct);
    assert_eq!(e.log().len(), len);

    let r = e
        .handle_inbound_user_message(&u("troll"), "hey", t(70))
        .unwrap();
    assert!(r.dropped);
    assert!(e.state().open_sessions.is_empty());
    assert_eq!(
        e.open_session(&u("troll"), t(71)),
        Err(ChorusError::UserBlocked(u("troll")))
    );

    e.unblock_user(&u("troll"), "change-me", t(80)).unwrap();
    assert!(
        e.handle_inbound_user_message(&u("troll"), "sorry", t(90))
            .unwrap()
            .opened
    );
    assert_replays(&e);
}

#[test]
fn dynamic_policy_dispatches_retainer_first() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &[], t(0));
    e.close_session(sid, CloseReason::Timeout, t(10)).unwrap();
    let hit = e.state().sessions[&sid].hits[0];
    for name in ["r1", "r2", "r3"] {
        let out = e.claim_assignment(hit, &w(name), t(20)).unwrap();
        assert!(matches!(out, ClaimOutcome::Retainer { .. }));
    }
    assert_eq!(e.state().pool.occupancy(t(20)), 3);

    let r = e
        .handle_inbound_user_message(&u("bo"), "hi", t(30))
        .unwrap();
    let s2 = r.session_id.unwrap();
    assert_eq!(e.platform().posted.last().unwrap().1, 7);
    assert_eq!(e.state().pool.pings.len(), 3);
    assert_eq!(e.respond_to_ping(&w("r1"), t(45)).unwrap(), s2);
    assert_eq!(e.respond_to_ping(&w("r2"), t(50)).unwrap(), s2);
    assert!(e.state().sessions[&s2].is_participant(&w("r1")));
    // r3 misses the 20 s promise: one strike, back to the tail, and a
    // replacement assignment is posted since the pool has nobody else.
    e.tick(t(51)).unwrap();
    let entry = e.state().pool.entry(&w("r3")).unwrap();
    assert_eq!(entry.strikes, 1);
    assert!(e.state().pool.pings.is_empty());
    assert_eq!(e.platform().posted.last().unwrap().1, 1);
    assert_eq!(
        e.respond_to_ping(&w("r3"), t(52)),
        Err(ChorusError::NotPinged(w("r3")))
    );
    assert_replays(&e);
}

#[test]
fn second_miss_expires_the_retainer_assignment() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &[], t(0));
    e.close_session(sid, CloseReason::Timeout, t(1)).unwrap();
    let hit = e.state().sessions[&sid].hits[0];
    e.claim_assignment(hit, &w("r"), t(2)).unwrap();
    for (user, start) in [("b", 10), ("c", 100)] {
        let r = e
            .handle_inbound_user_message(&u(user), "hi", t(start))
            .unwrap();
        assert_eq!(e.platform().posted.last().unwrap().1, 9);
        e.tick(t(start + 21)).unwrap();
        e.close_session(r.session_id.unwrap(), CloseReason::Timeout, t(start + 30))
            .unwrap();
    }
    assert!(!e.state().pool.contains(&w("r")));
    let a = e
        .state()
        .assignments
        .values()
        .find(|a| {
            a.history
                .iter()
                .any(|(s, _)| *s == AssignmentState::InRetainer)
        })
        .unwrap();
    assert_eq!(a.state, AssignmentState::Expired);
    assert_replays(&e);
}

#[test]
fn static_policy_ignores_the_retainer() {
    let mut e = Chorus::new(ChorusConfig::original_deployment(), ManualPlatform::new());
    let sid = session_with(&mut e, "ana", &[], t(0));
    e.close_session(sid, CloseReason::Timeout, t(1)).unwrap();
    let hit = e.state().sessions[&sid].hits[0];
    e.claim_assignment(hit, &w("r"), t(2)).unwrap();
    e.handle_inbound_user_message(&u("bo"), "hi", t(3)).unwrap();
    assert_eq!(e.platform().posted.last().unwrap().1, 10);
    assert!(e.state().pool.pings.is_empty());
}

#[test]
fn retainer_entries_and_slots_expire_after_thirty_minutes() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &[], t(0));
    e.close_session(sid, CloseReason::Timeout, t(0)).unwrap();
    let hit = e.state().sessions[&sid].hits[0];
    e.claim_assignment(hit, &w("r"), t(60)).unwrap();
    e.tick(t(30 * 60)).unwrap();
    // Nine unclaimed slots expire at closure + 30 min; r stays until 60 s later.
    assert_eq!(e.platform().expired.len(), 9);
    assert!(e.state().pool.contains(&w("r")));
    e.tick(t(31 * 60)).unwrap();
    assert!(!e.state().pool.contains(&w("r")));
    assert!(matches!(
        e.claim_assignment(hit, &w("late"), t(32 * 60)),
        Err(ChorusError::NoClaimableAssignment(_))
    ));
}

#[test]
fn platform_claims_flow_through_poll() {
    let mut e = engine();
    let r = e
        .handle_inbound_user_message(&u("ana"), "hi", t(0))
        .unwrap();
    let sid = r.session_id.unwrap();
    let hit = e.state().sessions[&sid].hits[0];
    for (name, at) in [("a", 5), ("b", 9), ("a", 12)] {
        e.platform_mut().push_claim(ClaimEvent {
            hit_id: hit,
            worker_id: w(name),
            at: t(at),
        });
    }
    assert_eq!(e.next_deadline(), Some(t(5)));
    let got = e.poll_platform(t(20)).unwrap();
    assert_eq!(got.len(), 3);
    assert!(matches!(got[2].0, ClaimOutcome::Dropped { .. }));
    assert_eq!(e.state().sessions[&sid].participants.len(), 2);
    assert!(e.state().is_busy(&w("a")));
}

#[test]
fn worker_view_shows_history_with_separators() {
    let mut e = engine();
    for (i, start) in [0u64, 4000, 8000].into_iter().enumerate() {
        let sid = session_with(&mut e, "ana", &["a"], t(start));
        e.post_fact(sid, &w("a"), &format!("fact {i}"), t(start + 1))
            .unwrap();
        e.propose_message(sid, &w("a"), "hello", t(start + 2))
            .unwrap();
        if i < 2 {
            e.close_session(sid, CloseReason::Timeout, t(start + 10))
                .unwrap();
        }
    }
    let current = *e.state().open_sessions.get(&u("ana")).unwrap();
    let v = e.render_worker_view(current, &w("a")).unwrap();
    assert_eq!(v.chat_separators(), 2);
    assert_eq!(v.fact_separators(), 2);
    assert_eq!(v.messages().count(), 6);
    assert!(e.render_worker_view(current, &w("zz")).is_err());
}

#[test]
fn user_transcript_hides_pending_proposals() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["a", "b", "c", "d", "e", "f"], t(0));
    e.propose_message(sid, &w("a"), "pending one", t(1))
        .unwrap();
    let tr = e.user_transcript(&u("ana"));
    assert_eq!(tr.len(), 1);
    assert_eq!(tr[0].body, "hello");
}

#[test]
fn score_tracks_the_current_session() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["a"], t(0));
    e.propose_message(sid, &w("a"), "x", t(1)).unwrap();
    let s = e.score(&w("a"), None).unwrap();
    assert_eq!((s.session_id, s.total, s.eligible), (sid, 7, false));
}

#[test]
fn resume_from_log_continues_where_it_stopped() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["a"], t(0));
    e.propose_message(sid, &w("a"), "x", t(1)).unwrap();
    let text = e.log().to_jsonl();
    let entries = EventLog::from_jsonl_str(&text).unwrap().into_entries();
    let mut platform = ManualPlatform::new();
    platform.set_next_hit(1);
    let mut resumed = Chorus::from_log(ChorusConfig::default(), entries, platform).unwrap();
    assert_eq!(resumed.state(), e.state());
    resumed.propose_message(sid, &w("a"), "y", t(2)).unwrap();
    resumed
        .handle_inbound_user_message(&u("bo"), "hi", t(3))
        .unwrap();
    assert_replays(&resumed);
}

#[test]
fn replay_rejects_tampered_logs() {
    let mut e = engine();
    let sid = session_with(&mut e, "ana", &["a", "b", "c", "d", "e", "f"], t(0));
    e.propose_message(sid, &w("a"), "x", t(1)).unwrap();
    let mut entries = e.log().entries().to_vec();
    let mid = MessageId(2);
    let n = entries.len() as u64;
    entries.push(EventLogEntry {
        seq: n + 1,
        at: t(2),
        session_id: Some(sid),
        event: Event::MessageDelivered {
            message_id: mid,
            user_id: u("ana"),
        },
    });
    assert!(matches!(
        SystemState::replay(ChorusConfig::default(), &entries),
        Err(ReplayError::Invalid { .. })
    ));
    entries.pop();
    entries.remove(3);
    assert!(matches!(
        SystemState::replay(ChorusConfig::default(), &entries),
        Err(ReplayError::CorruptLog(_))
    ));
    assert_eq!(
        SystemState::replay(ChorusConfig::default(), &[]).unwrap(),
        SystemState::new(ChorusConfig::default())
    );
}
