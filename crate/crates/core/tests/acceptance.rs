//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one PASS/FAIL line, even on success.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chorus_core::analytics::{
    deployment_cost_summary, hit_base_cost, worker_quality, QualityFlag, QualityThresholds,
};
use chorus_core::consensus::acceptance_threshold;
use chorus_core::event::Event;
use chorus_core::incentives::bonus_for_points;
use chorus_core::lifecycle::CloseReason;
use chorus_core::money::Cents;
use chorus_core::recruiting::{retainer_pay_owed, RetainerStay};
use chorus_core::sim::{fuzz, generate_corpus, run_scenario, CorpusTargets, RunOutput, Scenario};
use chorus_core::time::{Timestamp, HOUR_MS};
use chorus_core::{EventLog, EventLogEntry, FactId, SessionId, SystemState, WorkerId};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Scenario {
    Scenario::load(&scenarios_dir().join(name)).expect("shipped scenario loads")
}

fn run(name: &str) -> RunOutput {
    run_scenario(&load(name)).expect("shipped scenario runs")
}

fn within_budget(started: Instant, budget: Duration) -> (bool, String) {
    let took = started.elapsed();
    (
        took < budget,
        format!("{:.2}s of {}s", took.as_secs_f64(), budget.as_secs()),
    )
}

fn cost_arithmetic() -> Outcome {
    let t = Instant::now();
    let mut bad = Vec::new();

    let hit = hit_base_cost(10, Cents(20)).unwrap();
    if hit != Cents(280) {
        bad.push(format!("hit {hit}"));
    }
    let month = Cents(hit.0 * 320);
    if month != Cents(89_600) {
        bad.push(format!("320 sessions {month}"));
    }
    // Cents over days, half-up: (2 * 89600 + 31) / 62.
    let per_day = Cents((2 * month.0 + 31) / 62);
    if per_day != Cents(2_890) {
        bad.push(format!("per day {per_day}"));
    }

    let day = RetainerStay {
        entered_at: Timestamp::ZERO,
        left_at: Timestamp(24 * HOUR_MS),
    };
    let retainer = retainer_pay_owed(&[day; 10], None, Cents(20), 20);
    if retainer != Cents(11_520) {
        bad.push(format!("retainer {retainer}"));
    }

    let (fast, took) = within_budget(t, Duration::from_secs(1));

    // The same numbers through the log-level report.
    let run = run("320-sessions.json");
    let cfg = run.state.config.clone();
    let report = deployment_cost_summary(
        run.log.entries(),
        31,
        &cfg.recruiting.fee_schedule,
        cfg.recruiting.base_pay,
        cfg.recruiting.retainer_fee_percent,
    );
    if report.totals.base != Cents(89_600) || report.per_day != Cents(2_890) {
        bad.push(format!(
            "report base {} per day {}",
            report.totals.base, report.per_day
        ));
    }

    outcome(
        bad.is_empty() && fast,
        format!(
            "$2.80 / $896.00 / $28.90 / $115.20; {took}; {}",
            bad.join(", ")
        ),
    )
}

fn threshold_oracle(n: u32) -> u32 {
    (1..=n.max(1)).find(|k| 10 * k >= 4 * n).unwrap_or(1)
}

fn threshold_table() -> Outcome {
    let t = Instant::now();
    let mismatches: Vec<u32> = (0..=50)
        .filter(|&n| acceptance_threshold(n) != threshold_oracle(n))
        .collect();
    let spot = acceptance_threshold(10) == 4
        && acceptance_threshold(1) == 1
        && acceptance_threshold(2) == 1;

    let out = run("two-worker-bypass.yaml");
    let entries = out.log.entries();
    let voted: BTreeSet<_> = entries
        .iter()
        .filter_map(|e| match &e.event {
            Event::VoteCast { message_id, .. } => Some(*message_id),
            _ => None,
        })
        .collect();
    let delivered: BTreeSet<_> = entries
        .iter()
        .filter_map(|e| match &e.event {
            Event::MessageDelivered { message_id, .. } => Some(*message_id),
            _ => None,
        })
        .collect();
    let bypass = entries.iter().any(|e| match &e.event {
        Event::MessageAccepted {
            message_id,
            votes: 1,
            active_workers,
            threshold: 1,
        } => *active_workers == 2 && !voted.contains(message_id) && delivered.contains(message_id),
        _ => false,
    });

    let (fast, took) = within_budget(t, Duration::from_secs(1));
    outcome(
        mismatches.is_empty() && spot && bypass && fast,
        format!(
            "n=0..50 mismatches {mismatches:?}; 2-worker delivery without a second vote: {bypass}; {took}"
        ),
    )
}

fn only_session(out: &RunOutput) -> Option<&chorus_core::lifecycle::SessionRecord> {
    let mut it = out.state.sessions.values();
    let first = it.next()?;
    it.next().is_none().then_some(first)
}

fn lifecycle() -> Outcome {
    let budget = Duration::from_secs(5);
    let mut parts = Vec::new();
    let mut ok = true;

    // (a) handshake complete: closes 15 minutes after the last user message.
    let t = Instant::now();
    let out = run("handshake-timeout.yaml");
    let a = only_session(&out).is_some_and(|s| {
        s.handshake_complete
            && s.close_reason == Some(CloseReason::Timeout)
            && s.last_user_message_at.map(|m| m + 15 * 60_000) == s.closed_at
    }) && t.elapsed() < budget;
    ok &= a;
    parts.push(format!("(a) {a}"));

    // (b) no handshake: closes 45 minutes after creation.
    let t = Instant::now();
    let out = run("no-handshake.yaml");
    let b = only_session(&out).is_some_and(|s| {
        !s.handshake_complete
            && s.close_reason == Some(CloseReason::Timeout)
            && s.closed_at == Some(s.created_at + 45 * 60_000)
    }) && t.elapsed() < budget;
    ok &= b;
    parts.push(format!("(b) {b}"));

    // (c) two voluntary submissions close the session; everyone else is
    // force-submitted and every participant's bonus is settled.
    let t = Instant::now();
    let out = run("two-submissions.yaml");
    let c = two_submissions_closed(&out) && t.elapsed() < budget;
    ok &= c;
    parts.push(format!("(c) {c}"));

    // (d) a message after closure opens a fresh session.
    let t = Instant::now();
    let out = run("post-closure.yaml");
    let d = {
        let ids: Vec<SessionId> = out.state.sessions.keys().copied().collect();
        let s = &out.state.sessions;
        ids.len() == 2
            && ids[0] != ids[1]
            && s[&ids[0]].user_id == s[&ids[1]].user_id
            && s[&ids[0]]
                .closed_at
                .is_some_and(|c| s[&ids[1]].created_at >= c)
    } && t.elapsed() < budget;
    ok &= d;
    parts.push(format!("(d) {d}"));

    outcome(ok, parts.join(", "))
}

fn two_submissions_closed(out: &RunOutput) -> bool {
    let cfg = &out.state.config;
    let Some(record) = out.state.sessions.values().next() else {
        return false;
    };
    let sid = record.session_id;
    let Some(closed_at) = record.closed_at else {
        return false;
    };
    if record.close_reason != Some(CloseReason::TwoSubmissions)
        || record.submissions.len() != cfg.lifecycle.submissions_to_close as usize
    {
        return false;
    }
    let mut voluntary = BTreeSet::new();
    let mut forced = BTreeSet::new();
    let mut bonus: BTreeMap<WorkerId, (u32, Cents)> = BTreeMap::new();
    for e in out
        .log
        .entries()
        .iter()
        .filter(|e| e.session_id == Some(sid))
    {
        match &e.event {
            Event::SubmissionRecorded {
                worker_id,
                forced: f,
                ..
            } => {
                if *f {
                    if e.at != closed_at {
                        return false;
                    }
                    forced.insert(worker_id.clone());
                } else {
                    voluntary.insert(worker_id.clone());
                }
            }
            Event::BonusSettled {
                worker_id,
                points,
                amount,
            } => {
                if e.at < closed_at
                    || bonus
                        .insert(worker_id.clone(), (*points, *amount))
                        .is_some()
                {
                    return false;
                }
            }
            _ => {}
        }
    }
    let joined: BTreeSet<WorkerId> = record.participants.keys().cloned().collect();
    let everyone: BTreeSet<WorkerId> = voluntary.union(&forced).cloned().collect();
    !forced.is_empty()
        && voluntary.len() == 2
        && everyone == joined
        && bonus.keys().cloned().collect::<BTreeSet<_>>() == joined
        && bonus
            .values()
            .all(|(p, amount)| bonus_for_points(*p, &cfg.incentives) == *amount)
}

fn latency() -> Outcome {
    let t = Instant::now();
    let out = run("latency-240.json");
    let st = &out.summary.sessions;
    let targets = [(30, 0.25), (60, 0.60), (120, 0.883)];
    let mut ok = st.n_sessions == 240;
    let mut parts = Vec::new();
    for (secs, want) in targets {
        let got = st.within(secs).unwrap_or(f64::NAN);
        let hit = (got - want).abs() <= 0.05;
        ok &= hit;
        parts.push(format!(
            "{:.1}% <= {secs}s (target {:.1}%)",
            got * 100.0,
            want * 100.0
        ));
    }
    let (fast, took) = within_budget(t, Duration::from_secs(30));
    outcome(
        ok && fast,
        format!("{} sessions: {}; {took}", st.n_sessions, parts.join(", ")),
    )
}

fn corpus_round_trip() -> Outcome {
    let t = Instant::now();
    let targets = CorpusTargets::default();
    let scenario = generate_corpus(&targets, 11).expect("paper targets are feasible");
    let out = run_scenario(&scenario).expect("corpus runs");
    let st = &out.summary.sessions;
    let checks = [
        ("duration", st.duration_mean_min, targets.duration_mean_min),
        ("messages", st.messages_mean, targets.messages_mean),
        ("user", st.user_messages_mean, targets.user_messages_mean),
        ("crowd", st.crowd_messages_mean, targets.crowd_messages_mean),
    ];
    let mut ok = st.n_sessions == targets.sessions as usize;
    let mut parts = vec![format!("n={}", st.n_sessions)];
    for (name, got, want) in checks {
        ok &= ((got - want) / want).abs() <= 0.05;
        parts.push(format!("{name} {got:.2}/{want:.2}"));
    }
    let (fast, took) = within_budget(t, Duration::from_secs(30));
    outcome(ok && fast, format!("{}; {took}", parts.join(", ")))
}

fn replay_equivalence() -> Outcome {
    let t = Instant::now();
    let mut problems = Vec::new();
    let mut names = Vec::new();
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .expect("scenarios dir")
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    for path in &files {
        let scenario = Scenario::load(path).expect("shipped scenario loads");
        names.push(scenario.name.clone());
        let a = run_scenario(&scenario).expect("runs");
        let b = run_scenario(&scenario).expect("runs");
        let jsonl = a.log.to_jsonl();
        if jsonl != b.log.to_jsonl() {
            problems.push(format!("{}: logs differ", scenario.name));
        }
        let reread = EventLog::from_jsonl_str(&jsonl).expect("log re-reads");
        let cfg = scenario.config().expect("config");
        match SystemState::replay(cfg, reread.entries()) {
            Ok(state) if state == a.state => {}
            Ok(_) => problems.push(format!("{}: replay differs", scenario.name)),
            Err(e) => problems.push(format!("{}: replay failed: {e}", scenario.name)),
        }
        if !a.summary.invariant_violations.is_empty() {
            problems.push(format!(
                "{}: {}",
                scenario.name, a.summary.invariant_violations[0]
            ));
        }
    }
    let report = fuzz(1000, 1);
    for f in report.failures.iter().take(3) {
        problems.push(format!("fuzz run {}: {:?}", f.run, f.problems));
    }
    let (fast, took) = within_budget(t, Duration::from_secs(300));
    outcome(
        problems.is_empty() && fast && report.runs == 1000,
        format!(
            "{} scenarios + {} fuzz runs ({} events), {} failures; {took}; {}",
            names.len(),
            report.runs,
            report.events,
            report.failures.len(),
            problems.join("; ")
        ),
    )
}

fn fact_fixture() -> bool {
    let worker = WorkerId::new("fixture");
    let mut entries = vec![EventLogEntry {
        seq: 1,
        at: Timestamp::ZERO,
        session_id: Some(SessionId(1)),
        event: Event::SessionOpened {
            user_id: "u".into(),
            deadline: Timestamp(45 * 60_000),
        },
    }];
    for (i, body) in std::iter::repeat_n("a", 50)
        .chain(std::iter::repeat_n("d", 30))
        .enumerate()
    {
        entries.push(EventLogEntry {
            seq: i as u64 + 2,
            at: Timestamp(1_000 * (i as u64 + 1)),
            session_id: Some(SessionId(1)),
            event: Event::FactPosted {
                fact_id: FactId(i as u64 + 1),
                worker_id: worker.clone(),
                body: body.into(),
            },
        });
    }
    worker_quality(&entries, &QualityThresholds::default())
        .iter()
        .any(|q| q.worker_id == worker && q.flags.contains(&QualityFlag::FactSpammer))
}

fn spam_detection() -> Outcome {
    let scenario = load("spam-corpus.yaml");
    let out = run_scenario(&scenario).expect("spam corpus runs");
    let truth: BTreeMap<WorkerId, bool> = scenario
        .worker_ids()
        .into_iter()
        .map(|(w, p)| (w, p.behavior.is_spammer()))
        .collect();
    let flagged: BTreeSet<&WorkerId> = out
        .summary
        .workers
        .iter()
        .filter(|q| !q.flags.is_empty())
        .map(|q| &q.worker_id)
        .collect();
    let planted: BTreeSet<&WorkerId> = truth.iter().filter(|(_, s)| **s).map(|(w, _)| w).collect();
    let tp = flagged.intersection(&planted).count() as f64;
    let precision = if flagged.is_empty() {
        0.0
    } else {
        tp / flagged.len() as f64
    };
    let recall = tp / planted.len() as f64;
    let fixture = fact_fixture();
    outcome(
        precision >= 0.9 && recall >= 0.9 && fixture && out.summary.sessions.n_sessions >= 100,
        format!(
            "{} sessions, precision {precision:.3}, recall {recall:.3} ({} planted); 50x\"a\"/30x\"d\" flagged: {fixture}",
            out.summary.sessions.n_sessions,
            planted.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("cost arithmetic", cost_arithmetic),
        ("threshold table", threshold_table),
        ("lifecycle scenarios", lifecycle),
        ("latency quantiles", latency),
        ("corpus round-trip", corpus_round_trip),
        ("replay equivalence", replay_equivalence),
        ("spam detection", spam_detection),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.ok {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if o.ok { "PASS" } else { "FAIL" },
            o.detail.trim_end_matches("; ")
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
