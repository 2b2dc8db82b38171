//! Random small scenarios for soak-testing the protocol.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::UserId;
use crate::time::{HOUR_MS, MINUTE_MS, SECOND_MS};

use super::agent::{AgentProfile, Behavior, SubmitPolicy};
use super::scenario::{
    AdminAction, AdminCommand, CrowdScript, PlatformModel, Preset, Scenario, SessionPlan,
    UserScript, UserTurn, WorkerGroup,
};
use super::{run_scenario, SimError};

const BEHAVIORS: &[Behavior] = &[
    Behavior::Diligent,
    Behavior::Confirmer,
    Behavior::SpammerMessage,
    Behavior::SpammerFact,
    Behavior::SpammerVote,
    Behavior::Idler,
    Behavior::EarlySubmitter,
];

const USER_LINES: &[&str] = &[
    "hi, can you help me find a place to eat?",
    "something cheap near the university",
    "do they have vegetarian food?",
    "how late are they open?",
    "ok",
    "what about parking?",
    "Thanks!",
    "bye",
];

/// A small random scenario: a handful of users and workers, random config
/// and platform speed, occasional directed sessions and admin blocks.
pub fn fuzz_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration_ms = rng.random_range(10..=60) * MINUTE_MS;

    let mut config = std::collections::BTreeMap::new();
    let mut set = |k: &str, v: String| {
        config.insert(k.to_owned(), v.into());
    };
    set(
        "incentives.min_points_to_submit",
        [0u32, 5, 20, 40].choose(&mut rng).unwrap().to_string(),
    );
    set(
        "recruiting.target_crowd_size",
        rng.random_range(1..=6u32).to_string(),
    );
    set(
        "recruiting.max_strikes",
        rng.random_range(1..=3u32).to_string(),
    );
    set(
        "recruiting.retainer_duration_ms",
        (rng.random_range(2..=30u64) * MINUTE_MS).to_string(),
    );
    set(
        "lifecycle.post_handshake_timeout_ms",
        (rng.random_range(2..=15u64) * MINUTE_MS).to_string(),
    );
    set(
        "lifecycle.pre_handshake_timeout_ms",
        (rng.random_range(5..=45u64) * MINUTE_MS).to_string(),
    );
    if rng.random_bool(0.3) {
        set(
            "recruiting.return_under_minimum_to_retainer",
            "false".into(),
        );
    }

    let workers = (0..rng.random_range(1..=5))
        .map(|g| {
            let behavior = *BEHAVIORS.choose(&mut rng).unwrap();
            let mut profile = AgentProfile::new(behavior);
            if rng.random_bool(0.3) {
                profile.submit = Some(
                    *[
                        SubmitPolicy::WhenEligible,
                        SubmitPolicy::Never,
                        SubmitPolicy::AfterMs {
                            ms: rng.random_range(1..=10) * MINUTE_MS,
                        },
                    ]
                    .choose(&mut rng)
                    .unwrap(),
                );
            }
            profile.ping_miss_probability = Some(rng.random_range(0.0..0.5));
            WorkerGroup {
                count: rng.random_range(1..=4),
                id_prefix: format!("g{g}w"),
                profile,
            }
        })
        .collect();

    let n_users = rng.random_range(1..=4);
    let users = (0..n_users)
        .map(|u| {
            let sessions = (0..rng.random_range(1..=3))
                .map(|_| {
                    let directed = rng.random_bool(0.15);
                    let n_turns = rng.random_range(1..=5);
                    let turns = (0..n_turns)
                        .map(|k| UserTurn {
                            delay_ms: if k == 0 {
                                0
                            } else {
                                rng.random_range(0..=8 * MINUTE_MS / SECOND_MS) * SECOND_MS
                            },
                            wait_for_reply: k > 0 && !directed && rng.random_bool(0.5),
                            text: USER_LINES.choose(&mut rng).unwrap().to_string(),
                        })
                        .collect();
                    let crowd = directed.then(|| {
                        let len = rng.random_range(1..=10) * MINUTE_MS;
                        let mut replies: Vec<u64> = (0..rng.random_range(0..=4))
                            .map(|_| rng.random_range(0..=len))
                            .collect();
                        replies.sort_unstable();
                        CrowdScript {
                            replies_at_ms: replies,
                            rejected_at_ms: (0..rng.random_range(0..=2))
                                .map(|_| rng.random_range(0..=len))
                                .collect(),
                            submit_at_ms: len,
                        }
                    });
                    SessionPlan {
                        start_ms: rng.random_range(0..=duration_ms),
                        turns,
                        crowd,
                    }
                })
                .collect();
            UserScript {
                user_id: UserId::new(format!("u{u}")),
                sessions,
            }
        })
        .collect();

    let admin = if rng.random_bool(0.2) {
        let user_id = UserId::new(format!("u{}", rng.random_range(0..n_users + 1)));
        let at = rng.random_range(0..=duration_ms);
        let mut v = vec![AdminAction {
            at_ms: at,
            command: AdminCommand::Block {
                user_id: user_id.clone(),
                reason: "fuzz".into(),
            },
        }];
        if rng.random_bool(0.5) {
            v.push(AdminAction {
                at_ms: rng.random_range(at..=duration_ms),
                command: AdminCommand::Unblock { user_id },
            });
        }
        v
    } else {
        Vec::new()
    };

    Scenario {
        name: format!("fuzz-{seed}"),
        description: String::new(),
        seed: rng.random(),
        duration_ms,
        drain_ms: 2 * HOUR_MS,
        preset: if rng.random_bool(0.5) {
            Preset::Updated
        } else {
            Preset::Original
        },
        config,
        platform: if rng.random_bool(0.5) {
            PlatformModel::Fast
        } else {
            PlatformModel::Calibrated
        },
        workers,
        users,
        generated_users: None,
        admin,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzFailure {
    pub run: u32,
    pub scenario_seed: u64,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub runs: u32,
    pub events: u64,
    pub sessions: u64,
    pub failures: Vec<FuzzFailure>,
}

/// Runs `runs` random scenarios, each twice, and reports invariant
/// violations, replay mismatches, nondeterminism and engine errors.
pub fn fuzz(runs: u32, seed: u64) -> FuzzReport {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport {
        runs,
        ..FuzzReport::default()
    };
    for run in 0..runs {
        let s = master.random();
        let scenario = fuzz_scenario(s);
        let mut problems = Vec::new();
        match (run_scenario(&scenario), run_scenario(&scenario)) {
            (Ok(a), Ok(b)) => {
                report.events += a.log.len() as u64;
                report.sessions += a.state.sessions.len() as u64;
                problems.extend(a.summary.invariant_violations.iter().cloned());
                if a.log.to_jsonl() != b.log.to_jsonl() {
                    problems.push("equal scenarios produced different logs".into());
                }
            }
            (Err(e), _) | (_, Err(e)) => problems.push(match e {
                SimError::InvalidScenario(m) => format!("generated an invalid scenario: {m}"),
                e => e.to_string(),
            }),
        }
        if !problems.is_empty() {
            report.failures.push(FuzzFailure {
                run,
                scenario_seed: s,
                problems,
            });
        }
    }
    report
}
