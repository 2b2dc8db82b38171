//! Synthetic session corpora with prescribed means.
//!
//! Per-session duration and message counts are drawn from gamma
//! distributions with the target mean and SD, then rescaled so the corpus
//! means hit the targets exactly (up to integer rounding). Each session is
//! scripted: user turns and crowd replies are placed at fixed offsets and a
//! director votes replies through, so the log reproduces the plan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::ids::UserId;
use crate::time::{HOUR_MS, MINUTE_MS, SECOND_MS};

use super::agent::{AgentProfile, Behavior};
use super::scenario::{
    CrowdScript, PlatformModel, Preset, Scenario, SessionPlan, UserScript, UserTurn, WorkerGroup,
};
use super::SimError;

/// Crowd replies never come earlier than this after the session opens, so
/// the first workers have arrived.
const FIRST_REPLY_MS: u64 = 45 * SECOND_MS;
const MIN_DURATION_MS: u64 = MINUTE_MS;
const MAX_DURATION_MS: u64 = 150 * MINUTE_MS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusTargets {
    pub sessions: u32,
    pub duration_mean_min: f64,
    pub duration_sd_min: f64,
    pub messages_mean: f64,
    pub messages_sd: f64,
    pub user_messages_mean: f64,
    pub user_messages_sd: f64,
    pub crowd_messages_mean: f64,
    pub crowd_messages_sd: f64,
    pub rejected_mean: f64,
    pub rejected_sd: f64,
    /// Gap between consecutive session starts.
    pub spacing_ms: u64,
    pub workers: u32,
}

impl Default for CorpusTargets {
    /// The first month of the public deployment.
    fn default() -> Self {
        Self {
            sessions: 320,
            duration_mean_min: 10.63,
            duration_sd_min: 8.38,
            messages_mean: 25.87,
            messages_sd: 27.27,
            user_messages_mean: 7.82,
            user_messages_sd: 7.83,
            crowd_messages_mean: 18.22,
            crowd_messages_sd: 20.67,
            rejected_mean: 1.93,
            rejected_sd: 6.42,
            spacing_ms: HOUR_MS,
            workers: 40,
        }
    }
}

impl CorpusTargets {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InfeasibleTargets(m.to_owned()));
        let all = [
            self.duration_mean_min,
            self.duration_sd_min,
            self.messages_mean,
            self.messages_sd,
            self.user_messages_mean,
            self.user_messages_sd,
            self.crowd_messages_mean,
            self.crowd_messages_sd,
            self.rejected_mean,
            self.rejected_sd,
        ];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("means and SDs must be finite and non-negative");
        }
        if self.sessions == 0 {
            return bad("at least one session is required");
        }
        if self.duration_mean_min * MINUTE_MS as f64 <= MIN_DURATION_MS as f64 {
            return bad("mean duration must exceed one minute");
        }
        if self.duration_mean_min * MINUTE_MS as f64 >= MAX_DURATION_MS as f64 {
            return bad("mean duration is too long");
        }
        if self.user_messages_mean < 1.0 {
            return bad("every session starts with a user message");
        }
        let sum = self.user_messages_mean + self.crowd_messages_mean;
        if (sum - self.messages_mean).abs() > 0.05 * self.messages_mean.max(1.0) {
            return bad("user + crowd message means must match the total within 5%");
        }
        if self.workers < 3 {
            return bad("need at least three workers");
        }
        if self.spacing_ms == 0 && self.sessions > 1 {
            return bad("spacing must be positive");
        }
        Ok(())
    }
}

/// `n` gamma draws with the given mean and SD (all equal to the mean when
/// the SD is zero).
fn gamma_draws<R: Rng>(rng: &mut R, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    if mean <= 0.0 {
        return vec![0.0; n];
    }
    if sd <= 0.0 {
        return vec![mean; n];
    }
    let shape = (mean / sd).powi(2);
    let scale = sd * sd / mean;
    let g = Gamma::new(shape, scale).expect("positive parameters");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// Non-negative integers proportional to `weights` summing to `total`
/// (largest-remainder rounding).
fn apportion(weights: &[f64], total: u64) -> Vec<u64> {
    let n = weights.len();
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / n as f64; n]
    };
    let mut out: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take((total - assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// `floor + x` per session with corpus mean `mean`, where the excess over
/// the floor follows the gamma shape.
fn matched<R: Rng>(rng: &mut R, n: usize, mean: f64, sd: f64, floor: u64) -> Vec<u64> {
    let total = (mean * n as f64).round() as u64;
    let excess = total.saturating_sub(floor * n as u64);
    let w = gamma_draws(rng, n, (mean - floor as f64).max(0.0), sd);
    apportion(&w, excess)
        .into_iter()
        .map(|x| x + floor)
        .collect()
}

fn sorted_uniform<R: Rng>(rng: &mut R, k: u64, lo: u64, hi: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (0..k).map(|_| rng.random_range(lo..=hi)).collect();
    v.sort_unstable();
    v
}

/// A scripted scenario whose session statistics reproduce `targets`.
pub fn generate_corpus(targets: &CorpusTargets, seed: u64) -> Result<Scenario, SimError> {
    targets.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = targets.sessions as usize;

    let mean_ms = targets.duration_mean_min * MINUTE_MS as f64;
    let sd_ms = targets.duration_sd_min * MINUTE_MS as f64;
    // Clamp to the feasible range, then rescale the excess over the floor
    // until the clamps stop moving the mean.
    let mut dur: Vec<f64> = gamma_draws(&mut rng, n, mean_ms, sd_ms);
    for _ in 0..20 {
        for d in &mut dur {
            *d = d.clamp(MIN_DURATION_MS as f64, MAX_DURATION_MS as f64);
        }
        let m = dur.iter().sum::<f64>() / n as f64;
        let k = (mean_ms - MIN_DURATION_MS as f64) / (m - MIN_DURATION_MS as f64);
        for d in &mut dur {
            *d = MIN_DURATION_MS as f64 + (*d - MIN_DURATION_MS as f64) * k;
        }
    }
    let total_ms = (mean_ms * n as f64).round() as u64;
    let excess: Vec<f64> = dur.iter().map(|d| d - MIN_DURATION_MS as f64).collect();
    let durations: Vec<u64> = apportion(&excess, total_ms - MIN_DURATION_MS * n as u64)
        .into_iter()
        .map(|x| (x + MIN_DURATION_MS).min(MAX_DURATION_MS))
        .collect();

    let user = matched(
        &mut rng,
        n,
        targets.user_messages_mean,
        targets.user_messages_sd,
        1,
    );
    let crowd = matched(
        &mut rng,
        n,
        targets.crowd_messages_mean,
        targets.crowd_messages_sd,
        0,
    );
    let rejected = matched(&mut rng, n, targets.rejected_mean, targets.rejected_sd, 0);

    let mut users = Vec::with_capacity(n);
    for i in 0..n {
        let d = durations[i];
        let (u, c, r) = (user[i], crowd[i], rejected[i]);
        let mut user_at = vec![0u64];
        let mut replies = Vec::new();
        if c == 0 && u == 1 {
            // A lone user message has no duration; give it one reply.
            replies.push(d);
        } else if c == 0 {
            if u >= 2 {
                user_at.extend(sorted_uniform(&mut rng, u - 2, 1, d));
                user_at.push(d);
            }
        } else {
            user_at.extend(sorted_uniform(&mut rng, u - 1, 1, d));
            replies = sorted_uniform(&mut rng, c - 1, FIRST_REPLY_MS, d);
            replies.push(d);
        }
        let rejected_at = sorted_uniform(&mut rng, r, FIRST_REPLY_MS, d);
        let mut prev = 0;
        let turns = user_at
            .iter()
            .enumerate()
            .map(|(k, &at)| {
                let t = UserTurn {
                    delay_ms: at - prev,
                    wait_for_reply: false,
                    text: format!("message {} of session {}", k + 1, i + 1),
                };
                prev = at;
                t
            })
            .collect();
        users.push(UserScript {
            user_id: UserId::new(format!("user{:04}", i + 1)),
            sessions: vec![SessionPlan {
                start_ms: i as u64 * targets.spacing_ms,
                turns,
                crowd: Some(CrowdScript {
                    replies_at_ms: replies,
                    rejected_at_ms: rejected_at,
                    submit_at_ms: d,
                }),
            }],
        });
    }

    let config = [
        ("incentives.min_points_to_submit", "0"),
        ("lifecycle.pre_handshake_timeout_ms", "10800000"),
        ("lifecycle.post_handshake_timeout_ms", "10800000"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v.into()))
    .collect();

    Ok(Scenario {
        name: format!("corpus-{n}"),
        description: "synthetic corpus with prescribed session statistics".into(),
        seed,
        duration_ms: (n as u64 - 1) * targets.spacing_ms + MAX_DURATION_MS,
        drain_ms: 4 * HOUR_MS,
        preset: Preset::Updated,
        config,
        platform: PlatformModel::Fast,
        workers: vec![WorkerGroup {
            count: targets.workers,
            id_prefix: "w".into(),
            profile: AgentProfile::new(Behavior::Diligent),
        }],
        users,
        generated_users: None,
        admin: Vec::new(),
    })
}
